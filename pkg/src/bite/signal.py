"""Signal frontend: Hann-windowed hop-1 STFT and Euclidean Alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError

EA_EIG_FLOOR = 1e-10


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, ``w[k] = 0.5 * (1 - cos(2*pi*k/n))``."""
    if n < 2:
        raise ConfigError(f"Hann window length must be >= 2, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def band_bins(fs: float, n: int, f_lo: float, f_hi: float) -> list[int]:
    """DFT bins ``k`` in ``1..n//2`` whose centre ``k*fs/n`` lies in ``[f_lo, f_hi]``.

    Edges are widened by ``1e-9 * fs`` so a bin centred exactly on an edge is
    kept despite rounding.
    """
    if not 0 < f_lo < f_hi <= fs / 2:
        raise ConfigError(f"band ({f_lo}, {f_hi}) Hz must satisfy 0 < f_lo < f_hi <= fs/2 = {fs / 2}")
    tol = 1e-9 * fs
    bins = [k for k in range(1, n // 2 + 1) if f_lo - tol <= k * fs / n <= f_hi + tol]
    if not bins:
        raise ConfigError(f"no DFT bin of a {n}-sample window at fs={fs} falls in ({f_lo}, {f_hi}) Hz")
    return bins


@dataclass(frozen=True)
class StftPlan:
    fs: float
    window_length: int
    band: tuple[float, float]
    bins: tuple[int, ...] = field(init=False)
    window: np.ndarray = field(init=False, repr=False, compare=False)
    hop: int = field(default=1, init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "bins", tuple(band_bins(self.fs, self.window_length, *self.band)))
        object.__setattr__(self, "window", hann_window(self.window_length))

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    @property
    def frequencies(self) -> np.ndarray:
        return np.asarray(self.bins) * self.fs / self.window_length


@dataclass
class Spectrogram:
    values: np.ndarray  # [F0, C, T]
    plan: StftPlan


def _frames(signal: np.ndarray, n: int) -> np.ndarray:
    left = n // 2
    right = n - 1 - left
    pad = [(0, 0)] * (signal.ndim - 1) + [(left, right)]
    return sliding_window_view(np.pad(signal, pad), n, axis=-1)


def stft_batch(signals: np.ndarray, plan: StftPlan) -> np.ndarray:
    """Magnitude STFT of ``[..., C, T]`` signals -> ``[..., F0, C, T]``.

    Frames are centred (zero padding of ``n//2`` on the left and
    ``n - 1 - n//2`` on the right) so the frame count equals ``T``.
    """
    signals = np.asarray(signals, dtype=np.float64)
    n = plan.window_length
    t = signals.shape[-1]
    if t < n:
        raise DataError(f"input too short for STFT: {t} samples < window length {n}")
    spec = np.fft.rfft(_frames(signals, n) * plan.window, axis=-1)
    mag = np.abs(spec[..., list(plan.bins)])  # [..., C, T, F0]
    return np.moveaxis(mag, -1, -3).copy()


def stft_magnitude(signal: np.ndarray, plan: StftPlan) -> Spectrogram:
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 2:
        raise DataError(f"expected a [C, T] signal, got shape {signal.shape}")
    return Spectrogram(stft_batch(signal, plan), plan)


# ---------------------------------------------------------------------------
# Euclidean Alignment
# ---------------------------------------------------------------------------

@dataclass
class AlignmentState:
    mean_cov: np.ndarray
    whitener: np.ndarray
    fit_count: int


def _inv_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, EA_EIG_FLOOR)
    return (vecs * vals ** -0.5) @ vecs.T


def ea_fit(trials) -> AlignmentState:
    """Reference covariance ``mean_i X_i X_i^T`` and its inverse square root."""
    if isinstance(trials, np.ndarray) and trials.ndim == 3:
        arr = np.asarray(trials, dtype=np.float64)
    else:
        trials = [np.asarray(x, dtype=np.float64) for x in trials]
        if not trials:
            raise DataError("ea_fit needs at least one trial")
        chans = {x.shape[0] for x in trials}
        if len(chans) != 1 or any(x.ndim != 2 for x in trials):
            raise DataError(f"ea_fit: inconsistent channel counts {sorted(chans)}")
        # trial lengths may differ; only channels must agree
        r = np.mean([x @ x.T for x in trials], axis=0)
        return AlignmentState(r, _inv_sqrt(r), len(trials))
    if arr.shape[0] == 0:
        raise DataError("ea_fit needs at least one trial")
    r = np.einsum("nct,ndt->cd", arr, arr) / arr.shape[0]
    return AlignmentState(r, _inv_sqrt(r), arr.shape[0])


def ea_apply(state: AlignmentState, trial: np.ndarray) -> np.ndarray:
    """Left-multiply a ``[C, T]`` trial (or ``[n, C, T]`` stack) by the whitener."""
    trial = np.asarray(trial, dtype=np.float64)
    c = state.whitener.shape[0]
    if trial.ndim not in (2, 3) or trial.shape[-2] != c:
        raise DataError(f"ea_apply: whitener expects {c} channels, trial has shape {trial.shape}")
    return np.matmul(state.whitener, trial)
