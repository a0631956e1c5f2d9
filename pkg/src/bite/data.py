"""Trial containers, the BITE binary formats and synthetic EEG generators.

Trial file layout (little-endian)::

    header  : "BITE" u16 version u32 n_trials u16 C u32 T f32 fs u16 n_classes   (22 bytes)
    trial i : u16 subject u16 label u8 tag_len tag[tag_len] f32[C*T] (channel-major)

Weight archive layout (little-endian)::

    "BITW" u16 version u32 meta_len meta[meta_len] (UTF-8 JSON, sorted keys)
    u32 n_params  { u16 name_len name u8 ndim u32[ndim] f64[prod] } * n_params
    u32 n_buffers { same record layout } * n_buffers
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, DataError

TRIAL_MAGIC = b"BITE"
WEIGHT_MAGIC = b"BITW"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHIHIfH")
_TRIAL_HEAD = struct.Struct("<HHB")


class FormatError(DataError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


@dataclass
class Trial:
    subject: int
    label: int
    signal: np.ndarray
    session: str | None = None


@dataclass
class TrialSet:
    """A batch of equally shaped trials stored as stacked arrays."""

    fs: float
    n_classes: int
    signals: np.ndarray  # [n, C, T]
    labels: np.ndarray  # [n]
    subjects: np.ndarray  # [n]
    sessions: list[str | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if not self.sessions:
            self.sessions = [None] * len(self.labels)
        self.validate()

    def validate(self) -> None:
        n = len(self.labels)
        if n < 1:
            raise DataError("a TrialSet needs at least one trial")
        if self.signals.ndim != 3 or self.signals.shape[0] != n:
            raise DataError(f"signals must be [n={n}, C, T], got {self.signals.shape}")
        if self.subjects.shape != (n,) or len(self.sessions) != n:
            raise DataError("labels, subjects and sessions must have one entry per trial")
        if self.n_classes < 1 or self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if self.subjects.min() < 0 or self.subjects.max() > 0xFFFF:
            raise DataError("subject ids must fit in an unsigned 16-bit integer")
        for tag in self.sessions:
            if tag is not None and len(tag.encode("utf-8")) > 255:
                raise DataError(f"session tag too long: {tag!r}")

    @classmethod
    def from_trials(cls, fs: float, n_classes: int, trials: list[Trial]) -> "TrialSet":
        if not trials:
            raise DataError("a TrialSet needs at least one trial")
        shapes = {t.signal.shape for t in trials}
        if len(shapes) != 1:
            raise DataError(f"trials differ in shape: {sorted(shapes)}")
        return cls(fs, n_classes, np.stack([t.signal for t in trials]), [t.label for t in trials],
                   [t.subject for t in trials], [t.session for t in trials])

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Trial]:
        for i in range(len(self)):
            yield Trial(int(self.subjects[i]), int(self.labels[i]), self.signals[i], self.sessions[i])

    @property
    def n_channels(self) -> int:
        return self.signals.shape[1]

    @property
    def n_samples(self) -> int:
        return self.signals.shape[2]

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.fs, self.n_classes, self.signals[idx], self.labels[idx], self.subjects[idx],
                        [self.sessions[i] for i in idx])

    def as_float32(self) -> "TrialSet":
        """Copy with samples and fs rounded to what the file format stores."""
        return TrialSet(float(np.float32(self.fs)), self.n_classes,
                        self.signals.astype(np.float32).astype(np.float64), self.labels.copy(),
                        self.subjects.copy(), list(self.sessions))

    def equals(self, other: "TrialSet") -> bool:
        return (self.fs == other.fs and self.n_classes == other.n_classes
                and self.signals.shape == other.signals.shape
                and np.array_equal(self.signals, other.signals)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.subjects, other.subjects)
                and list(self.sessions) == list(other.sessions))


# ---------------------------------------------------------------------------
# Trial file format
# ---------------------------------------------------------------------------

def encode_trials(ts: TrialSet) -> bytes:
    if not (ts.n_channels <= 0xFFFF and ts.n_classes <= 0xFFFF and len(ts) <= 0xFFFFFFFF):
        raise DataError("TrialSet dimensions exceed the format's field widths")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(TRIAL_MAGIC, FORMAT_VERSION, len(ts), ts.n_channels, ts.n_samples,
                           ts.fs, ts.n_classes))
    for i in range(len(ts)):
        tag = (ts.sessions[i] or "").encode("utf-8")
        buf.write(_TRIAL_HEAD.pack(int(ts.subjects[i]), int(ts.labels[i]), len(tag)))
        buf.write(tag)
        buf.write(ts.signals[i].astype("<f4").tobytes())
    return buf.getvalue()


def decode_trials(raw: bytes) -> TrialSet:
    if len(raw) < 4 or raw[:4] != TRIAL_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {TRIAL_MAGIC!r}", 0)
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(raw)}", len(raw))
    _, version, n, c, t, fs, n_classes = _HEADER.unpack_from(raw, 0)
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}", 4)
    pos = _HEADER.size
    payload = 4 * c * t
    signals = np.empty((n, c, t))
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)
    sessions: list[str | None] = []
    for i in range(n):
        if pos + _TRIAL_HEAD.size > len(raw):
            raise TruncatedFileError(
                f"trial {i}: expected {_TRIAL_HEAD.size} header bytes, {len(raw) - pos} left", pos)
        subj, label, tag_len = _TRIAL_HEAD.unpack_from(raw, pos)
        if label >= n_classes:
            raise LabelRangeError(f"trial {i}: label {label} >= n-classes {n_classes}", pos + 2)
        pos += _TRIAL_HEAD.size
        need = tag_len + payload
        if pos + need > len(raw):
            raise TruncatedFileError(
                f"trial {i}: expected {need} bytes of tag+payload, {len(raw) - pos} left", pos)
        sessions.append(raw[pos:pos + tag_len].decode("utf-8") if tag_len else None)
        pos += tag_len
        signals[i] = np.frombuffer(raw, dtype="<f4", count=c * t, offset=pos).reshape(c, t)
        pos += payload
        labels[i], subjects[i] = label, subj
    if pos != len(raw):
        raise DataError(f"{len(raw) - pos} trailing bytes after {n} trials (at byte offset {pos})")
    return TrialSet(float(fs), n_classes, signals, labels, subjects, sessions)


def write_trials(path, ts: TrialSet) -> None:
    Path(path).write_bytes(encode_trials(ts))


def read_trials(path) -> TrialSet:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"trial file not found: {p}")
    return decode_trials(p.read_bytes())


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def default_ssvep_freqs(n_classes: int = 12, start: float = 8.0, step: float = 4.0) -> list[float]:
    return [start + step * k for k in range(n_classes)]


def check_resolvable(freqs, fs: float, window: int, band: tuple[float, float]) -> None:
    """Every frequency inside ``band`` and below Nyquist; pairs at least half a bin apart."""
    freqs = [float(f) for f in freqs]
    lo, hi = band
    for f in freqs:
        if not 0 < f < fs / 2:
            raise ConfigError(f"class frequency {f} Hz must lie in (0, fs/2 = {fs / 2})")
        if not lo <= f <= hi:
            raise ConfigError(f"class frequency {f} Hz outside the band [{lo}, {hi}] Hz")
    half_bin = fs / window / 2
    srt = sorted(freqs)
    for a, b in zip(srt, srt[1:]):
        if b - a < half_bin - 1e-9:
            raise ConfigError(f"class frequencies {a} and {b} Hz are closer than half an STFT bin "
                              f"({half_bin} Hz) and cannot be resolved")


def synth_ssvep(n_subjects: int = 4, trials_per_class: int = 15, class_freqs=None, fs: float = 256.0,
                n_samples: int = 256, snr: float = 10.0, seed: int = rngmod.DEFAULT_SEED,
                n_channels: int = 8, stft_window: int = 32,
                band: tuple[float, float] = (8.0, 64.0)) -> TrialSet:
    """Sinusoid at the class frequency plus white noise.

    Each channel gets a random phase per trial and an amplitude drawn once per
    subject. ``snr`` is the ratio of mean sinusoid power to noise power.
    """
    freqs = default_ssvep_freqs() if class_freqs is None else [float(f) for f in class_freqs]
    if n_subjects < 1 or trials_per_class < 1 or len(freqs) < 2:
        raise ConfigError("need >= 1 subject, >= 1 trial per class and >= 2 classes")
    if snr <= 0:
        raise ConfigError(f"snr must be positive, got {snr}")
    check_resolvable(freqs, fs, stft_window, band)
    t = np.arange(n_samples) / fs
    signals, labels, subjects = [], [], []
    for s in range(n_subjects):
        gen = rngmod.stream(seed, "synth-ssvep", s)
        amp = gen.uniform(0.5, 1.5, size=n_channels) * gen.uniform(0.5, 2.0)
        sigma = math.sqrt(float(np.mean(amp ** 2)) / 2.0 / snr)
        for c, f in enumerate(freqs):
            for _ in range(trials_per_class):
                phase = gen.uniform(0, 2 * np.pi, size=(n_channels, 1))
                clean = amp[:, None] * np.sin(2 * np.pi * f * t[None, :] + phase)
                signals.append(clean + sigma * gen.standard_normal((n_channels, n_samples)))
                labels.append(c)
                subjects.append(s)
    return TrialSet(float(fs), len(freqs), np.stack(signals), labels, subjects)


def _bandlimited_noise(gen: np.random.Generator, shape, fs: float, lo: float, hi: float) -> np.ndarray:
    """Gaussian noise restricted to ``[lo, hi]`` Hz, scaled to unit variance."""
    white = gen.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    f = np.fft.rfftfreq(shape[-1], 1.0 / fs)
    spec[..., (f < lo) | (f > hi)] = 0.0
    out = np.fft.irfft(spec, n=shape[-1], axis=-1)
    return out / np.sqrt(np.mean(out ** 2, axis=-1, keepdims=True) + 1e-300)


def synth_mi(n_subjects: int = 3, trials_per_class: int = 20, n_classes: int = 4, fs: float = 128.0,
             n_samples: int = 256, n_channels: int = 8, seed: int = rngmod.DEFAULT_SEED,
             gain: float = 2.0, noise: float = 0.5, mu_band: tuple[float, float] = (8.0, 30.0)) -> TrialSet:
    """Class-dependent band-power boost of 8-30 Hz noise on a channel group.

    Channel ``j`` belongs to group ``j % n_classes``; class ``c`` multiplies the
    narrowband rhythm on group ``c`` by ``gain``. Subjects differ by a
    per-channel amplitude profile and a mild spatial mixing matrix.
    """
    if n_channels < n_classes:
        raise ConfigError(f"n_channels ({n_channels}) must be >= n_classes ({n_classes})")
    if n_subjects < 1 or trials_per_class < 1:
        raise ConfigError("need >= 1 subject and >= 1 trial per class")
    if n_classes < 2:
        raise ConfigError("need >= 2 classes")
    if not 0 < mu_band[0] < mu_band[1] < fs / 2:
        raise ConfigError(f"rhythm band {mu_band} must lie below Nyquist ({fs / 2} Hz)")
    groups = np.arange(n_channels) % n_classes
    signals, labels, subjects = [], [], []
    for s in range(n_subjects):
        gen = rngmod.stream(seed, "synth-mi", s)
        profile = gen.uniform(0.7, 1.3, size=n_channels)
        mixing = np.eye(n_channels) + 0.1 * gen.standard_normal((n_channels, n_channels))
        for c in range(n_classes):
            boost = np.where(groups == c, gain, 1.0)
            for _ in range(trials_per_class):
                rhythm = _bandlimited_noise(gen, (n_channels, n_samples), fs, *mu_band)
                x = boost[:, None] * rhythm + noise * gen.standard_normal((n_channels, n_samples))
                signals.append(mixing @ (profile[:, None] * x))
                labels.append(c)
                subjects.append(s)
    return TrialSet(float(fs), n_classes, np.stack(signals), labels, subjects)


# ---------------------------------------------------------------------------
# Weight archives
# ---------------------------------------------------------------------------

def _write_blobs(buf: io.BytesIO, blobs: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())


def _read_blobs(raw: bytes, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def need(k: int) -> None:
        if pos + k > len(raw):
            raise TruncatedFileError(f"expected {k} more bytes, {len(raw) - pos} left", pos)

    need(4)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(nlen + 1)
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        ndim = raw[pos]
        pos += 1
        need(4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = 8 * math.prod(shape)
        need(size)
        out[name] = np.frombuffer(raw, dtype="<f8", count=math.prod(shape), offset=pos).reshape(shape).copy()
        pos += size
    return out, pos


def encode_weights(model, metadata: dict | None = None) -> bytes:
    meta = {"config": model.config.to_dict(), "extra": metadata or {}}
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(WEIGHT_MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta_raw)))
    buf.write(meta_raw)
    _write_blobs(buf, {k: v.value for k, v in model.params.items()})
    _write_blobs(buf, model.buffers)
    return buf.getvalue()


def save_weights(path, model, metadata: dict | None = None) -> None:
    """Write parameters, batch-norm buffers, the config and optional metadata."""
    Path(path).write_bytes(encode_weights(model, metadata))


def _first_difference(a: dict, b: dict) -> str | None:
    for key in a:
        if a[key] != b.get(key):
            return key
    for key in b:
        if key not in a:
            return key
    return None


def decode_weights(raw: bytes, config=None):
    from .model import BiteConfig, BiteModel, buffer_shapes, parameter_shapes

    if raw[:4] != WEIGHT_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {WEIGHT_MAGIC!r}", 0)
    if len(raw) < 10:
        raise TruncatedFileError(f"header needs 10 bytes, file has {len(raw)}", len(raw))
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version > FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported archive version {version}", 4)
    pos = 10
    if pos + meta_len > len(raw):
        raise TruncatedFileError(f"metadata needs {meta_len} bytes, {len(raw) - pos} left", pos)
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    stored = BiteConfig.from_dict({**meta["config"], "band": tuple(meta["config"]["band"])})
    if config is not None:
        diff = _first_difference(stored.to_dict(), config.to_dict())
        if diff is not None:
            raise ConfigError(f"weight archive config mismatch on {diff.replace('_', '-')}: "
                              f"archive has {stored.to_dict()[diff]!r}, requested {config.to_dict()[diff]!r}")
    params, pos = _read_blobs(raw, pos)
    buffers, pos = _read_blobs(raw, pos)
    expected = parameter_shapes(stored)
    if set(params) != set(expected) or any(params[k].shape != tuple(expected[k]) for k in expected):
        raise ConfigError("weight archive parameters do not match the stored config")
    if set(buffers) != set(buffer_shapes(stored)):
        raise ConfigError("weight archive buffers do not match the stored config")
    model = BiteModel.initialize(stored)
    for k in expected:
        model.params[k].value = params[k]
        model.params[k].zero_grad()
    model.buffers = {k: buffers[k] for k in buffer_shapes(stored)}
    return model, meta.get("extra", {})


def load_weights(path, config=None):
    """Return ``(model, metadata)``; ``config`` if given must match the archive exactly."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"weight archive not found: {p}")
    return decode_weights(p.read_bytes(), config)
