"""Fast self-check battery behind ``bite verify``.

Each check returns a :class:`CheckResult`; the battery is meant to finish in
well under a minute on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import BiteConfig, BiteModel
from .signal import StftPlan, band_bins, ea_apply, ea_fit, stft_batch
from .tensor import Padding
from .training import cross_entropy, kappa


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: float

    def line(self) -> str:
        return f"check={self.name} status={'pass' if self.passed else 'fail'} metric={self.metric:.3e}"


def tiny_config(**overrides) -> BiteConfig:
    """Smallest configuration exercising every component."""
    base = dict(n_channels=3, n_samples=64, fs=128.0, n_classes=3, f1=2, d=2, temporal_kernel=16,
                stft_window=16, band=(4.0, 40.0), tcn_blocks=1, tcn_kernel=3, dropout=0.0)
    base.update(overrides)
    return BiteConfig(**base)


def model_gradient_error(cfg: BiteConfig | None = None, batch: int = 2, seed: int = 7,
                         training: bool = False, skip: tuple[str, ...] = ()) -> float:
    """Max relative error of backward vs central differences over every parameter not in ``skip``."""
    cfg = cfg or tiny_config()
    gen = np.random.default_rng(seed)
    model = BiteModel.initialize(cfg, seed)
    # perturb the affine/fusion terms off their symmetric initial values
    for name, p in model.params.items():
        if name.endswith((".gamma", ".beta")) or name == "bitcn.alpha_raw":
            p.value = np.asarray(p.value + 0.3 * gen.standard_normal(p.shape))
    for name in model.buffers:
        if name.endswith("running_var"):
            model.buffers[name] = gen.uniform(0.5, 2.0, model.buffers[name].shape)
    x = gen.standard_normal((batch, 1, cfg.n_channels, cfg.n_samples))
    y = gen.integers(0, cfg.n_classes, batch)
    spec = model.spectrogram(x) if cfg.use_frequency else None
    bufs = {k: v.copy() for k, v in model.buffers.items()}

    def loss():
        if training:
            for k, v in bufs.items():
                model.buffers[k][...] = v
        return cross_entropy(model.forward(x, training, spec), y)

    params = [p for name, p in model.params.items() if name not in skip]
    return tn.check_gradients(loss, params).max_rel_error


def op_gradient_cases() -> dict[str, Callable[[], tuple[Callable, list]]]:
    """Small random problems, one per registered op (plus conv variants)."""
    gen = np.random.default_rng(11)

    def P(*shape):
        return tn.parameter(gen.standard_normal(shape))

    def weighted(y, w):
        return tn.sum(tn.mul(y, w))

    cases = {}

    def c_add():
        a, b = P(2, 3), P(1, 3)
        w = gen.standard_normal((2, 3))
        return (lambda: weighted(tn.add(a, b), w)), [a, b]

    def c_sub():
        a, b = P(2, 3), P(2, 3)
        w = gen.standard_normal((2, 3))
        return (lambda: weighted(tn.sub(a, b), w)), [a, b]

    def c_mul():
        a, b = P(2, 3), P(3)
        return (lambda: tn.sum(tn.mul(tn.mul(a, b), a))), [a, b]

    def c_matmul():
        a, b = P(3, 4), P(4, 2)
        w = gen.standard_normal((3, 2))
        return (lambda: weighted(tn.matmul(a, b), w)), [a, b]

    def c_sigmoid():
        a = P(5)
        w = gen.standard_normal(5)
        return (lambda: weighted(tn.sigmoid(a), w)), [a]

    def c_elu():
        a = P(12)
        w = gen.standard_normal(12)
        return (lambda: weighted(tn.elu(a), w)), [a]

    def c_flip():
        a = P(2, 5)
        w = gen.standard_normal((2, 5))
        return (lambda: weighted(tn.flip_last(a), w)), [a]

    def c_concat():
        a, b = P(2, 2, 3), P(2, 1, 3)
        w = gen.standard_normal((2, 3, 3))
        return (lambda: weighted(tn.concat_channels([a, b]), w)), [a, b]

    def c_slice():
        a = P(2, 4, 3)
        w = gen.standard_normal((2, 2, 3))
        return (lambda: weighted(tn.slice_channels(a, 1, 3), w)), [a]

    def c_take_last():
        a = P(2, 3, 4)
        w = gen.standard_normal((2, 3))
        return (lambda: weighted(tn.take_last(a), w)), [a]

    def c_mean_last():
        a = P(2, 3, 4)
        w = gen.standard_normal((2, 3))
        return (lambda: weighted(tn.mean_last(a), w)), [a]

    def c_pool():
        a = P(2, 7)
        w = gen.standard_normal((2, 3))
        return (lambda: weighted(tn.avg_pool_last(a, 2), w)), [a]

    def c_softmax():
        a = P(2, 4)
        w = gen.standard_normal((2, 4))
        return (lambda: weighted(tn.softmax_last(a), w)), [a]

    def c_ce():
        a = P(3, 4)
        return (lambda: tn.cross_entropy(a, [0, 3, 1])), [a]

    def c_reshape_mean():
        a = P(2, 6)
        w = gen.standard_normal((3, 4))
        return (lambda: tn.mean(tn.mul(tn.reshape(a, (3, 4)), w))), [a]

    def c_bn(training):
        def build():
            x, g, b = P(3, 2, 1, 4), P(2), P(2)
            rm, rv = gen.standard_normal(2), gen.uniform(0.5, 2, 2)
            w = gen.standard_normal((3, 2, 1, 4))
            return (lambda: weighted(tn.batch_norm(x, g, b, rm.copy(), rv.copy(), training), w)), [x, g, b]
        return build

    def c_conv(groups, dilation, padding, xshape, wshape):
        def build():
            x, k = P(*xshape), P(*wshape)
            out = tn.conv2d(tn.Variable(x.value), tn.Variable(k.value), groups=groups,
                            dilation=dilation, padding=padding)
            w = gen.standard_normal(out.shape)
            return (lambda: weighted(tn.conv2d(x, k, groups=groups, dilation=dilation, padding=padding), w)), [x, k]
        return build

    cases.update({
        "add": c_add, "sub": c_sub, "mul": c_mul, "matmul": c_matmul, "sigmoid": c_sigmoid,
        "elu": c_elu, "flip_last": c_flip, "concat": c_concat, "slice_channels": c_slice,
        "take_last": c_take_last, "mean_last": c_mean_last, "avg_pool": c_pool,
        "softmax": c_softmax, "cross_entropy": c_ce, "reshape_mean": c_reshape_mean,
        "batch_norm_train": c_bn(True), "batch_norm_eval": c_bn(False),
        "conv2d_same": c_conv(1, (1, 1), Padding.same_last(4), (2, 2, 2, 6), (3, 2, 1, 4)),
        "conv2d_grouped": c_conv(2, (1, 1), Padding.symmetric(1, 1), (1, 4, 3, 4), (4, 2, 2, 3)),
        "conv2d_causal_dilated": c_conv(1, (1, 2), Padding.causal_left(4), (2, 3, 1, 8), (2, 3, 1, 3)),
        "conv2d_span": c_conv(2, (1, 1), Padding(), (2, 2, 3, 5), (4, 1, 3, 1)),
    })
    return cases


def op_gradient_errors(tol: float = 1e-4) -> dict[str, float]:
    out = {}
    for name, build in op_gradient_cases().items():
        f, params = build()
        out[name] = tn.check_gradients(f, params, tol=tol).max_rel_error
    return out


def naive_stft(signal: np.ndarray, n: int, bins) -> np.ndarray:
    """Complex STFT by direct per-frame DFT sums: [C, T] -> [F0, C, T]."""
    c, t = signal.shape
    left = n // 2
    padded = np.zeros((c, t + n - 1))
    padded[:, left:left + t] = signal
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
    out = np.zeros((len(bins), c, t), dtype=complex)
    for fi, k in enumerate(bins):
        basis = w * np.exp(-2j * np.pi * k * np.arange(n) / n)
        for ti in range(t):
            out[fi, :, ti] = padded[:, ti:ti + n] @ basis
    return out


def stft_oracle_error(n_signals: int = 50, seed: int = 3) -> float:
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_signals):
        c = int(gen.integers(1, 5))
        n = int(gen.choice([8, 16, 32]))
        t = int(gen.integers(n, 4 * n + 1))
        fs = float(gen.choice([128.0, 250.0, 256.0]))
        plan = StftPlan(fs, n, (fs / n, fs / 2))
        x = gen.standard_normal((c, t))
        ref = np.abs(naive_stft(x, n, plan.bins))
        worst = max(worst, float(np.abs(stft_batch(x, plan) - ref).max()))
    return worst


def ea_identity_error(n_trials: int = 20, seed: int = 5) -> float:
    gen = np.random.default_rng(seed)
    trials = gen.standard_normal((n_trials, 6, 64)) * gen.uniform(0.5, 3.0, (1, 6, 1))
    state = ea_fit(trials)
    aligned = ea_apply(state, trials)
    cov = np.einsum("nct,ndt->cd", aligned, aligned) / n_trials
    return float(np.abs(cov - np.eye(6)).max())


def causality_leak(cfg: BiteConfig | None = None, length: int = 32, seed: int = 9) -> float:
    """Largest change of forward-branch output at t caused by perturbing input at t' > t."""
    cfg = cfg or tiny_config(n_samples=length * 8, tcn_blocks=2, tcn_kernel=6, tcn_channels=4)
    model = BiteModel.initialize(cfg, seed)
    gen = np.random.default_rng(seed)
    z = gen.standard_normal((1, cfg.tcn_in, 1, length))
    with tn.no_grad():
        base = model.tcn_direction(tn.Variable(z), "fwd", full_sequence=True).value
        worst = 0.0
        for t in range(length):
            zp = z.copy()
            zp[..., t] += 1.0
            out = model.tcn_direction(tn.Variable(zp), "fwd", full_sequence=True).value
            worst = max(worst, float(np.abs(out - base)[..., :t].max(initial=0.0)))
    return worst


def measured_receptive_field(cfg: BiteConfig | None = None, seed: int = 9) -> int:
    """Number of input steps whose perturbation moves the final forward-branch output."""
    cfg = cfg or tiny_config(n_samples=64 * 8, tcn_blocks=2, tcn_kernel=6, tcn_channels=4)
    length = cfg.pooled_length
    model = BiteModel.initialize(cfg, seed)
    gen = np.random.default_rng(seed)
    z = gen.standard_normal((1, cfg.tcn_in, 1, length))
    with tn.no_grad():
        base = model.tcn_direction(tn.Variable(z), "fwd").value
        hits = 0
        for t in range(length):
            zp = z.copy()
            zp[..., t] += 1.0
            if np.abs(model.tcn_direction(tn.Variable(zp), "fwd").value - base).max() > 0:
                hits += 1
    return hits


def kappa_closed_form_error(trials: int = 200, seed: int = 13) -> float:
    """|kappa - (acc - 1/K)/(1 - 1/K)| over random balanced confusions."""
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        k = int(gen.integers(2, 7))
        per_class = int(gen.integers(1, 30))
        correct = int(gen.integers(0, per_class + 1))
        # errors spread uniformly off the diagonal keep the column sums balanced
        cm = np.full((k, k), 0.0)
        wrong = per_class - correct
        np.fill_diagonal(cm, correct)
        cm += (1 - np.eye(k)) * wrong / (k - 1)
        acc = np.trace(cm) / cm.sum()
        worst = max(worst, abs(kappa(cm) - (acc - 1 / k) / (1 - 1 / k)))
    return worst


def run_battery() -> list[CheckResult]:
    results = []
    op_errs = op_gradient_errors()
    worst_op = max(op_errs, key=op_errs.get)
    results.append(CheckResult("op_gradients", op_errs[worst_op] < 1e-4, op_errs[worst_op]))
    err = model_gradient_error()
    results.append(CheckResult("model_gradient", err < 1e-4, err))
    err = stft_oracle_error(n_signals=10)
    results.append(CheckResult("stft_vs_dft", err < 1e-9, err))
    bins_ok = len(band_bins(250, 64, 4, 40)) == 9 and len(band_bins(256, 32, 8, 64)) == 8
    results.append(CheckResult("band_bins", bins_ok, float(len(band_bins(250, 64, 4, 40)))))
    err = ea_identity_error()
    results.append(CheckResult("ea_identity", err < 1e-6, err))
    leak = causality_leak()
    results.append(CheckResult("tcn_causality", leak == 0.0, leak))
    rf = measured_receptive_field()
    results.append(CheckResult("receptive_field", rf == 1 + 2 * 5 * 3, float(rf)))
    err = kappa_closed_form_error()
    results.append(CheckResult("kappa_closed_form", err < 1e-12, err))
    return results


def main(out=print) -> int:
    start = time.perf_counter()
    results = run_battery()
    for r in results:
        out(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        out(f"verification failed: {', '.join(failed)}")
    out(f"elapsed={time.perf_counter() - start:.2f}s")
    return 1 if failed else 0
