"""The BITE network expressed over :mod:`bite.tensor`.

Layout of one forward pass::

    x [B,1,C,T] --temporal stream--> F_time [B,F2,1,T']
    |                                   |
    +--STFT--> [B,F0,C,T] --frequency stream--> F_freq [B,F0,1,T']
                                        |
                PTFA(F_time, F_freq) -> Y [B,F2,1,T']
                concat(Y, F_freq) -> Z [B,F2+F0,1,T']
                BiTCN(Z) -> (h_f, h_b); H = a*h_f + (1-a)*h_b
                logits = H @ W + b
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as tn
from .errors import ConfigError
from .signal import StftPlan, band_bins, stft_batch
from .tensor import Padding, Variable

ABLATIONS: dict[str, dict[str, bool]] = {
    "TB": dict(use_temporal=True, use_frequency=False, use_attention=False, use_bitcn=True),
    "FB": dict(use_temporal=False, use_frequency=True, use_attention=False, use_bitcn=True),
    "TF": dict(use_temporal=True, use_frequency=True, use_attention=False, use_bitcn=False),
    "TFA": dict(use_temporal=True, use_frequency=True, use_attention=True, use_bitcn=False),
    "TFB": dict(use_temporal=True, use_frequency=True, use_attention=False, use_bitcn=True),
    "TFBA": dict(use_temporal=True, use_frequency=True, use_attention=True, use_bitcn=True),
}


@dataclass(frozen=True)
class BiteConfig:
    n_channels: int = 22
    n_samples: int = 1000
    fs: float = 250.0
    n_classes: int = 4
    f1: int = 8
    d: int = 2
    temporal_kernel: int = 64
    pool: int = 8
    stft_window: int = 64
    band: tuple[float, float] = (4.0, 40.0)
    tcn_blocks: int = 2
    tcn_kernel: int = 6
    tcn_channels: int | None = None  # None -> F2
    dropout: float = 0.3
    use_temporal: bool = True
    use_frequency: bool = True
    use_attention: bool = True
    use_bitcn: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "band", tuple(float(b) for b in self.band))
        self.validate()

    def validate(self) -> None:
        ints = dict(n_channels=self.n_channels, n_samples=self.n_samples, n_classes=self.n_classes,
                    f1=self.f1, d=self.d, temporal_kernel=self.temporal_kernel, pool=self.pool,
                    stft_window=self.stft_window, tcn_blocks=self.tcn_blocks,
                    tcn_kernel=self.tcn_kernel)
        for name, v in ints.items():
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.tcn_kernel < 2:
            raise ConfigError(f"tcn_kernel must be >= 2 to see past samples, got {self.tcn_kernel}")
        if self.temporal_kernel != self.stft_window:
            raise ConfigError(
                f"temporal_kernel ({self.temporal_kernel}) must equal stft_window ({self.stft_window})")
        if self.tcn_channels is not None and self.tcn_channels < 1:
            raise ConfigError(f"tcn_channels must be positive, got {self.tcn_channels}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not (self.use_temporal or self.use_frequency):
            raise ConfigError("at least one of use_temporal / use_frequency must be enabled")
        if self.use_attention and not (self.use_temporal and self.use_frequency):
            raise ConfigError("use_attention requires both the temporal and the frequency stream")
        if self.n_samples // self.pool < 1:
            raise ConfigError(f"pool {self.pool} leaves no samples of n_samples={self.n_samples}")
        if self.use_frequency and self.n_samples < self.stft_window:
            raise ConfigError(f"n_samples {self.n_samples} shorter than stft_window {self.stft_window}")
        band_bins(self.fs, self.stft_window, *self.band)

    # derived sizes
    @property
    def f2(self) -> int:
        return self.f1 * self.d

    @property
    def f0(self) -> int:
        return len(band_bins(self.fs, self.stft_window, *self.band))

    @property
    def pooled_length(self) -> int:
        return self.n_samples // self.pool

    @property
    def tcn_in(self) -> int:
        return (self.f2 if self.use_temporal else 0) + (self.f0 if self.use_frequency else 0)

    @property
    def tcn_width(self) -> int:
        return self.f2 if self.tcn_channels is None else self.tcn_channels

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.tcn_kernel - 1) * (2 ** self.tcn_blocks - 1)

    def stft_plan(self) -> StftPlan:
        return StftPlan(self.fs, self.stft_window, self.band)

    def with_ablation(self, label: str) -> "BiteConfig":
        if label not in ABLATIONS:
            raise ConfigError(f"unknown ablation label {label!r}; expected one of {list(ABLATIONS)}")
        return dataclasses.replace(self, **ABLATIONS[label])

    def replace(self, **changes) -> "BiteConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["band"] = list(self.band)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BiteConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown BiteConfig field(s): {unknown}")
        return cls(**data)


def reference_config(kind: str = "bciciv2a") -> BiteConfig:
    """Stock configurations for the benchmark shapes."""
    if kind == "bciciv2a":
        return BiteConfig(n_channels=22, n_samples=1000, fs=250.0, n_classes=4)
    if kind == "bciciv2b":
        return BiteConfig(n_channels=3, n_samples=1000, fs=250.0, n_classes=2)
    if kind == "hgd":
        return BiteConfig(n_channels=44, n_samples=1000, fs=250.0, n_classes=4)
    if kind == "ssvep":
        return BiteConfig(n_channels=8, n_samples=256, fs=256.0, n_classes=12, temporal_kernel=32,
                          stft_window=32, band=(8.0, 64.0))
    raise ConfigError(f"unknown reference config {kind!r}")


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _bn(shapes: dict, prefix: str, n: int) -> None:
    shapes[f"{prefix}.gamma"] = (n,)
    shapes[f"{prefix}.beta"] = (n,)


def parameter_shapes(cfg: BiteConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor for ``cfg``."""
    s: dict[str, tuple[int, ...]] = {}
    f1, f2, f0, c, dd = cfg.f1, cfg.f2, cfg.f0, cfg.n_channels, cfg.d
    if cfg.use_temporal:
        s["temporal.conv_time.weight"] = (f1, 1, 1, cfg.temporal_kernel)
        _bn(s, "temporal.bn_time", f1)
        s["temporal.conv_space.weight"] = (f2, 1, c, 1)
        _bn(s, "temporal.bn_space", f2)
    if cfg.use_frequency:
        s["frequency.conv_space.weight"] = (f0, 1, c, 1)
        _bn(s, "frequency.bn", f0)
    if cfg.use_attention:
        g = f2 // dd
        for i in range(2, dd + 1):
            s[f"ptfa.time_branch{i}.weight"] = (g, g, 1, 2 * i - 3)
        for i in range(2, dd + 1):
            s[f"ptfa.freq_branch{i}.weight"] = (f0, 1, 1, 2 * i - 3)
        s["ptfa.attention.weight"] = (f2, dd * f0, 1, 1)
        s["ptfa.attention.bias"] = (f2,)
    cz, ch = cfg.tcn_in, cfg.tcn_width
    if cfg.use_bitcn:
        for direction in ("fwd", "bwd"):
            for j in range(cfg.tcn_blocks):
                p = f"bitcn.{direction}.block{j}"
                cin = cz if j == 0 else ch
                s[f"{p}.conv1.weight"] = (ch, cin, 1, cfg.tcn_kernel)
                _bn(s, f"{p}.bn1", ch)
                s[f"{p}.conv2.weight"] = (ch, ch, 1, cfg.tcn_kernel)
                _bn(s, f"{p}.bn2", ch)
                if j == 0 and cin != ch:
                    s[f"{p}.proj.weight"] = (ch, cin, 1, 1)
                    s[f"{p}.proj.bias"] = (ch,)
        s["bitcn.alpha_raw"] = ()
    else:
        s["head.linear.weight"] = (cz, ch)
        s["head.linear.bias"] = (ch,)
    s["classifier.weight"] = (ch, cfg.n_classes)
    s["classifier.bias"] = (cfg.n_classes,)
    return s


def buffer_shapes(cfg: BiteConfig) -> dict[str, tuple[int, ...]]:
    """Batch-norm running statistics."""
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gamma"):
            stem = name[: -len(".gamma")]
            out[f"{stem}.running_mean"] = shape
            out[f"{stem}.running_var"] = shape
    return out


def parameter_count(cfg: BiteConfig) -> int:
    """Total learnable scalars, batch-norm affine terms and the fusion logit included."""
    return sum(math.prod(shape) for shape in parameter_shapes(cfg).values())


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    if len(shape) == 2:
        return shape[0]
    return 1


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class BiteModel:
    config: BiteConfig
    params: dict[str, Variable] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: BiteConfig, seed: int = rngmod.DEFAULT_SEED, *stream_key: int) -> "BiteModel":
        """Uniform(+-sqrt(1/fan_in)) weights, BN gamma=1/beta=0, alpha_raw=0."""
        gen = rngmod.stream(seed, "init", *stream_key)
        shapes = parameter_shapes(config)
        params = {}
        for name, shape in shapes.items():
            if name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.endswith(".beta") or name == "bitcn.alpha_raw":
                value = np.zeros(shape)
            elif name.endswith(".bias"):
                wshape = shapes[name[: -len(".bias")] + ".weight"]
                bound = math.sqrt(1.0 / _fan_in(name, wshape))
                value = gen.uniform(-bound, bound, size=shape)
            else:
                bound = math.sqrt(1.0 / _fan_in(name, shape))
                value = gen.uniform(-bound, bound, size=shape)
            params[name] = tn.parameter(value, name=name)
        buffers = {name: (np.zeros(shape) if name.endswith("mean") else np.ones(shape))
                   for name, shape in buffer_shapes(config).items()}
        return cls(config, params, buffers)

    def parameters(self) -> list[Variable]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        tn.zero_grad(self.params.values())

    def _p(self, name: str) -> Variable:
        return self.params[name]

    def _batch_norm(self, x: Variable, prefix: str, training: bool) -> Variable:
        return tn.batch_norm(x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta"),
                             self.buffers[f"{prefix}.running_mean"],
                             self.buffers[f"{prefix}.running_var"], training)

    def _dropout(self, x: Variable, training: bool, rng) -> Variable:
        return tn.dropout(x, self.config.dropout, training, rng)

    # -- streams ------------------------------------------------------------

    def temporal_stream(self, x, training: bool = False, rng=None) -> Variable:
        """[B,1,C,T] -> [B,F2,1,T']."""
        cfg = self.config
        x = tn.as_variable(x)
        if x.value.ndim != 4 or x.shape[1:] != (1, cfg.n_channels, cfg.n_samples):
            raise ConfigError(f"temporal stream expects [B,1,{cfg.n_channels},{cfg.n_samples}], got {x.shape}")
        h = tn.conv2d(x, self._p("temporal.conv_time.weight"),
                      padding=Padding.same_last(cfg.temporal_kernel))
        h = self._batch_norm(h, "temporal.bn_time", training)
        h = tn.conv2d(h, self._p("temporal.conv_space.weight"), groups=cfg.f1)
        h = self._batch_norm(h, "temporal.bn_space", training)
        h = tn.elu(h)
        h = tn.avg_pool_last(h, cfg.pool)
        return self._dropout(h, training, rng)

    def frequency_stream(self, spec, training: bool = False, rng=None) -> Variable:
        """[B,F0,C,T] magnitudes -> [B,F0,1,T']."""
        cfg = self.config
        spec = tn.as_variable(spec)
        if spec.value.ndim != 4 or spec.shape[1:] != (cfg.f0, cfg.n_channels, cfg.n_samples):
            raise ConfigError(
                f"frequency stream expects [B,{cfg.f0},{cfg.n_channels},{cfg.n_samples}], got {spec.shape}")
        h = tn.conv2d(spec, self._p("frequency.conv_space.weight"), groups=cfg.f0)
        h = self._batch_norm(h, "frequency.bn", training)
        h = tn.elu(h)
        h = tn.avg_pool_last(h, cfg.pool)
        return self._dropout(h, training, rng)

    # -- pyramid attention --------------------------------------------------

    def multiscale_time(self, f_time: Variable) -> Variable:
        cfg = self.config
        g = cfg.f2 // cfg.d
        groups = [tn.slice_channels(f_time, 0, g)]
        for i in range(2, cfg.d + 1):
            part = tn.slice_channels(f_time, (i - 1) * g, i * g)
            groups.append(tn.conv2d(part, self._p(f"ptfa.time_branch{i}.weight"),
                                    padding=Padding.symmetric(0, i - 2)))
        return tn.concat_channels(groups) if len(groups) > 1 else groups[0]

    def multiscale_freq(self, f_freq: Variable) -> Variable:
        cfg = self.config
        branches = [f_freq]
        for i in range(2, cfg.d + 1):
            branches.append(tn.conv2d(f_freq, self._p(f"ptfa.freq_branch{i}.weight"), groups=cfg.f0,
                                      padding=Padding.symmetric(0, i - 2)))
        return tn.concat_channels(branches) if len(branches) > 1 else branches[0]

    def attention_map(self, f_freq: Variable) -> Variable:
        fmap = self.multiscale_freq(f_freq)
        return tn.sigmoid(tn.conv2d(fmap, self._p("ptfa.attention.weight"),
                                    bias=self._p("ptfa.attention.bias")))

    def ptfa(self, f_time, f_freq) -> Variable:
        """Gate multi-scale temporal features by a frequency-derived sigmoid map."""
        cfg = self.config
        f_time, f_freq = tn.as_variable(f_time), tn.as_variable(f_freq)
        if cfg.f2 % cfg.d:
            raise ConfigError(f"F2={cfg.f2} not divisible by D={cfg.d}")
        if f_time.shape[1] != cfg.f2 or f_freq.shape[1] != cfg.f0 or f_time.shape[-1] != f_freq.shape[-1]:
            raise ConfigError(f"ptfa shape mismatch: time {f_time.shape}, freq {f_freq.shape}")
        return tn.mul(self.multiscale_time(f_time), self.attention_map(f_freq))

    # -- BiTCN --------------------------------------------------------------

    def tcn_direction(self, z: Variable, direction: str, training: bool = False, rng=None,
                      full_sequence: bool = False) -> Variable:
        """Residual stack of dilated causal convs over [B,Cz,1,T']."""
        cfg = self.config
        k = cfg.tcn_kernel
        h = z
        for j in range(cfg.tcn_blocks):
            p = f"bitcn.{direction}.block{j}"
            dil = 2 ** j
            pad = Padding.causal_left((k - 1) * dil)
            y = tn.conv2d(h, self._p(f"{p}.conv1.weight"), dilation=(1, dil), padding=pad)
            y = self._dropout(tn.elu(self._batch_norm(y, f"{p}.bn1", training)), training, rng)
            y = tn.conv2d(y, self._p(f"{p}.conv2.weight"), dilation=(1, dil), padding=pad)
            y = self._dropout(tn.elu(self._batch_norm(y, f"{p}.bn2", training)), training, rng)
            if f"{p}.proj.weight" in self.params:
                res = tn.conv2d(h, self._p(f"{p}.proj.weight"), bias=self._p(f"{p}.proj.bias"))
            else:
                res = h
            h = tn.elu(tn.add(y, res))
        if full_sequence:
            return tn.reshape(h, (h.shape[0], h.shape[1], h.shape[3]))
        return tn.take_last(tn.reshape(h, (h.shape[0], h.shape[1], h.shape[3])))

    def bitcn(self, z, training: bool = False, rng=None) -> tuple[Variable, Variable]:
        """[B,Cz,T'] -> (h_f, h_b), each [B, tcn-channels]."""
        cfg = self.config
        z = tn.as_variable(z)
        if z.value.ndim == 3:
            z = tn.reshape(z, (z.shape[0], z.shape[1], 1, z.shape[2]))
        if z.shape[1] != cfg.tcn_in:
            raise ConfigError(f"bitcn expects {cfg.tcn_in} input channels, got {z.shape[1]}")
        if z.shape[-1] < 1:
            raise ConfigError("bitcn needs at least one time step")
        h_f = self.tcn_direction(z, "fwd", training, rng)
        h_b = self.tcn_direction(tn.flip_last(z), "bwd", training, rng)
        return h_f, h_b

    def fuse(self, h_f, h_b) -> Variable:
        return fuse(h_f, h_b, self._p("bitcn.alpha_raw"))

    # -- full pass ----------------------------------------------------------

    def spectrogram(self, x: np.ndarray) -> np.ndarray:
        """[B,1,C,T] or [B,C,T] -> [B,F0,C,T]."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, 0]
        return stft_batch(x, self.config.stft_plan())

    def features(self, x, training: bool = False, spectrogram: np.ndarray | None = None,
                 rng=None) -> Variable:
        """Channel-concatenated stream output fed to the BiTCN: [B,Cz,1,T']."""
        cfg = self.config
        x = np.asarray(x.value if isinstance(x, Variable) else x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, cfg.n_channels, cfg.n_samples):
            raise ConfigError(f"model expects input [B,1,{cfg.n_channels},{cfg.n_samples}], got {x.shape}")
        parts = []
        f_time = self.temporal_stream(x, training, rng) if cfg.use_temporal else None
        f_freq = None
        if cfg.use_frequency:
            if spectrogram is None:
                spectrogram = self.spectrogram(x)
            f_freq = self.frequency_stream(spectrogram, training, rng)
        if f_time is not None:
            parts.append(self.ptfa(f_time, f_freq) if cfg.use_attention else f_time)
        if f_freq is not None:
            parts.append(f_freq)
        return tn.concat_channels(parts) if len(parts) > 1 else parts[0]

    def forward(self, x, training: bool = False, spectrogram: np.ndarray | None = None,
                rng=None) -> Variable:
        """Logits [B, n_classes]. ``spectrogram`` may be precomputed to skip the STFT."""
        cfg = self.config
        z = self.features(x, training, spectrogram, rng)
        if cfg.use_bitcn:
            h_f, h_b = self.bitcn(z, training, rng)
            h = self.fuse(h_f, h_b)
        else:
            pooled = tn.mean_last(tn.reshape(z, (z.shape[0], z.shape[1], z.shape[3])))
            h = tn.add(tn.matmul(pooled, self._p("head.linear.weight")), self._p("head.linear.bias"))
        return tn.add(tn.matmul(h, self._p("classifier.weight")), self._p("classifier.bias"))

    __call__ = forward

    def predict(self, x, spectrogram: np.ndarray | None = None, batch_size: int = 256) -> np.ndarray:
        """Eval-mode arg-max labels."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        with tn.no_grad():
            for i in range(0, len(x), batch_size):
                spec = None if spectrogram is None else spectrogram[i:i + batch_size]
                out.append(self.forward(x[i:i + batch_size], False, spec).value.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def fuse(h_f, h_b, alpha_raw) -> Variable:
    """``sigmoid(alpha_raw) * h_f + (1 - sigmoid(alpha_raw)) * h_b``."""
    a = tn.sigmoid(alpha_raw)
    return tn.add(tn.mul(a, h_f), tn.mul(tn.sub(1.0, a), h_b))
