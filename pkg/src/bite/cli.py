"""``bite`` command line: synth, train, eval, ablate, sweep and verify.

stdout carries machine-readable output (epoch log lines, eval JSON, verify
lines); stderr carries one-line diagnostics. Exit codes are 0 on success,
1 on a failed verification, 2 on a configuration error and 3 on a data error.
"""

from __future__ import annotations

import argparse
import inspect
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as datamod
from . import rng as rngmod
from . import verify as verifymod
from .errors import BiteError, ConfigError, DataError
from .model import ABLATIONS, BiteConfig
from .signal import AlignmentState, ea_apply, stft_batch
from .training import (
    PROTOCOLS, EvalReport, TrainConfig, TrainingError, align_per_subject, confusion_matrix,
    hyper_sweep, parallel_map, train_and_eval, worker_count,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

SWITCHES = {"temporal": "use_temporal", "frequency": "use_frequency",
            "attention": "use_attention", "bitcn": "use_bitcn"}
DEFAULT_KERNELS = (3, 6, 9, 12)
DEFAULT_DROPOUTS = (0.1, 0.2, 0.3, 0.4, 0.5)
GENERATORS = {"ssvep": datamod.synth_ssvep, "mi": datamod.synth_mi}


# ---------------------------------------------------------------------------
# JSON schemas for every artifact (mirrored under docs/schemas)
# ---------------------------------------------------------------------------

_SCORE = {"type": "number", "minimum": -1.0, "maximum": 1.0}
_PROB = {"type": "number", "minimum": 0.0, "maximum": 1.0}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvalReport",
    "type": "object",
    "required": ["accuracy", "kappa", "per_subject", "confusion", "config_echo", "seed"],
    "properties": {
        "accuracy": _PROB,
        "kappa": _SCORE,
        "accuracy_mean": _PROB,
        "accuracy_std": {"type": "number", "minimum": 0.0},
        "kappa_mean": _SCORE,
        "kappa_std": {"type": "number", "minimum": 0.0},
        "per_subject": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "accuracy", "kappa"],
                "properties": {"id": {"type": "integer", "minimum": 0}, "accuracy": _PROB, "kappa": _SCORE},
                "additionalProperties": False,
            },
        },
        "confusion": {
            "type": "array", "minItems": 1,
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "config_echo": {"type": "object"},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "protocol": {"enum": list(PROTOCOLS)},
    },
    "additionalProperties": False,
}

ABLATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AblationResults",
    "type": "object",
    "required": list(ABLATIONS),
    "properties": {label: {"$ref": "#/$defs/report"} for label in ABLATIONS},
    "additionalProperties": False,
    "$defs": {"report": {k: v for k, v in REPORT_SCHEMA.items() if k not in ("$schema", "title")}},
}

SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "SweepResults",
    "type": "object",
    "required": ["kernels", "dropouts", "cells", "table", "row_average", "config_echo", "seed"],
    "properties": {
        "kernels": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
        "dropouts": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "cells": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kernel", "dropout", "accuracy", "kappa"],
                "properties": {"kernel": {"type": "integer"}, "dropout": {"type": "number"},
                               "accuracy": _PROB, "kappa": _SCORE},
                "additionalProperties": False,
            },
        },
        "table": {"type": "array", "items": {"type": "array", "items": _PROB}},
        "row_average": {"type": "array", "items": _PROB},
        "config_echo": {"type": "object"},
        "seed": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}


def _properties_of(cls, skip=()) -> dict:
    kinds = {"int": "integer", "float": "number", "bool": "boolean"}
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        base = str(f.type).split("|")[0].strip()
        if base.startswith("tuple"):
            props[f.name] = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
        else:
            t = kinds.get(base, "number")
            props[f.name] = {"type": [t, "null"]} if "None" in str(f.type) else {"type": t}
    return props


RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfigFile",
    "type": "object",
    "required": ["data"],
    "properties": {
        "model": {"type": "object", "properties": _properties_of(BiteConfig), "additionalProperties": False},
        "train": {"type": "object", "properties": _properties_of(TrainConfig), "additionalProperties": False},
        "data": {
            "oneOf": [
                {"type": "object", "required": ["path"], "properties": {"path": {"type": "string"}},
                 "additionalProperties": False},
                {"type": "object", "required": ["synth"],
                 "properties": {"synth": {"type": "object", "required": ["kind"],
                                          "properties": {"kind": {"enum": list(GENERATORS)}}}},
                 "additionalProperties": False},
            ],
        },
        "protocol": {"enum": list(PROTOCOLS)},
        "ablation": {"type": "array", "items": {"enum": list(SWITCHES)}, "uniqueItems": True},
    },
    "additionalProperties": False,
}

SCHEMAS = {"report": REPORT_SCHEMA, "ablation": ABLATION_SCHEMA, "sweep": SWEEP_SCHEMA,
           "run-config": RUN_CONFIG_SCHEMA}


def dump_json(obj) -> str:
    """Canonical serialisation: sorted keys, fixed indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _reject_unknown(section: dict, allowed, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{path}.{key}'" if path else f"unknown key '{key}'")


def _require_object(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"'{path}' must be a JSON object")
    return value


@dataclass
class RunConfig:
    """Parsed run configuration; model fields tied to the data are filled later."""

    data: dict
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: str = "within-subject"
    ablation: tuple[str, ...] = tuple(SWITCHES)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, doc, base_dir: Path = Path(".")) -> "RunConfig":
        doc = _require_object(doc, "<root>")
        _reject_unknown(doc, ("model", "train", "data", "protocol", "ablation"), "")
        if "data" not in doc:
            raise ConfigError("missing required section 'data'")
        model = dict(_require_object(doc.get("model", {}), "model"))
        _reject_unknown(model, [f.name for f in fields(BiteConfig)], "model")
        if "band" in model:
            model["band"] = _pair(model["band"], "model.band")
        train_doc = _require_object(doc.get("train", {}), "train")
        _reject_unknown(train_doc, [f.name for f in fields(TrainConfig)], "train")
        train = _build(TrainConfig, train_doc, "train")
        data = _parse_data(doc["data"])
        protocol = doc.get("protocol", "within-subject")
        if protocol not in PROTOCOLS:
            raise ConfigError(f"'protocol' must be one of {list(PROTOCOLS)}, got {protocol!r}")
        ablation = doc.get("ablation", list(SWITCHES))
        if not isinstance(ablation, list):
            raise ConfigError("'ablation' must be a list")
        for i, name in enumerate(ablation):
            if name not in SWITCHES:
                raise ConfigError(f"unknown key 'ablation[{i}]': {name!r}; expected a subset of {list(SWITCHES)}")
        return cls(data, model, train, protocol, tuple(n for n in SWITCHES if n in ablation), base_dir)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, p.parent)

    def load_trials(self) -> datamod.TrialSet:
        """Read or synthesise the trials, rounded to the stored float32 precision."""
        if "path" in self.data:
            p = Path(self.data["path"])
            if not p.is_absolute():
                p = self.base_dir / p
            return datamod.read_trials(p)
        spec = dict(self.data["synth"])
        gen = GENERATORS[spec.pop("kind")]
        for key in ("band", "mu_band"):
            if key in spec:
                spec[key] = _pair(spec[key], f"data.synth.{key}")
        return _build(gen, spec, "data.synth").as_float32()

    def model_config(self, trials: datamod.TrialSet, switches=None) -> BiteConfig:
        """Merge the model section with data-derived fields and the enabled streams."""
        values = dict(self.model)
        derived = {"n_channels": trials.n_channels, "n_samples": trials.n_samples,
                   "fs": trials.fs, "n_classes": trials.n_classes}
        for key, val in derived.items():
            if key in values and values[key] != val:
                raise ConfigError(f"model.{key} = {values[key]!r} contradicts the data ({val!r})")
            values[key] = val
        enabled = self.ablation if switches is None else switches
        for name, flag in SWITCHES.items():
            want = name in enabled
            if flag in values and values[flag] != want and switches is None:
                raise ConfigError(f"model.{flag} contradicts the ablation section")
            values[flag] = want
        return _build(BiteConfig, values, "model")

    def echo(self, model_cfg: BiteConfig, train_cfg: TrainConfig) -> dict:
        return {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": self.data,
                "protocol": self.protocol}


def _pair(value, path: str) -> tuple[float, float]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise ConfigError(f"'{path}' must be a two-element list")
    return float(value[0]), float(value[1])


def _build(factory, kwargs: dict, path: str):
    params = inspect.signature(factory).parameters
    _reject_unknown(kwargs, params, path)
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"'{path}': {exc}") from None


def _parse_data(section) -> dict:
    section = _require_object(section, "data")
    if set(section) == {"path"}:
        if not isinstance(section["path"], str):
            raise ConfigError("'data.path' must be a string")
        return dict(section)
    if set(section) == {"synth"}:
        spec = _require_object(section["synth"], "data.synth")
        kind = spec.get("kind")
        if kind not in GENERATORS:
            raise ConfigError(f"'data.synth.kind' must be one of {list(GENERATORS)}, got {kind!r}")
        allowed = set(inspect.signature(GENERATORS[kind]).parameters) | {"kind"}
        _reject_unknown(spec, allowed, "data.synth")
        return {"synth": dict(spec)}
    extra = sorted(set(section) - {"path", "synth"})
    if extra:
        raise ConfigError(f"unknown key 'data.{extra[0]}'")
    raise ConfigError("'data' needs exactly one of 'path' or 'synth'")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _stdout(line: str) -> None:
    print(line, flush=True)


def _run_config(args) -> tuple[RunConfig, TrainConfig]:
    run = RunConfig.load(args.config)
    train_cfg = run.train if args.seed is None else _build(TrainConfig, {**run.train.to_dict(), "seed": args.seed},
                                                            "train")
    return run, train_cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _report_payload(report: EvalReport, echo: dict, seed, protocol: str | None = None) -> dict:
    out = report.to_dict()
    out["config_echo"] = echo
    out["seed"] = seed
    if protocol is not None:
        out["protocol"] = protocol
    return out


def cmd_train(args) -> int:
    run, train_cfg = _run_config(args)
    out = _out_dir(args.out)
    trials = run.load_trials()
    model_cfg = run.model_config(trials)
    result = train_and_eval(model_cfg, train_cfg, trials, run.protocol, log=_stdout, workers=worker_count())
    payload = _report_payload(result.report, run.echo(model_cfg, train_cfg), train_cfg.seed, run.protocol)
    (out / "report.json").write_text(dump_json(payload))
    for fold in result.folds:
        meta = {"fold": fold.fold_id, "protocol": run.protocol, "seed": train_cfg.seed}
        if fold.alignment is None:
            meta["alignment"] = {"mode": "per-subject"}
        else:
            meta["alignment"] = {"mode": "fixed", "mean_cov": fold.alignment.mean_cov.tolist(),
                                 "whitener": fold.alignment.whitener.tolist(),
                                 "fit_count": fold.alignment.fit_count}
        datamod.save_weights(out / f"weights-{fold.fold_id}.bitw", fold.model, meta)
        datamod.write_trials(out / f"test-{fold.fold_id}.bite", fold.test)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = datamod.load_weights(args.weights)
    trials = datamod.read_trials(args.data)
    cfg = model.config
    if (cfg.n_channels, cfg.n_samples) != (trials.n_channels, trials.n_samples):
        raise ConfigError(f"weights expect [C={cfg.n_channels}, T={cfg.n_samples}], "
                          f"data has [C={trials.n_channels}, T={trials.n_samples}]")
    if cfg.n_classes != trials.n_classes or cfg.fs != trials.fs:
        raise ConfigError(f"weights expect fs={cfg.fs}, n-classes={cfg.n_classes}; "
                          f"data has fs={trials.fs}, n-classes={trials.n_classes}")
    align = meta.get("alignment", {"mode": "per-subject"})
    if align["mode"] == "fixed":
        state = AlignmentState(np.asarray(align["mean_cov"]), np.asarray(align["whitener"]), align["fit_count"])
        x = ea_apply(state, trials.signals)
    else:
        x = align_per_subject(trials)
    spec = stft_batch(x, cfg.stft_plan()) if cfg.use_frequency else None
    pred = model.predict(x[:, None], spec)
    folds = []
    for sid in np.unique(trials.subjects):
        idx = trials.subjects == sid
        folds.append((int(sid), confusion_matrix(trials.labels[idx], pred[idx], cfg.n_classes)))
    report = EvalReport.from_folds(folds)
    echo = {"model": cfg.to_dict(), "weights": str(args.weights), "data": str(args.data),
            "alignment": align["mode"]}
    sys.stdout.write(dump_json(_report_payload(report, echo, meta.get("seed"), meta.get("protocol"))))
    return EXIT_OK


def _ablation_job(job) -> dict:
    run, train_cfg, trials, label = job
    model_cfg = run.model_config(trials, switches=[n for n, f in SWITCHES.items() if ABLATIONS[label][f]])
    report = train_and_eval(model_cfg, train_cfg, trials, run.protocol).report
    return _report_payload(report, run.echo(model_cfg, train_cfg), train_cfg.seed, run.protocol)


def cmd_ablate(args) -> int:
    run, train_cfg = _run_config(args)
    out = _out_dir(args.out)
    trials = run.load_trials()
    run.model_config(trials)  # fail early on a contradictory model section
    reports = parallel_map(_ablation_job, [(run, train_cfg, trials, label) for label in ABLATIONS], worker_count())
    results = dict(zip(ABLATIONS, reports))
    for label, rep in results.items():
        _stdout(f"ablation={label} accuracy={rep['accuracy']:.4f} kappa={rep['kappa']:.4f}")
    (out / "ablation.json").write_text(dump_json(results))
    return EXIT_OK


def _number_list(text: str, kind, flag: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [kind(t) for t in items]
    except ValueError:
        raise ConfigError(f"{flag} expects a comma-separated list of {kind.__name__}s, got {text!r}") from None


def cmd_sweep(args) -> int:
    kernels = _number_list(args.kernels, int, "--kernels")
    dropouts = _number_list(args.dropouts, float, "--dropouts")
    if not kernels or not dropouts:
        raise ConfigError("hyper-parameter grid is empty")
    run, train_cfg = _run_config(args)
    out = _out_dir(args.out)
    trials = run.load_trials()
    model_cfg = run.model_config(trials)
    for k in kernels:
        model_cfg.replace(tcn_kernel=k)  # validates each kernel before any training
    for d in dropouts:
        model_cfg.replace(dropout=d)
    result = hyper_sweep(kernels, dropouts, model_cfg, train_cfg, trials, run.protocol, worker_count())
    payload = result.to_dict()
    payload["config_echo"] = run.echo(model_cfg, train_cfg)
    payload["seed"] = train_cfg.seed
    for cell in result.cells:
        _stdout(f"kernel={cell['kernel']} dropout={cell['dropout']} accuracy={cell['accuracy']:.4f}")
    (out / "sweep.json").write_text(dump_json(payload))
    return EXIT_OK


def cmd_verify(args) -> int:
    return EXIT_OK if verifymod.main(_stdout) == 0 else EXIT_VERIFY


def cmd_synth(args) -> int:
    common = dict(n_subjects=args.subjects, trials_per_class=args.trials_per_class, fs=args.fs,
                  n_samples=args.samples, n_channels=args.channels, seed=args.seed)
    if args.kind == "ssvep":
        freqs = None if args.freqs is None else _number_list(args.freqs, float, "--freqs")
        ts = datamod.synth_ssvep(class_freqs=freqs, snr=args.snr, stft_window=args.window,
                                 band=tuple(_number_list(args.band, float, "--band")), **common)
    else:
        ts = datamod.synth_mi(n_classes=args.classes, gain=args.gain, noise=args.noise, **common)
    path = Path(args.out)
    if path.parent and not path.parent.exists():
        raise ConfigError(f"output directory does not exist: {path.parent}")
    datamod.write_trials(path, ts)
    _stdout(f"wrote {len(ts)} trials ({ts.n_channels} channels x {ts.n_samples} samples, "
            f"{ts.n_classes} classes) to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _u64(text: str) -> int:
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bite", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64, default=None, help="overrides train.seed")

    p = sub.add_parser("train", help="train and evaluate under the configured protocol")
    with_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a weight archive on a trial file")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the six stream/attention/BiTCN configurations")
    with_config(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="TCN kernel x dropout grid")
    with_config(p)
    p.add_argument("--kernels", default=",".join(map(str, DEFAULT_KERNELS)))
    p.add_argument("--dropouts", default=",".join(map(str, DEFAULT_DROPOUTS)))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="fast gradient, STFT, alignment and metric self-checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write a synthetic trial file")
    p.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, default=rngmod.DEFAULT_SEED)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--trials-per-class", type=int, default=None)
    p.add_argument("--fs", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--channels", type=int, default=None)
    g = p.add_argument_group("ssvep")
    g.add_argument("--freqs", default=None, help="comma-separated class frequencies in Hz")
    g.add_argument("--snr", type=float, default=10.0)
    g.add_argument("--window", type=int, default=32, help="STFT window used for the resolvability check")
    g.add_argument("--band", default="8,64", help="task band LO,HI in Hz")
    g = p.add_argument_group("mi")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--gain", type=float, default=2.0)
    g.add_argument("--noise", type=float, default=0.5)
    p.set_defaults(func=_synth_with_defaults)
    return parser


def _synth_with_defaults(args) -> int:
    # unset generic flags fall back to the chosen generator's own defaults
    params = inspect.signature(GENERATORS[args.kind]).parameters
    for flag, name in (("subjects", "n_subjects"), ("trials_per_class", "trials_per_class"), ("fs", "fs"),
                       ("samples", "n_samples"), ("channels", "n_channels")):
        if getattr(args, flag) is None:
            setattr(args, flag, params[name].default)
    return cmd_synth(args)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bite {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrainingError) as exc:
        print(f"bite {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BiteError as exc:
        print(f"bite {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
