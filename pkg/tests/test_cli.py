"""The ``bite`` command line."""

import json
import re
import subprocess
import sys
import time
from pathlib import Path

import jsonschema
import pytest

from bite import cli
from bite import tensor as tn
from bite.data import read_trials
from bite.model import ABLATIONS

DOCS = Path(__file__).resolve().parents[1] / "docs" / "schemas"

SMALL_MODEL = {"stft_window": 32, "temporal_kernel": 32, "band": [8, 64], "f1": 2, "tcn_blocks": 1,
               "tcn_kernel": 3}
SMALL_DATA = {"synth": {"kind": "ssvep", "n_subjects": 2, "trials_per_class": 4, "class_freqs": [8, 16, 24, 32],
                        "n_channels": 4, "n_samples": 128}}


def schema(name):
    return json.loads((DOCS / f"{name}.schema.json").read_text())


def write_config(tmp_path, **sections):
    doc = {"model": SMALL_MODEL, "train": {"epochs": 2, "batch_size": 8}, "data": SMALL_DATA}
    doc.update(sections)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    jsonschema.validate(doc, schema("run-config"))
    return path


@pytest.fixture
def run(capsys):
    def invoke(*argv):
        code = cli.main([str(a) for a in argv])
        out, err = capsys.readouterr()
        return code, out, err
    return invoke


# -- schemas ----------------------------------------------------------------------------

def test_shipped_schemas_match_code():
    for name, sch in cli.SCHEMAS.items():
        assert json.loads((DOCS / f"{name}.schema.json").read_text()) == sch
        jsonschema.Draft202012Validator.check_schema(sch)


# -- train / eval -------------------------------------------------------------------------

def test_train_writes_valid_report(tmp_path, run):
    code, out, err = run("train", "--config", write_config(tmp_path), "--out", tmp_path / "o", "--seed", 2025)
    assert code == 0, err
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    jsonschema.validate(report, schema("report"))
    assert 0 <= report["accuracy"] <= 1 and report["seed"] == 2025
    assert sorted(p.name for p in (tmp_path / "o").glob("weights-*.bitw")) == ["weights-0.bitw", "weights-1.bitw"]
    lines = out.strip().splitlines()
    assert len(lines) == 4
    assert all(re.fullmatch(r"epoch=\d+ fold=\d+ loss=\S+ acc=\S+", line) for line in lines)


def test_train_is_byte_identical_per_seed(tmp_path, run):
    cfg = write_config(tmp_path)
    for name in ("a", "b", "c"):
        seed = 7 if name == "c" else 2025
        assert run("train", "--config", cfg, "--out", tmp_path / name, "--seed", seed)[0] == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    a = (tmp_path / "a" / "weights-0.bitw").read_bytes()
    assert a != (tmp_path / "c" / "weights-0.bitw").read_bytes()


@pytest.mark.parametrize("protocol", ["within-subject", "loso"])
def test_eval_reproduces_training_metrics(tmp_path, run, protocol):
    cfg = write_config(tmp_path, protocol=protocol)
    assert run("train", "--config", cfg, "--out", tmp_path / "o")[0] == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    for entry in report["per_subject"]:
        fold = entry["id"]
        code, out, err = run("eval", "--weights", tmp_path / "o" / f"weights-{fold}.bitw",
                             "--data", tmp_path / "o" / f"test-{fold}.bite")
        assert code == 0, err
        result = json.loads(out)
        jsonschema.validate(result, schema("report"))
        assert result["accuracy"] == entry["accuracy"]
        assert result["kappa"] == entry["kappa"]


def test_eval_rejects_channel_mismatch(tmp_path, run):
    assert run("train", "--config", write_config(tmp_path), "--out", tmp_path / "o")[0] == 0
    assert run("synth", "--kind", "mi", "--out", tmp_path / "mi.bite", "--channels", 5, "--subjects", 1,
               "--trials-per-class", 2)[0] == 0
    code, out, err = run("eval", "--weights", tmp_path / "o" / "weights-0.bitw", "--data", tmp_path / "mi.bite")
    assert code == 2 and "C=4" in err and "C=5" in err and out == ""


def test_missing_data_path_is_a_data_error(tmp_path, run):
    cfg = write_config(tmp_path, data={"path": "nowhere/trials.bite"})
    code, out, err = run("train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 3
    assert "nowhere/trials.bite" in err and len(err.strip().splitlines()) == 1


def test_train_from_trial_file(tmp_path, run):
    assert run("synth", "--kind", "ssvep", "--out", tmp_path / "d.bite", "--subjects", 2, "--trials-per-class", 3,
               "--freqs", "8,16,24,32", "--channels", 4, "--samples", 128)[0] == 0
    cfg = write_config(tmp_path, data={"path": "d.bite"}, train={"epochs": 1, "batch_size": 8})
    code, _, err = run("train", "--config", cfg, "--out", tmp_path / "o")
    assert code == 0, err


@pytest.mark.parametrize("doc,needle", [
    ({"model": {"f3": 1}}, "model.f3"),
    ({"train": {"lr": 1}}, "train.lr"),
    ({"extra": 1}, "'extra'"),
    ({"data": {"synth": {"kind": "ssvep", "frequencies": [8]}}}, "data.synth.frequencies"),
    ({"data": {"path": "x", "synth": {}}}, "data"),
    ({"ablation": ["temporal", "gamma"]}, "ablation[1]"),
    ({"protocol": "kfold"}, "protocol"),
    ({"model": {"n_channels": 9}}, "model.n_channels"),
    ({"model": {"use_bitcn": False}}, "use_bitcn"),
    ({"train": {"epochs": 0}}, "epochs"),
    ({"model": {"f1": "eight"}}, "f1"),
])
def test_config_errors_exit_2(tmp_path, run, doc, needle):
    base = {"model": SMALL_MODEL, "train": {"epochs": 1}, "data": SMALL_DATA}
    for key, val in doc.items():
        base[key] = {**base.get(key, {}), **val} if isinstance(val, dict) and key in ("model", "train") else val
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(base))
    code, _, err = run("train", "--config", path, "--out", tmp_path / "o")
    assert code == 2, err
    assert needle in err


def test_config_file_problems(tmp_path, run):
    assert run("train", "--config", tmp_path / "none.json", "--out", tmp_path / "o")[0] == 2
    (tmp_path / "broken.json").write_text("{")
    assert run("train", "--config", tmp_path / "broken.json", "--out", tmp_path / "o")[0] == 2
    (tmp_path / "nodata.json").write_text("{}")
    code, _, err = run("train", "--config", tmp_path / "nodata.json", "--out", tmp_path / "o")
    assert code == 2 and "data" in err


def test_ablation_section_selects_streams(tmp_path, run):
    cfg = write_config(tmp_path, ablation=["frequency", "bitcn"])
    assert run("train", "--config", cfg, "--out", tmp_path / "o")[0] == 0
    echo = json.loads((tmp_path / "o" / "report.json").read_text())["config_echo"]["model"]
    assert (echo["use_temporal"], echo["use_frequency"], echo["use_attention"], echo["use_bitcn"]) == \
        (False, True, False, True)


# -- ablate / sweep ------------------------------------------------------------------------

def test_ablate_labels_and_full_entry(tmp_path, run):
    cfg = write_config(tmp_path)
    code, out, err = run("ablate", "--config", cfg, "--out", tmp_path / "ab")
    assert code == 0, err
    result = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    jsonschema.validate(result, schema("ablation"))
    assert list(result) == sorted(ABLATIONS) and set(result) == set(ABLATIONS)
    assert run("train", "--config", cfg, "--out", tmp_path / "tr")[0] == 0
    assert result["TFBA"] == json.loads((tmp_path / "tr" / "report.json").read_text())


def test_ablate_beats_chance_on_ssvep(tmp_path, run):
    data = {"synth": {"kind": "ssvep", "n_subjects": 2, "trials_per_class": 10, "class_freqs": [8, 16, 24, 32],
                      "n_channels": 4, "n_samples": 128}}
    cfg = write_config(tmp_path, data=data, train={"epochs": 15, "batch_size": 8, "learning_rate": 0.005})
    assert run("ablate", "--config", cfg, "--out", tmp_path / "ab")[0] == 0
    result = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert result["FB"]["accuracy"] > 0.25
    assert result["TFBA"]["accuracy"] > 0.25


def test_default_sweep_grid(tmp_path, run):
    data = {"synth": {**SMALL_DATA["synth"], "n_subjects": 1}}
    cfg = write_config(tmp_path, data=data, train={"epochs": 1, "batch_size": 16})
    code, _, err = run("sweep", "--config", cfg, "--out", tmp_path / "sw")
    assert code == 0, err
    result = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    jsonschema.validate(result, schema("sweep"))
    assert result["kernels"] == [3, 6, 9, 12] and result["dropouts"] == [0.1, 0.2, 0.3, 0.4, 0.5]
    assert len(result["cells"]) == 20 and len(result["row_average"]) == 4
    for row, avg in zip(result["table"], result["row_average"]):
        assert abs(sum(row) / len(row) - avg) < 1e-12


def test_single_cell_sweep_equals_train(tmp_path, run):
    model = {**SMALL_MODEL, "tcn_kernel": 6, "dropout": 0.2}
    cfg = write_config(tmp_path, model=model)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "sw", "--kernels", "6", "--dropouts", "0.2")[0] == 0
    assert run("train", "--config", cfg, "--out", tmp_path / "tr")[0] == 0
    sweep = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    report = json.loads((tmp_path / "tr" / "report.json").read_text())
    assert sweep["table"] == [[report["accuracy"]]]
    assert sweep["cells"][0]["kappa"] == report["kappa"]


@pytest.mark.parametrize("flags", [["--kernels", ""], ["--dropouts", ","], ["--kernels", "3,x"],
                                   ["--kernels", "1"]])
def test_bad_grids_exit_2(tmp_path, run, flags):
    assert run("sweep", "--config", write_config(tmp_path), "--out", tmp_path / "sw", *flags)[0] == 2


# -- verify ----------------------------------------------------------------------------------

def test_verify_passes_quickly(run):
    start = time.perf_counter()
    code, out, _ = run("verify")
    assert time.perf_counter() - start < 60
    assert code == 0
    checks = [line for line in out.splitlines() if line.startswith("check=")]
    assert len(checks) >= 7
    for line in checks:
        assert re.fullmatch(r"check=\w+ status=(pass|fail) metric=\S+", line)
        float(line.rsplit("=", 1)[1])


def test_verify_detects_corrupted_backward_rule(run, monkeypatch):
    good = tn.BACKWARD_RULES["elu"]
    monkeypatch.setitem(tn.BACKWARD_RULES, "elu", lambda node, g: tuple(1.1 * x for x in good(node, g)))
    code, out, _ = run("verify")
    assert code == 1
    assert "check=op_gradients status=fail" in out
    assert "verification failed: " in out and "op_gradients" in out.splitlines()[-2]


# -- synth ----------------------------------------------------------------------------------

def test_synth_writes_readable_file_and_repeats_bytes(tmp_path, run):
    for name in ("a", "b"):
        assert run("synth", "--kind", "ssvep", "--out", tmp_path / f"{name}.bite", "--seed", 9,
                   "--subjects", 1, "--trials-per-class", 2)[0] == 0
    ts = read_trials(tmp_path / "a.bite")
    assert len(ts) == 24 and ts.n_classes == 12
    assert (tmp_path / "a.bite").read_bytes() == (tmp_path / "b.bite").read_bytes()
    assert run("synth", "--kind", "mi", "--out", tmp_path / "m.bite", "--seed", 9)[0] == 0
    assert read_trials(tmp_path / "m.bite").n_classes == 4


def test_synth_above_nyquist_exit_2(tmp_path, run):
    code, _, err = run("synth", "--kind", "ssvep", "--out", tmp_path / "x.bite", "--freqs", "8,200")
    assert code == 2 and "200" in err
    assert not (tmp_path / "x.bite").exists()


def test_argparse_errors_exit_2(run):
    with pytest.raises(SystemExit) as exc:
        cli.main(["synth", "--kind", "eeg", "--out", "x"])
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    out = tmp_path / "s.bite"
    proc = subprocess.run([sys.executable, "-m", "bite", "synth", "--kind", "mi", "--out", str(out),
                           "--subjects", "1", "--trials-per-class", "1"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
