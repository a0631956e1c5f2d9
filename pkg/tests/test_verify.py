"""The self-check battery and its oracles."""

import re

import numpy as np
import pytest

from bite import signal, tensor as tn, verify
from bite.verify import CheckResult, naive_stft, op_gradient_cases, run_battery


def test_check_line_format():
    assert CheckResult("x", True, 1.5e-7).line() == "check=x status=pass metric=1.500e-07"
    assert CheckResult("y", False, 2.0).line().startswith("check=y status=fail")


def test_battery_passes_and_names_are_unique():
    results = run_battery()
    names = [r.name for r in results]
    assert len(set(names)) == len(names)
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]


def test_op_cases_stay_small():
    for name, build in op_gradient_cases().items():
        _, params = build()
        assert all(p.value.size <= 64 for p in params), name


def test_naive_stft_single_frame_is_windowed_dft():
    x = np.random.default_rng(0).standard_normal((1, 8))
    w = signal.hann_window(8)
    frame = np.concatenate([np.zeros(4), x[0, :4]])
    expected = np.fft.fft(frame * w)[[1, 2, 3]]
    np.testing.assert_allclose(naive_stft(x, 8, [1, 2, 3])[:, 0, 0], expected, atol=1e-12)


@pytest.mark.parametrize("rule,check", [
    ("conv2d", "op_gradients"),
    ("batch_norm", "op_gradients"),
    ("sigmoid", "model_gradient"),
])
def test_corrupted_rule_is_reported(monkeypatch, rule, check):
    good = tn.BACKWARD_RULES[rule]
    monkeypatch.setitem(tn.BACKWARD_RULES, rule,
                        lambda node, g: tuple(None if x is None else 0.9 * x for x in good(node, g)))
    failed = {r.name for r in run_battery() if not r.passed}
    assert check in failed


def test_broken_stft_is_reported(monkeypatch):
    real = verify.stft_batch
    monkeypatch.setattr(verify, "stft_batch", lambda x, plan: real(x, plan) * (1 + 1e-6))
    lines = []
    assert verify.main(lines.append) == 1
    assert any(line.startswith("check=stft_vs_dft status=fail") for line in lines)
    assert re.fullmatch(r"elapsed=\d+\.\d\ds", lines[-1])
