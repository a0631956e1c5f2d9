"""Network components, ablation switches and parameter accounting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bite import tensor as tn
from bite.errors import ConfigError
from bite.model import (
    ABLATIONS, BiteConfig, BiteModel, buffer_shapes, fuse, parameter_count, parameter_shapes,
    reference_config,
)
from bite.training import cross_entropy
from bite.verify import causality_leak, measured_receptive_field, model_gradient_error, tiny_config


def hand_count(C, F1, D, K, F0, n_classes, L, kt, ch, use_t=True, use_f=True, use_a=True, use_b=True):
    """Independent per-layer tally of learnable scalars."""
    F2 = F1 * D
    total = 0
    if use_t:
        total += F1 * K + 2 * F1          # temporal conv + BN
        total += F2 * C + 2 * F2          # depthwise spatial conv + BN
    if use_f:
        total += F0 * C + 2 * F0          # grouped spatial conv + BN
    if use_a:
        g = F2 // D
        total += sum(g * g * (2 * i - 3) for i in range(2, D + 1))
        total += sum(F0 * (2 * i - 3) for i in range(2, D + 1))
        total += F2 * D * F0 + F2         # 1x1 attention conv with bias
    cz = (F2 if use_t else 0) + (F0 if use_f else 0)
    if use_b:
        per_dir = 0
        for j in range(L):
            cin = cz if j == 0 else ch
            per_dir += ch * cin * kt + 2 * ch + ch * ch * kt + 2 * ch
            if j == 0 and cin != ch:
                per_dir += ch * cin + ch
        total += 2 * per_dir + 1          # two directions + fusion logit
    else:
        total += cz * ch + ch
    return total + ch * n_classes + n_classes


def small_model(seed=0, **kw):
    cfg = tiny_config(**kw)
    return BiteModel.initialize(cfg, seed), cfg


# -- configuration ------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigError, match="stft"):
        BiteConfig(temporal_kernel=32, stft_window=64)
    with pytest.raises(ConfigError):
        BiteConfig(use_temporal=False, use_frequency=False, use_attention=False)
    with pytest.raises(ConfigError):
        BiteConfig(use_frequency=False, use_attention=True)
    with pytest.raises(ConfigError):
        BiteConfig(d=0)


def test_derived_sizes_reference():
    cfg = reference_config("bciciv2a")
    assert (cfg.f2, cfg.f0, cfg.pooled_length, cfg.tcn_in) == (16, 9, 125, 25)
    assert cfg.receptive_field == 31
    assert reference_config("ssvep").f0 == 8


def test_config_dict_round_trip_and_unknown_fields():
    cfg = reference_config("ssvep")
    assert BiteConfig.from_dict({**cfg.to_dict(), "band": tuple(cfg.band)}) == cfg
    with pytest.raises(ConfigError):
        BiteConfig.from_dict({"f3": 1})


@pytest.mark.parametrize("label", list(ABLATIONS))
def test_ablation_labels_map_to_switches(label):
    cfg = reference_config().with_ablation(label)
    assert cfg.use_temporal == ("T" in label)
    assert cfg.use_frequency == ("F" in label)
    assert cfg.use_attention == label.endswith("A")
    assert cfg.use_bitcn == ("B" in label)


# -- streams ----------------------------------------------------------------------

def test_temporal_stream_shape_reference():
    cfg = reference_config()
    model = BiteModel.initialize(cfg)
    x = np.random.default_rng(0).standard_normal((2, 1, 22, 1000))
    with tn.no_grad():
        assert model.temporal_stream(x).shape == (2, 16, 1, 125)


def test_frequency_stream_shape_reference():
    cfg = reference_config()
    model = BiteModel.initialize(cfg)
    spec = np.abs(np.random.default_rng(1).standard_normal((1, 9, 22, 1000)))
    with tn.no_grad():
        assert model.frequency_stream(spec).shape == (1, 9, 1, 125)


def test_zero_input_gives_zero_stream_outputs():
    model, cfg = small_model()
    with tn.no_grad():
        assert not model.temporal_stream(np.zeros((2, 1, 3, 64))).value.any()
        assert not model.frequency_stream(np.zeros((2, cfg.f0, 3, 64))).value.any()


def test_eval_mode_is_batch_independent_and_deterministic():
    model, cfg = small_model()
    x = np.random.default_rng(2).standard_normal((1, 1, 3, 64))
    with tn.no_grad():
        one = model.forward(x).value
        two = model.forward(np.concatenate([x, x])).value
        again = model.forward(x).value
    # different batch sizes may take different BLAS blockings, hence ulp-level slack
    np.testing.assert_allclose(two, np.concatenate([one, one]), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(again, one)


def test_frequency_groups_are_independent():
    model, cfg = small_model()
    w = np.zeros((cfg.f0, 1, cfg.n_channels, 1))
    w[:, 0, 0, 0] = 1.0
    model.params["frequency.conv_space.weight"].value = w
    spec = np.abs(np.random.default_rng(3).standard_normal((2, cfg.f0, cfg.n_channels, 64)))
    out = tn.conv2d(spec, w, groups=cfg.f0).value
    np.testing.assert_array_equal(out[:, :, 0, :], spec[:, :, 0, :])


def test_stream_shape_errors():
    model, cfg = small_model()
    with pytest.raises(ConfigError):
        model.temporal_stream(np.zeros((1, 1, 4, 64)))
    with pytest.raises(ConfigError):
        model.frequency_stream(np.zeros((1, cfg.f0 + 1, 3, 64)))
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 1, 3, 63)))


# -- PTFA -------------------------------------------------------------------------

def test_zero_attention_halves_multiscale():
    model, cfg = small_model()
    model.params["ptfa.attention.weight"].value[...] = 0
    model.params["ptfa.attention.bias"].value[...] = 0
    gen = np.random.default_rng(4)
    ft = gen.standard_normal((2, cfg.f2, 1, 8))
    ff = gen.standard_normal((2, cfg.f0, 1, 8))
    with tn.no_grad():
        y = model.ptfa(ft, ff).value
        ms = model.multiscale_time(tn.Variable(ft)).value
    np.testing.assert_allclose(y, 0.5 * ms)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), f1=st.integers(1, 4), d=st.integers(1, 4), t=st.integers(1, 12))
def test_ptfa_contracts_and_keeps_shape(seed, f1, d, t):
    cfg = tiny_config(f1=f1, d=d, n_samples=64)
    model = BiteModel.initialize(cfg, seed % 1000)
    gen = np.random.default_rng(seed)
    ft = gen.standard_normal((2, cfg.f2, 1, t))
    ff = gen.standard_normal((2, cfg.f0, 1, t))
    with tn.no_grad():
        y = model.ptfa(ft, ff).value
        ms = model.multiscale_time(tn.Variable(ft)).value
        a = model.attention_map(tn.Variable(ff)).value
    assert y.shape == ft.shape
    assert np.all((a > 0) & (a < 1))
    nz = ms != 0
    assert np.all(np.abs(y[nz]) < np.abs(ms[nz]))


def test_pyramid_kernel_shapes_for_d2():
    shapes = parameter_shapes(reference_config())
    assert shapes["ptfa.time_branch2.weight"] == (8, 8, 1, 1)
    assert shapes["ptfa.freq_branch2.weight"] == (9, 1, 1, 1)
    assert shapes["ptfa.attention.weight"] == (16, 18, 1, 1)
    shapes = parameter_shapes(reference_config().replace(d=3, f1=4))
    assert shapes["ptfa.time_branch3.weight"] == (4, 4, 1, 3)


# -- BiTCN and fusion --------------------------------------------------------------

def test_receptive_field_matches_dilation_sum():
    cfg = tiny_config(n_samples=64 * 8, tcn_blocks=2, tcn_kernel=6, tcn_channels=4)
    assert measured_receptive_field(cfg) == 1 + 2 * (6 - 1) * (2 ** 2 - 1) == cfg.receptive_field


@pytest.mark.parametrize("k,blocks", [(3, 1), (3, 3), (5, 2)])
def test_receptive_field_other_depths(k, blocks):
    cfg = tiny_config(n_samples=64 * 8, tcn_blocks=blocks, tcn_kernel=k, tcn_channels=4)
    assert measured_receptive_field(cfg) == 1 + 2 * (k - 1) * (2 ** blocks - 1)


def test_forward_branch_is_causal_on_length_32():
    assert causality_leak(length=32) == 0.0


def test_palindrome_with_copied_weights_gives_equal_directions():
    model, cfg = small_model(tcn_blocks=2, tcn_kernel=3)
    for name in list(model.params):
        if name.startswith("bitcn.bwd."):
            model.params[name].value = model.params[name.replace(".bwd.", ".fwd.")].value.copy()
    for name in list(model.buffers):
        if name.startswith("bitcn.bwd."):
            model.buffers[name] = model.buffers[name.replace(".bwd.", ".fwd.")].copy()
    half = np.random.default_rng(5).standard_normal((2, cfg.tcn_in, 1, 4))
    z = np.concatenate([half, half[..., ::-1]], axis=-1)
    with tn.no_grad():
        h_f, h_b = model.bitcn(z)
    np.testing.assert_allclose(h_b.value, h_f.value, atol=1e-10)


def test_bitcn_channel_check():
    model, cfg = small_model()
    with pytest.raises(ConfigError):
        model.bitcn(np.zeros((1, cfg.tcn_in + 1, 8)))


def test_fuse_examples():
    gen = np.random.default_rng(6)
    hf, hb = gen.standard_normal((2, 3, 5))
    np.testing.assert_allclose(fuse(hf, hb, 0.0).value, (hf + hb) / 2)
    for a in (-3.0, 0.0, 7.0):
        np.testing.assert_allclose(fuse(hf, hf, a).value, hf)
    np.testing.assert_allclose(fuse(hf, hb, 20.0).value, hf, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-30, 30))
def test_fusion_is_convex(seed, a):
    hf, hb = np.random.default_rng(seed).standard_normal((2, 4, 6))
    h = fuse(hf, hb, a).value
    assert np.all(h >= np.minimum(hf, hb) - 1e-12)
    assert np.all(h <= np.maximum(hf, hb) + 1e-12)


# -- full pass ----------------------------------------------------------------------

@pytest.mark.parametrize("label", list(ABLATIONS))
def test_logits_shape_and_softmax(label):
    model, cfg = small_model(**ABLATIONS[label])
    x = np.random.default_rng(7).standard_normal((3, 1, 3, 64))
    with tn.no_grad():
        logits = model.forward(x)
    assert logits.shape == (3, cfg.n_classes)
    np.testing.assert_allclose(tn.softmax_last(logits).value.sum(axis=1), 1, atol=1e-10)


def test_tiny_config_gradient_check():
    assert model_gradient_error() < 1e-4


def test_train_mode_gradient_check():
    # the next batch norm cancels bn_time's per-channel scale and shift, leaving gradients near zero
    err = model_gradient_error(training=True, skip=("temporal.bn_time.gamma", "temporal.bn_time.beta"))
    assert err < 1e-4


@pytest.mark.parametrize("label", ["TB", "FB", "TF", "TFA", "TFB"])
def test_ablated_gradient_checks(label):
    assert model_gradient_error(tiny_config(**ABLATIONS[label])) < 1e-4


def test_gradient_reaches_every_parameter():
    for seed in (0, 1):
        model, cfg = small_model(seed, tcn_blocks=2)
        for name, p in model.params.items():
            if name.endswith(".beta") or name == "bitcn.alpha_raw":
                p.value = np.asarray(p.value + 0.1)
        x = np.random.default_rng(seed).standard_normal((4, 1, 3, 64))
        with tn.Graph():
            loss = cross_entropy(model.forward(x), [0, 1, 2, 0])
            model.zero_grad()
            tn.backward(loss)
        dead = [n for n, p in model.params.items() if not np.abs(p.grad).max() > 0]
        if not dead:
            return
    pytest.fail(f"no gradient reached {dead}")


def test_training_forward_updates_running_stats_only_in_train_mode():
    model, cfg = small_model()
    x = np.random.default_rng(8).standard_normal((4, 1, 3, 64))
    before = {k: v.copy() for k, v in model.buffers.items()}
    with tn.no_grad():
        model.forward(x)
    assert all(np.array_equal(before[k], model.buffers[k]) for k in before)
    with tn.no_grad():
        model.forward(x, training=True, rng=np.random.default_rng(0))
    assert any(not np.array_equal(before[k], model.buffers[k]) for k in before)


def test_initialisation_is_seeded():
    a = BiteModel.initialize(tiny_config(), 1)
    b = BiteModel.initialize(tiny_config(), 1)
    c = BiteModel.initialize(tiny_config(), 2)
    assert all(np.array_equal(a.params[k].value, b.params[k].value) for k in a.params)
    assert any(not np.array_equal(a.params[k].value, c.params[k].value) for k in a.params)
    assert a.params["bitcn.alpha_raw"].value == 0
    bound = math.sqrt(1 / (1 * 1 * 16))
    assert np.abs(a.params["temporal.conv_time.weight"].value).max() <= bound


# -- parameter accounting -------------------------------------------------------------

def test_reference_count_in_budget_and_matches_hand_count():
    cfg = reference_config("bciciv2a")
    n = parameter_count(cfg)
    assert 10_000 <= n <= 20_000
    assert n == hand_count(22, 8, 2, 64, 9, 4, 2, 6, 16) == 16678


@pytest.mark.parametrize("label", list(ABLATIONS))
@pytest.mark.parametrize("kind", ["bciciv2a", "bciciv2b", "hgd", "ssvep"])
def test_count_matches_hand_count_everywhere(label, kind):
    cfg = reference_config(kind).with_ablation(label)
    expected = hand_count(cfg.n_channels, cfg.f1, cfg.d, cfg.temporal_kernel, cfg.f0, cfg.n_classes,
                          cfg.tcn_blocks, cfg.tcn_kernel, cfg.tcn_width, cfg.use_temporal,
                          cfg.use_frequency, cfg.use_attention, cfg.use_bitcn)
    assert parameter_count(cfg) == expected


def test_count_components():
    cfg = reference_config()
    shapes = parameter_shapes(cfg)
    assert math.prod(shapes["bitcn.alpha_raw"]) == 1
    cls = math.prod(shapes["classifier.weight"]) + math.prod(shapes["classifier.bias"])
    assert cls == cfg.tcn_width * cfg.n_classes + cfg.n_classes


def test_switch_changes_count_by_component_size():
    full = reference_config()
    shapes = parameter_shapes(full)
    ptfa = sum(math.prod(s) for n, s in shapes.items() if n.startswith("ptfa."))
    assert parameter_count(full) - parameter_count(full.replace(use_attention=False)) == ptfa
    no_b = parameter_shapes(full.replace(use_bitcn=False))
    bitcn = sum(math.prod(s) for n, s in shapes.items() if n.startswith("bitcn."))
    head = sum(math.prod(s) for n, s in no_b.items() if n.startswith("head."))
    assert parameter_count(full) - parameter_count(full.replace(use_bitcn=False)) == bitcn - head


def test_count_is_independent_of_data():
    cfg = reference_config()
    model = BiteModel.initialize(cfg)
    assert sum(p.size for p in model.parameters()) == parameter_count(cfg)
    assert set(model.buffers) == set(buffer_shapes(cfg))
