import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypelora import hypernet, lora
from hypelora.encoder import ModelConfig
from hypelora.lora import ConfigurationError, TargetId


def test_apply_update_small_example():
    W = np.eye(2)
    A = np.array([[1.0], [0.0]])
    B = np.array([[0.0, 2.0]])
    np.testing.assert_array_equal(lora.apply_update(W, A, B, 3.0), [[1.0, 6.0], [0.0, 1.0]])
    np.testing.assert_array_equal(W, np.eye(2))


def test_apply_update_rejects_bad_shapes():
    with pytest.raises(ValueError, match="incompatible"):
        lora.apply_update(np.eye(3), np.ones((3, 2)), np.ones((1, 3)), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-4, 4), st.floats(-4, 4))
def test_apply_update_linear_in_alpha(seed, a1, a2):
    rng = np.random.default_rng(seed)
    W, A, B = rng.normal(size=(6, 6)), rng.normal(size=(6, 2)), rng.normal(size=(2, 6))
    lhs = lora.apply_update(W, A, B, a1 + a2) - W
    rhs = (lora.apply_update(W, A, B, a1) - W) + (lora.apply_update(W, A, B, a2) - W)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    nested = lora.apply_update(lora.apply_update(W, A, B, a1), A, B, a2)
    np.testing.assert_allclose(nested, lora.apply_update(W, A, B, a1 + a2), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(lora.apply_update(W, A, B, 0.0), W)


@pytest.mark.parametrize("d,r", [(8, 2), (16, 4), (64, 4)])
def test_update_rank_bounded(d, r):
    rng = np.random.default_rng(d)
    W, A, B = rng.normal(size=(d, d)), rng.normal(size=(d, r)), rng.normal(size=(r, d))
    s = np.linalg.svd(lora.apply_update(W, A, B, 8.0) - W, compute_uv=False)
    assert s[r] < 1e-10


def test_kaiming_bound_and_samples():
    assert lora.kaiming_bound(64) == pytest.approx(0.125)
    A = lora.kaiming_uniform_init(64, 4, 0)
    assert A.shape == (64, 4)
    assert np.abs(A).max() <= 0.125
    big = lora.kaiming_uniform_init(64, 2000, 1)
    # uniform on [-b, b]: mean 0, variance b^2 / 3
    assert abs(big.mean()) < 0.003
    assert big.var() == pytest.approx(0.125**2 / 3, rel=0.02)
    np.testing.assert_array_equal(lora.kaiming_uniform_init(64, 4, 7), lora.kaiming_uniform_init(64, 4, 7))


def test_adapter_initial_state():
    ad = lora.LoraAdapter(2, 8, 2, seed=0)
    assert len(ad.factors) == 8
    for t, m in ad.factors.items():
        assert m.requires_grad
        if t.factor == "B":
            assert not m.data.any()
            assert m.shape == (2, 8)
        else:
            assert m.shape == (8, 2)
    assert sorted(ad.named_parameters()) == sorted(f"lora.{t.key}" for t in lora.all_targets(2))


def test_target_keys_round_trip():
    for t in lora.all_targets(3):
        assert TargetId.parse(t.key) == t
    with pytest.raises(ValueError):
        TargetId.parse("0.K.A")


def test_validate_factors():
    ad = lora.LoraAdapter(2, 8, 2)
    lora.validate_factors(ad.generate(), 2, 8, 2)
    f = ad.generate()
    del f[TargetId(1, "V", "B")]
    with pytest.raises(ConfigurationError, match="1.V.B"):
        lora.validate_factors(f, 2, 8, 2)
    with pytest.raises(ConfigurationError, match="shape"):
        lora.validate_factors(ad.generate(), 2, 8, 3)


def test_param_count_default_lora():
    assert lora.lora_param_count(ModelConfig(), "per_layer_lora") == 4096


def _brute_count(mc, mode, hc):
    if mode == "per_layer_lora":
        return lora.count_elements(lora.LoraAdapter(mc.n_layers, mc.d_model, mc.lora_rank).trainable_parameters())
    h = hypernet.init(hc, mc.n_layers, mc.d_model, mc.lora_rank, 0)
    return lora.count_elements(h.trainable_parameters())


@pytest.mark.parametrize("variant,mode", list(itertools.product(["mlp", "transformer"], ["full", "fixed_a"])))
def test_param_count_matches_instantiated_tensors(variant, mode):
    mc = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, lora_rank=2, embed_dim=8)
    hc = hypernet.HyperNetConfig.for_model(mc, variant=variant, mode=mode, tr_hidden=16, tr_ff=24, mlp_hidden=20)
    name = "hypernet_full" if mode == "full" else "hypernet_fixed_a"
    assert lora.lora_param_count(mc, name, hc) == _brute_count(mc, name, hc)
    assert lora.lora_param_count(mc, "per_layer_lora") == _brute_count(mc, "per_layer_lora", None)


def test_fixed_a_counts_fewer_than_full():
    mc = ModelConfig()
    for variant in ("mlp", "transformer"):
        full = hypernet.HyperNetConfig.for_model(mc, variant=variant, mode="full")
        fixed = hypernet.HyperNetConfig.for_model(mc, variant=variant, mode="fixed_a")
        diff = lora.lora_param_count(mc, "hypernet_full", full) - lora.lora_param_count(mc, "hypernet_fixed_a", fixed)
        assert diff == 2 * mc.n_layers * mc.embed_dim


def test_param_count_head_is_uniform():
    mc = ModelConfig()
    hc = hypernet.HyperNetConfig.for_model(mc)
    head = mc.d_model * mc.n_classes + mc.n_classes
    for mode, h in (("per_layer_lora", None), ("hypernet_full", hc)):
        assert lora.lora_param_count(mc, mode, h, include_head=True) - lora.lora_param_count(mc, mode, h) == head


def test_param_count_errors():
    with pytest.raises(ConfigurationError):
        lora.lora_param_count(ModelConfig(), "hypernet_full")
    with pytest.raises(ConfigurationError):
        lora.lora_param_count(ModelConfig(), "prefix")
