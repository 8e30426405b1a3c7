import numpy as np
import pytest

from drupi import models as M
from drupi.tape import ShapeError


SPEC = M.ModelSpec(family="convnet", depth=2, width=32, input_shape=(1, 16, 16), classes=3)


def test_init_is_deterministic_per_seed():
    a = M.init_model(SPEC, seed=11)
    b = M.init_model(SPEC, seed=11)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = M.init_model(SPEC, seed=12)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_classifier_shape_from_two_poolings():
    state = M.init_model(SPEC, seed=0)
    assert state.params["head_w"].shape == (32 * 4 * 4, 3)
    # verified by an actual forward pass
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    feats, logits = M.forward_split(state, x, tap=2)
    assert feats.shape == (2, 32, 4, 4)
    assert logits.shape == (2, 3)


def test_biases_zero_at_init():
    state = M.init_model(SPEC, seed=3)
    for k, v in state.params.items():
        if k.endswith("_b"):
            assert np.count_nonzero(v) == 0


def test_depth3_width128_shapes_remain_constructible():
    spec = M.ModelSpec(family="convnet", depth=3, width=128, input_shape=(3, 16, 16), classes=10)
    state = M.init_model(spec, seed=0)
    x = np.zeros((2, 3, 16, 16), dtype=np.float32)
    feats, logits = M.forward_split(state, x, tap=3)
    assert feats.shape == (2, 128, 2, 2)
    assert logits.shape == (2, 10)


def test_softmax_rows_sum_to_one():
    state = M.init_model(SPEC, seed=5)
    x = np.random.default_rng(1).uniform(size=(4, 1, 16, 16)).astype(np.float32)
    _, logits = M.forward_split(state, x)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-6


def test_zero_weight_classifier_gives_uniform_softmax():
    state = M.init_model(SPEC, seed=5)
    state.params["head_w"][:] = 0.0
    x = np.random.default_rng(2).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    _, logits = M.forward_split(state, x)
    assert np.abs(logits).max() == 0.0


def test_classify_feature_composes_with_forward_split():
    state = M.init_model(SPEC, seed=7)
    x = np.random.default_rng(3).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    feats, logits = M.forward_split(state, x, tap=2)
    again = M.classify_feature(state, feats)
    assert np.array_equal(again, logits)


def test_classify_feature_rejects_non_final_shape():
    state = M.init_model(SPEC, seed=7)
    with pytest.raises(ShapeError):
        M.classify_feature(state, np.zeros((2, 32, 8, 8), dtype=np.float32))


def test_classify_feature_zero_input_zero_bias():
    state = M.init_model(SPEC, seed=7)
    f = np.zeros((1, 32, 4, 4), dtype=np.float32)
    assert np.array_equal(M.classify_feature(state, f), np.zeros((1, 3), dtype=np.float32))


def test_classify_feature_random_is_finite_with_right_shape():
    state = M.init_model(SPEC, seed=9)
    f = np.random.default_rng(4).normal(size=(5, 32, 4, 4)).astype(np.float32)
    out = M.classify_feature(state, f)
    assert out.shape == (5, 3)
    assert np.isfinite(out).all()


def test_batch_permutation_equivariance():
    state = M.init_model(SPEC, seed=8)
    x = np.random.default_rng(5).uniform(size=(6, 1, 16, 16)).astype(np.float32)
    perm = np.array([3, 1, 5, 0, 4, 2])
    f1, l1 = M.forward_split(state, x)
    f2, l2 = M.forward_split(state, x[perm])
    assert np.allclose(l1[perm], l2, atol=1e-6)
    assert np.allclose(f1[perm], f2, atol=1e-6)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        M.ModelSpec(input_shape=(1, 15, 16)).validate()   # not divisible by poolings
    with pytest.raises(ValueError):
        M.ModelSpec(depth=0).validate()
    with pytest.raises(ValueError):
        M.ModelSpec(classes=1).validate()
    with pytest.raises(ValueError):
        M.ModelSpec(family="transformer").validate()


def test_forward_split_rejects_wrong_input_shape():
    state = M.init_model(SPEC, seed=0)
    with pytest.raises(ShapeError):
        M.forward_split(state, np.zeros((2, 3, 16, 16), dtype=np.float32))


def test_mlp_and_lenet_families():
    for family in ("mlp", "lenet"):
        spec = M.ModelSpec(family=family, depth=2, width=16,
                           input_shape=(1, 16, 16), classes=3)
        state = M.init_model(spec, seed=1)
        x = np.random.default_rng(6).uniform(size=(3, 1, 16, 16)).astype(np.float32)
        feats, logits = M.forward_split(state, x)
        assert logits.shape == (3, 3)
        assert feats.shape == (3,) + spec.feature_shape()
        assert np.array_equal(M.classify_feature(state, feats), logits)


def test_instance_norm_inside_convnet():
    # per-channel statistics of a conv block output before relu/pool are
    # exercised at tape level; here just check tap-1 features are normalized-ish
    state = M.init_model(SPEC, seed=2)
    x = np.random.default_rng(7).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    feats, _ = M.forward_split(state, x, tap=1)
    assert feats.shape == (2, 32, 8, 8)
    assert np.isfinite(feats).all()
