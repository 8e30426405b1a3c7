import numpy as np
import pytest

from drupi import coreset as C
from drupi import data as D
from drupi import distill as DI
from drupi import models as M
from drupi import privileged as P
from drupi import tape as T
from drupi.tape import ShapeError, Tape

SPEC = M.ModelSpec(family="convnet", depth=2, width=8, input_shape=(1, 8, 8), classes=2)
LOSS0 = P.DrupiLossConfig(lambda_reg=0.0, lambda_task=0.0)


def blobs(seed=0, per_class=8, classes=2):
    return D.make_blobs(
        D.BlobSpec(classes=classes, per_class=per_class, size=(1, 8, 8), sigma=0.05),
        seed=seed,
    )


def cfg_for(loss, **kw):
    base = dict(model_spec=SPEC, loss=loss, outer_steps=1, inner_steps=1,
                model_lr=0.01, data_lr=0.1, batch_real=4)
    base.update(kw)
    return DI.BiLevelConfig(**base)


# --- grad_distance -----------------------------------------------------------------

def test_grad_distance_identical_is_zero():
    rng = np.random.default_rng(0)
    g = {"w": rng.normal(size=(3, 4)).astype(np.float32),
         "b": rng.normal(size=3).astype(np.float32)}
    assert DI.grad_distance(g, {k: v.copy() for k, v in g.items()}) < 1e-5


def test_grad_distance_orthogonal_single_row():
    # one output unit with weights [1,0] vs [0,1]; fc layout is (in, out)
    gA = {"w": np.array([[1.0], [0.0]], dtype=np.float32)}
    gB = {"w": np.array([[0.0], [1.0]], dtype=np.float32)}
    assert DI.grad_distance(gA, gB) == pytest.approx(1.0, abs=1e-6)


def test_grad_distance_scale_invariance():
    rng = np.random.default_rng(1)
    gA = {"w": rng.normal(size=(4, 5)).astype(np.float32)}
    gB = {"w": 2.0 * gA["w"]}
    assert DI.grad_distance(gA, gB) < 1e-5
    gC = {"w": 7.5 * gA["w"]}
    assert DI.grad_distance(gB, gC) < 1e-5


def test_grad_distance_zero_row_contributes_one_and_warns():
    # first output unit's gradient is zero on one side: orthogonal by convention
    gA = {"w": np.array([[0.0, 1.0], [0.0, 2.0]], dtype=np.float32)}
    gB = {"w": np.array([[1.0, 1.0], [1.0, 2.0]], dtype=np.float32)}
    with pytest.warns(UserWarning, match="zero-norm"):
        d = DI.grad_distance(gA, gB)
    assert d == pytest.approx(1.0, abs=1e-5)


def test_grad_distance_rejects_mismatches():
    gA = {"w": np.zeros((2, 2), dtype=np.float32)}
    with pytest.raises(ShapeError):
        DI.grad_distance(gA, {"v": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(ShapeError):
        DI.grad_distance(gA, {"w": np.zeros((2, 3), dtype=np.float32)})


# --- dc backend ------------------------------------------------------------------------

def plain_dc_step(DT, DS, model, cfg, rng):
    """Reference: classic gradient matching on (images, labels) only."""
    DS = DS.copy()
    for _ in range(cfg.inner_steps):
        for c in range(cfg.classes):
            idx_t = rng.choice(DT.class_indices(c), size=cfg.batch_real, replace=False) \
                if 0 < cfg.batch_real < len(DT.class_indices(c)) else DT.class_indices(c)
            idx_s = DS.class_indices(c)
            gT = DI.ce_param_grads(model, DT.images[idx_t], DT.labels[idx_t])

            tape = Tape()
            pv = M.params_as_leaves(tape, model)
            x = tape.leaf("S_images", DS.images[idx_s])
            onehot = tape.const(np.eye(cfg.classes, dtype=np.float32)[DS.labels[idx_s]])
            _, logits = M.build_forward(tape, model.spec, pv, x)
            loss = T.cross_entropy(logits, onehot)
            gS = T.backward(loss, pv)
            dist, _ = DI.grad_distance_vars(tape, gS, gT)
            outer = T.backward(dist, ["S_images"])
            DS.images[idx_s] -= cfg.data_lr * outer["S_images"].value

        tape = Tape()
        pv = M.params_as_leaves(tape, model)
        onehot = tape.const(np.eye(cfg.classes, dtype=np.float32)[DS.labels])
        _, logits = M.build_forward(tape, model.spec, pv, tape.const(DS.images))
        loss = T.cross_entropy(logits, onehot)
        model = T.sgd_step(model, T.backward(loss, pv), cfg.model_lr)
    return DS, model


def test_dc_degenerate_config_matches_plain_dc_bitwise():
    DT = blobs(seed=3)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=0))
    model = M.init_model(SPEC, seed=5)
    cfg = cfg_for(LOSS0, update_images=True, inner_steps=2)

    got_ds, got_model, _ = DI.dc_outer_step(DT, DS, model, cfg, np.random.default_rng(42))
    want_ds, want_model = plain_dc_step(DT, DS, model, cfg, np.random.default_rng(42))

    assert got_ds.images.tobytes() == want_ds.images.tobytes()
    for k in got_model.params:
        assert got_model.params[k].tobytes() == want_model.params[k].tobytes(), k


def test_dc_outer_step_decreases_matching_distance():
    DT = blobs(seed=4)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=1))
    weak = M.init_model(SPEC, seed=9)
    DS.feature_sets = P.assign_features(DS, weak)
    model = M.init_model(SPEC, seed=6)
    loss = P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1)

    lr = 0.1
    for _ in range(6):   # halve at most 5 times
        cfg = cfg_for(loss, data_lr=lr)
        got_ds, _, diag = DI.dc_outer_step(DT, DS, model, cfg, np.random.default_rng(7))
        before = diag["rounds"][0]["distance"]
        idx_real = {e["class"]: e["idx_real"] for e in diag["rounds"][0]["classes"]}
        after = DI.matching_distance(DT, got_ds, model, cfg, idx_real)
        if after < before:
            break
        lr *= 0.5
    assert after < before, f"no descent even at lr {lr}"


def test_dc_distance_zero_when_reduced_equals_real():
    DT = blobs(seed=5, per_class=4)
    DS = D.ReducedDataset(images=DT.images.copy(), labels=DT.labels.copy())
    model = M.init_model(SPEC, seed=2)
    cfg = cfg_for(LOSS0, batch_real=0)   # full class on both sides
    idx_real = {c: DT.class_indices(c) for c in range(2)}
    d = DI.matching_distance(DT, DS, model, cfg, idx_real)
    assert d < 1e-4


def test_dc_rejects_reg_without_features():
    DT = blobs(seed=6)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=2))
    model = M.init_model(SPEC, seed=3)
    cfg = cfg_for(P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.0))
    with pytest.raises(ValueError, match="feature"):
        DI.dc_outer_step(DT, DS, model, cfg, np.random.default_rng(0))


def test_dc_rejects_nothing_to_optimize():
    DT = blobs(seed=6)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=2))
    model = M.init_model(SPEC, seed=3)
    cfg = cfg_for(LOSS0, update_images=False)
    with pytest.raises(ValueError, match="nothing"):
        DI.dc_outer_step(DT, DS, model, cfg, np.random.default_rng(0))


# --- dm backend ---------------------------------------------------------------------------

def identity_mlp(d):
    spec = M.ModelSpec(family="mlp", depth=1, width=d, input_shape=(1, 4, 4), classes=2)
    state = M.init_model(spec, seed=0)
    state.params["fc1_w"][:] = np.eye(d, dtype=np.float32)
    state.params["fc1_b"][:] = 0.0
    return state


def test_dm_objective_zero_at_class_means_identity_embedder():
    DT = D.make_blobs(D.BlobSpec(classes=2, per_class=6, size=(1, 4, 4), sigma=0.03), seed=1)
    means = np.stack([DT.images[DT.class_indices(c)].mean(axis=0) for c in range(2)])
    DS = D.ReducedDataset(images=means, labels=np.array([0, 1], dtype=np.int64))
    state = identity_mlp(16)
    cfg = DI.BiLevelConfig(model_spec=state.spec, loss=LOSS0, backend="dm",
                           batch_real=0, update_images=True)
    _, _, diag = DI.dm_outer_step(DT, DS, state, cfg, np.random.default_rng(0))
    assert diag["objective"] < 1e-9


def test_dm_objective_non_increasing_over_steps():
    DT = blobs(seed=7, per_class=6)
    DS = D.subset(DT, C.select_random(DT, ipc=2, seed=3))
    model = M.init_model(SPEC, seed=4)
    cfg = cfg_for(LOSS0, backend="dm", data_lr=0.01, batch_real=0, update_images=True)
    values = [DI.dm_objective(DT, DS, model, cfg)]
    for _ in range(10):
        DS, _, _ = DI.dm_outer_step(DT, DS, model, cfg, np.random.default_rng(0))
        values.append(DI.dm_objective(DT, DS, model, cfg))
    assert all(b <= a + 1e-7 for a, b in zip(values, values[1:])), values
    assert values[-1] < values[0]


def test_dm_single_example_class_is_feature_matching():
    DT = blobs(seed=8, per_class=5)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=4))
    model = M.init_model(SPEC, seed=5)
    cfg = cfg_for(LOSS0, backend="dm", batch_real=0, update_images=True)
    _, _, diag = DI.dm_outer_step(DT, DS, model, cfg, np.random.default_rng(0))
    emb_s, _ = M.forward_split(model, DS.images[:1])
    emb_t, _ = M.forward_split(model, DT.images[DT.class_indices(0)])
    want = float(((emb_s[0] - emb_t.mean(0)) ** 2).sum())
    assert diag["classes"][0]["objective"] == pytest.approx(want, rel=1e-5)


# --- run_synthesis -------------------------------------------------------------------------

def test_run_synthesis_zero_outer_steps_is_noop():
    DT = blobs(seed=9)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=5))
    DS.feature_sets = P.assign_features(DS, M.init_model(SPEC, seed=1))
    cfg = cfg_for(P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1), outer_steps=0)
    out = DI.run_synthesis(DT, DS, cfg, seed=0)
    assert out.images.tobytes() == DS.images.tobytes()
    assert out.feature_sets.tobytes() == DS.feature_sets.tobytes()


def test_run_synthesis_deterministic_per_seed():
    DT = blobs(seed=10)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=6))
    DS.feature_sets = P.assign_features(DS, M.init_model(SPEC, seed=2))
    cfg = cfg_for(P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1),
                  outer_steps=2, inner_steps=2)
    a = DI.run_synthesis(DT, DS, cfg, seed=11)
    b = DI.run_synthesis(DT, DS, cfg, seed=11)
    assert a.feature_sets.tobytes() == b.feature_sets.tobytes()
    assert a.images.tobytes() == b.images.tobytes()
    c = DI.run_synthesis(DT, DS, cfg, seed=12)
    assert a.feature_sets.tobytes() != c.feature_sets.tobytes()


def test_run_synthesis_fresh_model_each_outer_iteration():
    DT = blobs(seed=11)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=7))
    DS.feature_sets = P.assign_features(DS, M.init_model(SPEC, seed=3))
    cfg = cfg_for(P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1),
                  outer_steps=3, inner_steps=1)
    trace = []
    DI.run_synthesis(DT, DS, cfg, seed=13, trace=trace)
    hashes = [e["model_hash"] for e in trace]
    assert len(set(hashes)) == 3


def test_run_synthesis_records_provenance():
    DT = blobs(seed=12)
    DS = D.subset(DT, C.select_random(DT, ipc=1, seed=8))
    DS.feature_sets = P.assign_features(DS, M.init_model(SPEC, seed=4))
    cfg = cfg_for(P.DrupiLossConfig(lambda_reg=0.5, lambda_task=0.1))
    out = DI.run_synthesis(DT, DS, cfg, seed=14)
    assert out.provenance["backend"] == "dc"
    assert out.provenance["seed"] == 14
    assert len(out.provenance["config_hash"]) == 12
