"""Backend-pluggable synthesis of reduced datasets and privileged channels.

The dc backend matches per-class parameter gradients between the real and
reduced datasets and descends the matching distance through the gradient
computation (double backprop) with respect to feature labels and,
optionally, the images. The dm backend matches per-class mean embeddings
under freshly initialized extractors (first-order only). Trajectory
matching backends can plug in through the same step signature.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from drupi import models as M
from drupi import privileged as P
from drupi import rng as R
from drupi import tape as T
from drupi.data import LabeledDataset, ReducedDataset
from drupi.models import ModelSpec, ModelState
from drupi.privileged import DrupiLossConfig
from drupi.tape import ShapeError, Tape, Var

BACKENDS = ("dc", "dm")

_COS_EPS = 1e-24   # keeps row normalization differentiable at tiny norms


@dataclass(frozen=True)
class BiLevelConfig:
    model_spec: ModelSpec
    loss: DrupiLossConfig
    outer_steps: int = 20        # fresh model per outer iteration
    inner_steps: int = 10        # matching rounds / sgd steps inside one outer step
    model_lr: float = 0.01
    data_lr: float = 0.1         # feature/image learning rate
    batch_real: int = 64
    batch_syn: int = 0           # 0 = full class
    backend: str = "dc"
    update_images: bool = False
    tap: int | None = None       # None = final layer

    @property
    def classes(self) -> int:
        return self.model_spec.classes

    def validate(self) -> "BiLevelConfig":
        if self.outer_steps < 0 or self.inner_steps < 1:
            raise ValueError("need outer_steps >= 0 and inner_steps >= 1")
        if self.model_lr <= 0 or self.data_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        self.model_spec.validate()
        self.loss.validate()
        return self


def config_digest(cfg) -> str:
    """Stable short digest of a dataclass configuration."""
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# --- gradient distance ------------------------------------------------------------

def grad_distance_vars(tape: Tape, gA: dict, gB: dict):
    """Layerwise per-output-row cosine distance, recorded on the tape.

    1-D parameters (biases) are skipped; zero-norm rows come out exactly
    orthogonal (distance contribution 1) and are counted in the returned
    diagnostic.
    """
    if set(gA) != set(gB):
        raise ShapeError(f"gradient key sets differ: {sorted(set(gA) ^ set(gB))}")

    def as_var(v):
        return v if isinstance(v, Var) else tape.const(v)

    total = None
    zero_rows = 0
    for k in sorted(gA):
        a, b = as_var(gA[k]), as_var(gB[k])
        if a.shape != b.shape:
            raise ShapeError(f"gradient shapes differ for {k!r}: {a.shape} vs {b.shape}")
        if len(a.shape) < 2:
            continue
        if len(a.shape) == 2:
            # fc weights are stored (in, out): bring output units onto rows
            a, b = T.permute(a, (1, 0)), T.permute(b, (1, 0))
        out_dim = a.shape[0]
        A = T.reshape(a, (out_dim, int(np.prod(a.shape[1:]))))
        B = T.reshape(b, (out_dim, int(np.prod(b.shape[1:]))))
        na = T.reduce_sum(T.mul(A, A), axis=1, keepdims=True)
        nb = T.reduce_sum(T.mul(B, B), axis=1, keepdims=True)
        zero_rows += int((na.value == 0).sum() + (nb.value == 0).sum())
        An = T.mul(A, T.broadcast_to(T.powc(T.add(na, tape.const(_COS_EPS)), -0.5), A.shape))
        Bn = T.mul(B, T.broadcast_to(T.powc(T.add(nb, tape.const(_COS_EPS)), -0.5), B.shape))
        cos = T.reduce_sum(T.mul(An, Bn), axis=1)
        term = T.reduce_sum(T.sub(tape.const(np.ones(out_dim, dtype=np.float32)), cos))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ShapeError("no parameters of rank >= 2 to match")
    return total, zero_rows


def grad_distance(gA: dict, gB: dict) -> float:
    t = Tape()
    d, zero_rows = grad_distance_vars(t, gA, gB)
    if zero_rows:
        warnings.warn(f"{zero_rows} zero-norm gradient rows treated as orthogonal")
    return float(d.value)


# --- dc backend ---------------------------------------------------------------------

def _class_batch(rng, indices: np.ndarray, size: int) -> np.ndarray:
    if size <= 0 or size >= len(indices):
        return indices
    return rng.choice(indices, size=size, replace=False)


def _feature_lr(cfg: BiLevelConfig, DS: ReducedDataset) -> float:
    """Averaging over a label set scales member gradients by 1/n_feat;
    normalize so the aggregated label always moves at data_lr."""
    if cfg.loss.aggregation == "average" and DS.feature_sets is not None:
        return cfg.data_lr * DS.feature_sets.shape[1]
    return cfg.data_lr


def _syn_loss_grads(model: ModelState, DS: ReducedDataset, idx, cfg: BiLevelConfig,
                    rng, leaf_images: bool):
    """Build the reduced-set loss with params as leaves; returns tape pieces."""
    tape = Tape()
    pv = M.params_as_leaves(tape, model)
    onehot = tape.const(np.eye(cfg.classes, dtype=np.float32)[DS.labels[idx]])
    if leaf_images:
        x = tape.leaf("S_images", DS.images[idx])
    else:
        x = tape.const(DS.images[idx])
    fvar = None
    if DS.feature_sets is not None:
        fvar = tape.leaf("S_feat", DS.feature_sets[idx])
    loss, comps, _ = P.drupi_loss_vars(
        tape, model.spec, pv, x, onehot, cfg.loss, tap=cfg.tap,
        features=fvar, soft=None if DS.soft_labels is None else DS.soft_labels[idx],
        rng=rng,
    )
    return tape, pv, loss, comps


def ce_param_grads(model: ModelState, images: np.ndarray, labels: np.ndarray) -> dict:
    """Plain cross-entropy parameter gradients as arrays."""
    tape = Tape()
    pv = M.params_as_leaves(tape, model)
    onehot = tape.const(np.eye(model.spec.classes, dtype=np.float32)[labels])
    _, logits = M.build_forward(tape, model.spec, pv, tape.const(images))
    loss = T.cross_entropy(logits, onehot)
    return T.grad_values(T.backward(loss, pv))


def matching_distance(DT: LabeledDataset, DS: ReducedDataset, model: ModelState,
                      cfg: BiLevelConfig, idx_real: dict, rng=None) -> float:
    """Recompute the summed per-class gradient distance at fixed batches."""
    total = 0.0
    for c in range(cfg.classes):
        gT = ce_param_grads(model, DT.images[idx_real[c]], DT.labels[idx_real[c]])
        idx_s = DS.class_indices(c)
        _, pv, loss, _ = _syn_loss_grads(model, DS, idx_s, cfg, rng, leaf_images=False)
        gS = T.backward(loss, pv)
        total += grad_distance(T.grad_values(gS), gT)
    return total


def dc_outer_step(DT: LabeledDataset, DS: ReducedDataset, model: ModelState,
                  cfg: BiLevelConfig, rng) -> tuple:
    """One outer iteration of gradient matching.

    Runs inner_steps rounds; each round matches per-class gradients at the
    current parameters, descends the matching distance with respect to the
    privileged channels (and images when enabled), then advances the model
    one sgd step on the reduced-set loss.
    """
    cfg.validate()
    if cfg.loss.lambda_reg > 0 and DS.feature_sets is None:
        raise ValueError("lambda_reg > 0 but the reduced dataset has no feature sets")
    if DS.feature_sets is None and not cfg.update_images:
        raise ValueError("nothing to optimize: no feature sets and update_images=False")
    DS = DS.copy()
    diag = {"rounds": []}

    for _ in range(cfg.inner_steps):
        round_diag = {"classes": [], "distance": 0.0}
        for c in range(cfg.classes):
            idx_t = _class_batch(rng, DT.class_indices(c), cfg.batch_real)
            idx_s = _class_batch(rng, DS.class_indices(c), cfg.batch_syn)
            gT = ce_param_grads(model, DT.images[idx_t], DT.labels[idx_t])

            tape, pv, loss, _ = _syn_loss_grads(
                model, DS, idx_s, cfg, rng, leaf_images=cfg.update_images)
            gS = T.backward(loss, pv)
            dist, zero_rows = grad_distance_vars(tape, gS, gT)

            wrt = []
            if DS.feature_sets is not None:
                wrt.append("S_feat")
            if cfg.update_images:
                wrt.append("S_images")
            outer = T.backward(dist, wrt)
            if DS.feature_sets is not None:
                DS.feature_sets[idx_s] -= _feature_lr(cfg, DS) * outer["S_feat"].value
            if cfg.update_images:
                DS.images[idx_s] -= cfg.data_lr * outer["S_images"].value

            round_diag["classes"].append(
                {"class": c, "idx_real": np.asarray(idx_t),
                 "distance": float(dist.value), "zero_rows": zero_rows}
            )
            round_diag["distance"] += float(dist.value)

        # advance the model one sgd step on the full reduced set
        _, pv, loss, _ = _syn_loss_grads(
            model, DS, np.arange(len(DS.images)), cfg, rng, leaf_images=False)
        grads = T.backward(loss, pv)
        model = T.sgd_step(model, grads, cfg.model_lr)
        diag["rounds"].append(round_diag)

    return DS, model, diag


# --- dm backend -----------------------------------------------------------------------

def dm_outer_step(DT: LabeledDataset, DS: ReducedDataset, model: ModelState,
                  cfg: BiLevelConfig, rng) -> tuple:
    """One outer iteration of per-class mean-embedding matching (first order)."""
    cfg.validate()
    if DS.feature_sets is None and not cfg.update_images:
        raise ValueError("nothing to optimize: no feature sets and update_images=False")
    DS = DS.copy()
    tap = cfg.tap or model.spec.depth
    diag = {"classes": [], "objective": 0.0}

    for c in range(cfg.classes):
        idx_t = _class_batch(rng, DT.class_indices(c), cfg.batch_real)
        idx_s = DS.class_indices(c)

        emb_t, _ = M.forward_split(model, DT.images[idx_t], tap=model.spec.depth)
        mu_t = emb_t.mean(axis=0)
        tap_t, _ = M.forward_split(model, DT.images[idx_t], tap=tap)
        mu_tap_t = tap_t.mean(axis=0)

        tape = Tape()
        pv = M.params_as_consts(tape, model)
        x = tape.leaf("S_images", DS.images[idx_s]) if cfg.update_images \
            else tape.const(DS.images[idx_s])
        taps, _ = M.build_forward(tape, model.spec, pv, x)
        mu_s = T.reduce_mean(taps[-1], axis=0)
        d = T.sub(mu_s, tape.const(mu_t))
        objective = T.reduce_sum(T.mul(d, d))

        wrt = []
        if cfg.update_images:
            wrt.append("S_images")
        if DS.feature_sets is not None:
            fvar = tape.leaf("S_feat", DS.feature_sets[idx_s])
            f_agg = T.reduce_mean(fvar, axis=1) if fvar.shape[1] > 1 else \
                T.reshape(fvar, (fvar.shape[0],) + fvar.shape[2:])
            mu_f = T.reduce_mean(f_agg, axis=0)
            df = T.sub(mu_f, tape.const(mu_tap_t))
            objective = T.add(objective, T.reduce_sum(T.mul(df, df)))
            if cfg.loss.lambda_task > 0 and tap == model.spec.depth:
                # task supervision shapes the labels toward classifiability
                flat = T.reshape(f_agg, (f_agg.shape[0],
                                         int(np.prod(f_agg.shape[1:]))))
                f_logits = T.add(T.matmul(flat, pv["head_w"]), pv["head_b"])
                onehot = tape.const(
                    np.eye(cfg.classes, dtype=np.float32)[DS.labels[idx_s]])
                task = T.cross_entropy(f_logits, onehot)
                objective = T.add(
                    objective, T.mul(task, tape.const(cfg.loss.lambda_task)))
            wrt.append("S_feat")

        grads = T.backward(objective, wrt)
        if cfg.update_images:
            DS.images[idx_s] -= cfg.data_lr * grads["S_images"].value
        if DS.feature_sets is not None:
            DS.feature_sets[idx_s] -= _feature_lr(cfg, DS) * grads["S_feat"].value

        diag["classes"].append({"class": c, "objective": float(objective.value)})
        diag["objective"] += float(objective.value)

    return DS, model, diag


def dm_objective(DT: LabeledDataset, DS: ReducedDataset, model: ModelState,
                 cfg: BiLevelConfig) -> float:
    """Evaluate the dm matching objective over full classes (no update)."""
    tap = cfg.tap or model.spec.depth
    total = 0.0
    for c in range(cfg.classes):
        idx_t = DT.class_indices(c)
        idx_s = DS.class_indices(c)
        emb_t, _ = M.forward_split(model, DT.images[idx_t], tap=model.spec.depth)
        emb_s, _ = M.forward_split(model, DS.images[idx_s], tap=model.spec.depth)
        total += float(((emb_s.mean(0) - emb_t.mean(0)) ** 2).sum())
        if DS.feature_sets is not None:
            tap_t, _ = M.forward_split(model, DT.images[idx_t], tap=tap)
            mu_f = DS.feature_sets[idx_s].mean(axis=(0, 1))
            total += float(((mu_f - tap_t.mean(0)) ** 2).sum())
    return total


# --- synthesis loop ----------------------------------------------------------------------

_STEPS = {"dc": dc_outer_step, "dm": dm_outer_step}


def run_synthesis(DT: LabeledDataset, DS_init: ReducedDataset, cfg: BiLevelConfig,
                  seed: int = 0, trace: list | None = None) -> ReducedDataset:
    """Refine the reduced dataset for outer_steps iterations, each against a
    freshly initialized model; deterministic per seed."""
    cfg.validate()
    step_fn = _STEPS[cfg.backend]
    DS = DS_init.copy()
    for k in range(cfg.outer_steps):
        model = M.init_model(cfg.model_spec, seed=R.stream_seed(seed, "model-init", k))
        init_hash = hashlib.sha256(
            b"".join(v.tobytes() for _, v in sorted(model.params.items()))
        ).hexdigest()[:12]
        rng = R.stream(seed, "batching", k)
        DS, model, diag = step_fn(DT, DS, model, cfg, rng)
        if trace is not None:
            trace.append({"outer": k, "model_hash": init_hash, "diag": diag})
    DS.provenance = dict(DS.provenance)
    DS.provenance.update(
        backend=cfg.backend, seed=seed, config_hash=config_digest(cfg),
        outer_steps=cfg.outer_steps,
    )
    return DS
