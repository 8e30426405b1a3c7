"""Train models on the enriched reduced dataset and measure what it buys.

Training minimizes the same combined loss used during synthesis. When the
stored feature labels do not match the evaluation model's tap shape, a
fully connected aligner (stored dimension -> model dimension) is trained
jointly and discarded afterwards. Diagnostics cover test accuracy,
cross-architecture grids, and gradient alignment against the source set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from drupi import models as M
from drupi import privileged as P
from drupi import rng as R
from drupi import tape as T
from drupi.data import LabeledDataset, ReducedDataset
from drupi.models import ModelSpec, ModelState
from drupi.privileged import DrupiLossConfig
from drupi.tape import ShapeError, Tape


@dataclass
class EvalReport:
    accuracies: list
    mean: float = 0.0
    std: float = 0.0
    loss_traces: list = field(default_factory=list)
    grad_cosines: list = field(default_factory=list)

    def __post_init__(self):
        accs = np.asarray(self.accuracies, dtype=np.float64)
        if accs.size and ((accs < 0) | (accs > 1)).any():
            raise ValueError("accuracies must lie in [0, 1]")
        self.mean = float(accs.mean()) if accs.size else 0.0
        self.std = float(accs.std(ddof=1)) if accs.size >= 2 else 0.0


def _stored_feature_dim(ds: ReducedDataset) -> int | None:
    if ds.feature_sets is None:
        return None
    return int(np.prod(ds.feature_sets.shape[2:]))


def _init_aligner(tape: Tape, d_store: int, d_model: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d_store)
    w = rng.uniform(-bound, bound, size=(d_store, d_model)).astype(np.float32)
    return {
        "aligner_w": tape.leaf("aligner_w", w),
        "aligner_b": tape.leaf("aligner_b", np.zeros(d_model, dtype=np.float32)),
    }


def train_lupi(DS: ReducedDataset, spec: ModelSpec, cfg: DrupiLossConfig,
               epochs: int = 100, lr: float = 0.01, seed: int = 0,
               tap: int | None = None, use_aligner: bool = True,
               trace: list | None = None) -> ModelState:
    """Full-batch sgd on the combined loss; deterministic per seed.

    An aligner is inserted only when feature shapes mismatch the model's tap
    shape; with matching shapes the path is bypassed entirely.
    """
    cfg.validate()
    spec.validate()
    state = M.init_model(spec, seed=seed)
    tap_l = spec.depth if tap is None else tap
    onehot = np.eye(spec.classes, dtype=np.float32)[DS.labels]
    pick_rng = R.stream(seed, "batching")

    needs_aligner = False
    d_store = _stored_feature_dim(DS)
    if d_store is not None and (cfg.lambda_reg > 0 or cfg.lambda_task > 0):
        d_model = int(np.prod(spec.feature_shape(tap_l)))
        if d_store != d_model:
            if not use_aligner:
                raise ShapeError(
                    f"stored feature dim {d_store} != model tap dim {d_model} "
                    f"and the aligner is disabled"
                )
            needs_aligner = True

    aligner_params = None
    for _ in range(epochs):
        tape = Tape()
        pv = M.params_as_leaves(tape, state)
        aligner = None
        if needs_aligner:
            if aligner_params is None:
                aligner = _init_aligner(tape, d_store,
                                        int(np.prod(spec.feature_shape(tap_l))),
                                        seed=R.stream_seed(seed, "model-init", 1))
            else:
                aligner = {k: tape.leaf(k, v) for k, v in aligner_params.items()}
        feats = None if DS.feature_sets is None else tape.const(DS.feature_sets)
        attn = None if DS.attention_labels is None else tape.const(DS.attention_labels)
        loss, comps, _ = P.drupi_loss_vars(
            tape, spec, pv, tape.const(DS.images), tape.const(onehot), cfg,
            tap=tap_l, features=feats, attention=attn,
            attention_kind=DS.attention_kind, soft=DS.soft_labels,
            rng=pick_rng, aligner=aligner,
        )
        wrt = dict(pv)
        if aligner is not None:
            wrt.update(aligner)
        grads = T.backward(loss, wrt)
        if trace is not None:
            trace.append(comps)
        state = T.sgd_step(state, {k: grads[k] for k in pv}, lr)
        if aligner is not None:
            aligner_params = {
                k: (aligner[k].value - np.float32(lr) * grads[k].value).astype(np.float32)
                for k in aligner
            }
    return state


def evaluate(model: ModelState, test: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions."""
    if len(test.images) == 0:
        raise ValueError("empty test set")
    correct = 0
    for i in range(0, len(test.images), 256):
        pred = M.predict(model, test.images[i : i + 256])
        correct += int((pred == test.labels[i : i + 256]).sum())
    return correct / len(test.images)


def _flat_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in sorted(grads)])


def gradient_alignment(DS: ReducedDataset, DT: LabeledDataset, probe: ModelState,
                       cfg: DrupiLossConfig, tap: int | None = None, rng=None) -> dict:
    """Cosine between reduced-set and real-set parameter gradients on one probe,
    with and without the privileged channels enabled in the loss."""
    from drupi.distill import ce_param_grads   # local import avoids a cycle

    g_real = _flat_grads(ce_param_grads(probe, DT.images, DT.labels))

    def syn_grads(loss_cfg):
        tape = Tape()
        pv = M.params_as_leaves(tape, probe)
        onehot = tape.const(np.eye(probe.spec.classes, dtype=np.float32)[DS.labels])
        feats = None
        attn = None
        if loss_cfg.lambda_reg > 0 or loss_cfg.lambda_task > 0:
            feats = None if DS.feature_sets is None else tape.const(DS.feature_sets)
            attn = None if DS.attention_labels is None else tape.const(DS.attention_labels)
        loss, _, _ = P.drupi_loss_vars(
            tape, probe.spec, pv, tape.const(DS.images), onehot, loss_cfg,
            tap=tap, features=feats, attention=attn,
            attention_kind=DS.attention_kind,
            soft=DS.soft_labels if loss_cfg.lambda_soft > 0 else None, rng=rng,
        )
        return _flat_grads(T.grad_values(T.backward(loss, pv)))

    def cosine(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            warnings.warn("zero-norm gradient: cosine undefined, reported as 0")
            return 0.0
        return float(a @ b / (na * nb))

    with_pi = cosine(syn_grads(cfg), g_real)
    without = cosine(
        syn_grads(DrupiLossConfig(lambda_reg=0.0, lambda_task=0.0, lambda_soft=0.0)),
        g_real,
    )
    return {"with_pi": with_pi, "without_pi": without}


def cross_arch_matrix(DS: ReducedDataset, specs: list, cfg: DrupiLossConfig,
                      seeds: list, test: LabeledDataset, epochs: int = 100,
                      lr: float = 0.01, tap: int | None = None) -> dict:
    """Train on each architecture (aligners inserted where tap shapes differ)
    and report mean ± std accuracy per spec."""
    if len(specs) < 1:
        raise ValueError("need at least one architecture")
    grid = {}
    for spec in specs:
        accs = []
        for s in seeds:
            state = train_lupi(DS, spec, cfg, epochs=epochs, lr=lr, seed=s, tap=tap)
            accs.append(evaluate(state, test))
        grid[f"{spec.family}-d{spec.depth}"] = EvalReport(accuracies=accs)
    return grid
