"""Privileged-information channels and the combined training loss.

Feature labels are stored tensors matching a model's intermediate
representation; attention labels are their channel- or spatial-pooled
forms; soft labels are tempered teacher probabilities. The combined
loss couples classification with feature regression and task supervision
of the feature labels, and is shared between synthesis and training.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.cluster.vq import kmeans2

from drupi import models as M
from drupi import tape as T
from drupi.data import ReducedDataset
from drupi.models import ModelSpec, ModelState
from drupi.tape import ShapeError, Tape, Var


@dataclass(frozen=True)
class DrupiLossConfig:
    lambda_reg: float = 0.5
    lambda_task: float = 0.1
    lambda_soft: float = 0.0
    aggregation: str = "average"     # average | random-pick
    soft_temperature: float = 4.0

    def validate(self) -> "DrupiLossConfig":
        for name in ("lambda_reg", "lambda_task", "lambda_soft"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.aggregation not in ("average", "random-pick"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.soft_temperature <= 0:
            raise ValueError("soft_temperature must be positive")
        return self


# --- channel construction -------------------------------------------------------

def assign_features(ds: ReducedDataset, extractor: ModelState, tap: int | None = None) -> np.ndarray:
    """Direct assignment: one feature label per example from the extractor."""
    feats, _ = M.forward_split(extractor, ds.images, tap=tap)
    return feats[:, None].copy()


def init_features(ds: ReducedDataset, mode: str, seed: int = 0, n_feat: int = 1,
                  weak_model: ModelState | None = None, tap: int | None = None,
                  feature_shape: tuple | None = None) -> np.ndarray:
    """Initialize an M x n_feat x feature-shape label set.

    noise mode draws from N(0, 0.1^2); weak-model mode assigns extractor
    features, replicating them with N(0, 0.01^2) symmetry-breaking noise on
    copies beyond the first (so n_feat=1 equals direct assignment).
    """
    if n_feat < 1:
        raise ValueError("n_feat must be >= 1")
    rng = np.random.default_rng(seed)
    m = len(ds.images)
    if mode == "noise":
        if feature_shape is None:
            if weak_model is None:
                raise ValueError("noise mode needs feature_shape or a reference model")
            feature_shape = weak_model.spec.feature_shape(tap)
        return rng.normal(0.0, 0.1, size=(m, n_feat) + tuple(feature_shape)).astype(np.float32)
    if mode == "weak-model":
        if weak_model is None:
            raise ValueError("weak-model mode needs the weakly-trained extractor")
        base = assign_features(ds, weak_model, tap=tap)
        reps = np.repeat(base, n_feat, axis=1)
        if n_feat > 1:
            eps = rng.normal(0.0, 0.01, size=reps.shape).astype(np.float32)
            eps[:, 0] = 0.0
            reps = reps + eps
        return reps.astype(np.float32)
    raise ValueError(f"unknown init mode {mode!r}")


def pool_attention(f: np.ndarray, kind: str) -> np.ndarray:
    """Average-pool a Ch x H x W feature label (or an M-batch of them)."""
    f = np.asarray(f, dtype=np.float32)
    batched = f.ndim == 4
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4:
        raise ShapeError(
            f"attention labels need Ch x H x W features, got shape {f.shape}"
        )
    if kind == "spatial":
        out = f.mean(axis=1, keepdims=True)          # 1 x H x W
    elif kind == "channel":
        out = f.mean(axis=(2, 3), keepdims=True)     # Ch x 1 x 1
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return out if batched else out[0]


def _pool_var(f: Var, kind: str) -> Var:
    if kind == "spatial":
        return T.reduce_mean(f, axis=1, keepdims=True)
    return T.reduce_mean(f, axis=(2, 3), keepdims=True)


def soft_labels(ds: ReducedDataset, teacher: ModelState, temperature: float) -> np.ndarray:
    """Row-stochastic tempered teacher probabilities for every example."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _, logits = M.forward_split(teacher, ds.images)
    z = logits.astype(np.float64) / temperature
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p.astype(np.float32)


# --- the combined loss ----------------------------------------------------------

def _aggregate_features(fvar: Var, mode: str, rng) -> Var:
    """Collapse the M x n_feat x ... member axis per the usage strategy."""
    n_feat = fvar.shape[1]
    if n_feat == 1:
        return T.reshape(fvar, (fvar.shape[0],) + fvar.shape[2:])
    if mode == "average":
        return T.reduce_mean(fvar, axis=1)
    if rng is None:
        raise ValueError("random-pick aggregation needs an rng")
    picks = rng.integers(n_feat, size=fvar.shape[0])
    mask = np.zeros((fvar.shape[0], n_feat), dtype=np.float32)
    mask[np.arange(fvar.shape[0]), picks] = 1.0
    mask = mask.reshape(mask.shape + (1,) * (len(fvar.shape) - 2))
    sel = T.mul(fvar, T.broadcast_to(fvar.tape.const(mask), fvar.shape))
    return T.reduce_sum(sel, axis=1)


def drupi_loss_vars(tape: Tape, spec: ModelSpec, params: dict, x: Var, onehot: Var,
                    cfg: DrupiLossConfig, tap: int | None = None, features: Var | None = None,
                    attention: Var | None = None, attention_kind: str | None = None,
                    soft: np.ndarray | None = None, rng=None, aligner: dict | None = None):
    """Record the combined loss on the tape.

    Returns (total Var, components dict of floats, diagnostics dict).
    Zero-weight terms are skipped entirely so degenerate configurations
    reduce to the bare classification graph.
    """
    cfg.validate()
    tap = spec.depth if tap is None else tap
    taps, logits = M.build_forward(tape, spec, params, x)
    model_feat = taps[tap - 1]

    total = T.cross_entropy(logits, onehot)
    components = {"cls": float(total.value)}
    diag: dict = {}

    # one aggregation per step so reg and task see the same sampled member
    f_used = None
    if features is not None and (cfg.lambda_reg > 0 or cfg.lambda_task > 0):
        f_used = _aggregate_features(features, cfg.aggregation, rng)
        if aligner is not None:
            flat = T.reshape(f_used, (f_used.shape[0], int(np.prod(f_used.shape[1:]))))
            mapped = T.add(T.matmul(flat, aligner["aligner_w"]), aligner["aligner_b"])
            f_used = T.reshape(mapped, model_feat.shape)
            diag["aligned"] = True

    if cfg.lambda_reg > 0:
        if attention is not None:
            if attention_kind not in ("spatial", "channel"):
                raise ValueError("attention supervision needs attention_kind")
            pooled = _pool_var(model_feat, attention_kind)
            if pooled.shape != attention.shape:
                raise ShapeError(
                    f"pooled model features {pooled.shape} != attention labels "
                    f"{attention.shape}"
                )
            reg = T.mse(attention, pooled)
            diag["pool_kind"] = attention_kind
            diag["pool_target_shape"] = tuple(attention.shape[1:])
            diag["pool_model_shape"] = tuple(pooled.shape[1:])
        elif f_used is not None:
            if f_used.shape != model_feat.shape:
                raise ShapeError(
                    f"feature labels {f_used.shape} != model features "
                    f"{model_feat.shape}; enable the aligner"
                )
            reg = T.mse(f_used, model_feat)
        else:
            raise ValueError("lambda_reg > 0 but neither features nor attention labels present")
        reg_w = T.mul(reg, tape.const(cfg.lambda_reg))
        components["reg"] = float(reg_w.value)
        total = T.add(total, reg_w)

    if cfg.lambda_task > 0:
        if f_used is None:
            raise ValueError("lambda_task > 0 but no feature labels present")
        head_in = spec.feature_shape(spec.depth)
        if tuple(f_used.shape[1:]) != head_in:
            raise ShapeError(
                f"task supervision feeds the classifier, which consumes "
                f"final-layer features {head_in}; got {tuple(f_used.shape[1:])} "
                f"(tap {tap})"
            )
        flat = T.reshape(f_used, (f_used.shape[0], int(np.prod(head_in))))
        f_logits = T.add(T.matmul(flat, params["head_w"]), params["head_b"])
        task = T.cross_entropy(f_logits, onehot)
        task_w = T.mul(task, tape.const(cfg.lambda_task))
        components["task"] = float(task_w.value)
        total = T.add(total, task_w)

    if cfg.lambda_soft > 0:
        if soft is None:
            raise ValueError("lambda_soft > 0 but no soft labels present")
        p = np.asarray(soft, dtype=np.float64)
        entropy = float((np.where(p > 0, p * np.log(p), 0.0)).sum(axis=1).mean())
        cross = T.neg(T.reduce_mean(T.reduce_sum(
            T.mul(tape.const(p.astype(np.float32)), T.log_softmax(logits)), axis=-1)))
        kl = T.add(cross, tape.const(entropy))
        kl_w = T.mul(kl, tape.const(cfg.lambda_soft))
        components["soft"] = float(kl_w.value)
        total = T.add(total, kl_w)

    return total, components, diag


def drupi_loss(model: ModelState, batch: ReducedDataset, cfg: DrupiLossConfig,
               tap: int | None = None, rng=None):
    """Evaluate the combined loss on a batch; returns (total, components)."""
    t = Tape()
    params = M.params_as_consts(t, model)
    onehot = t.const(np.eye(model.spec.classes, dtype=np.float32)[batch.labels])
    feats = None if batch.feature_sets is None else t.const(batch.feature_sets)
    attn = None if batch.attention_labels is None else t.const(batch.attention_labels)
    total, components, _ = drupi_loss_vars(
        t, model.spec, params, t.const(batch.images), onehot, cfg,
        tap=tap, features=feats, attention=attn,
        attention_kind=batch.attention_kind, soft=batch.soft_labels, rng=rng,
    )
    return float(total.value), components


# --- diversity / discriminability metrics ----------------------------------------

def _linear_probe_accuracy(x: np.ndarray, y: np.ndarray, classes: int,
                           steps: int = 200, lr: float = 0.5) -> float:
    """Held-in accuracy of a softmax regression trained by gradient descent."""
    x = x.astype(np.float64)
    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-8)
    onehot = np.eye(classes)[y]
    w = np.zeros((x.shape[1], classes))
    b = np.zeros(classes)
    for _ in range(steps):
        logits = x @ w + b
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * x.T @ g
        b -= lr * g.sum(axis=0)
    return float(((x @ w + b).argmax(axis=1) == y).mean())


def _plugin_mutual_information(q: np.ndarray, y: np.ndarray) -> float:
    """Discrete plug-in MI (natural log) between two label vectors."""
    joint = np.zeros((q.max() + 1, y.max() + 1))
    for qi, yi in zip(q, y):
        joint[qi, yi] += 1.0
    joint /= joint.sum()
    pq = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = joint * np.log(joint / (pq @ py))
    return float(np.nansum(terms))


def diversity_discriminability(feature_sets: np.ndarray, labels: np.ndarray,
                               seed: int = 0):
    """Fig-3(c)-style trade-off metrics over a dataset's feature labels.

    diversity = -I(Q; Y) with Q the k-means (k = classes) cluster assignment
    of the mean feature labels; discriminability = held-in accuracy of a
    linear probe on the same vectors.
    """
    labels = np.asarray(labels)
    classes = int(labels.max()) + 1
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if np.bincount(labels).min() < 2:
        raise ValueError("need at least 2 examples per class")
    fmean = np.asarray(feature_sets, dtype=np.float64)
    if fmean.ndim > 2:
        fmean = fmean.mean(axis=1).reshape(len(labels), -1)

    disc = _linear_probe_accuracy(fmean, labels, classes)

    if np.allclose(fmean, fmean[0], atol=1e-12):
        warnings.warn("all feature labels identical: diversity set to 0 by convention")
        return 0.0, disc
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")   # kmeans2 warns about empty clusters
        _, q = kmeans2(fmean, classes, iter=50, minit="++",
                       seed=np.random.default_rng(seed))
    mi = _plugin_mutual_information(q.astype(int), labels)
    return -mi, disc
