"""Coreset selection baselines: random, herding, k-center, forgetting.

All selectors return exactly ipc distinct in-range indices per class.
Ties break toward the lowest dataset index so runs are reproducible.
"""

from __future__ import annotations

import numpy as np

from drupi import models as M
from drupi import tape as T
from drupi.data import LabeledDataset
from drupi.models import ModelSpec, ModelState
from drupi.tape import Tape


class SelectionError(Exception):
    pass


def _per_class(labels: np.ndarray):
    for c in range(int(labels.max()) + 1):
        yield c, np.flatnonzero(labels == c)


def select_random(ds: LabeledDataset, ipc: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = []
    for c, idx in _per_class(ds.labels):
        if len(idx) < ipc:
            raise SelectionError(f"class {c} has {len(idx)} examples < ipc {ipc}")
        out.append(np.sort(rng.choice(idx, size=ipc, replace=False)))
    return np.concatenate(out)


def select_herding(features: np.ndarray, labels: np.ndarray, ipc: int) -> np.ndarray:
    """Greedy picks whose running mean best approaches the class mean.

    At step k the candidate minimizing ||mu_c - mean(chosen + candidate)||
    joins the selection.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] == 0:
        raise SelectionError(f"features must be N x d with d >= 1, got {features.shape}")
    out = []
    for c, idx in _per_class(labels):
        if len(idx) == 0:
            raise SelectionError(f"class {c} is empty")
        if len(idx) < ipc:
            raise SelectionError(f"class {c} has {len(idx)} examples < ipc {ipc}")
        f = features[idx]
        mu = f.mean(axis=0)
        chosen: list[int] = []
        running = np.zeros_like(mu)
        remaining = np.ones(len(idx), dtype=bool)
        for k in range(1, ipc + 1):
            cand = (running + f) / k                       # mean if candidate joined
            d = np.linalg.norm(cand - mu, axis=1)
            d[~remaining] = np.inf
            pick = int(np.argmin(d))                       # argmin takes first on ties
            chosen.append(pick)
            remaining[pick] = False
            running = running + f[pick]
        out.append(idx[np.array(chosen)])
    return np.concatenate(out)


def select_kcenter(features: np.ndarray, labels: np.ndarray, ipc: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest-point traversal, seeded at the point nearest the class mean.

    The seed is the first selected point; `seed` is accepted for signature parity
    but the rule is deterministic.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] == 0:
        raise SelectionError(f"features must be N x d with d >= 1, got {features.shape}")
    out = []
    for c, idx in _per_class(labels):
        if len(idx) == 0:
            raise SelectionError(f"class {c} is empty")
        if len(idx) < ipc:
            raise SelectionError(f"class {c} has {len(idx)} examples < ipc {ipc}")
        f = features[idx]
        mu = f.mean(axis=0)
        first = int(np.argmin(np.linalg.norm(f - mu, axis=1)))
        chosen = [first]
        dist = np.linalg.norm(f - f[first], axis=1)
        dist[first] = -np.inf
        while len(chosen) < ipc:
            nxt = int(np.argmax(dist))
            chosen.append(nxt)
            dist = np.minimum(dist, np.linalg.norm(f - f[nxt], axis=1))
            dist[nxt] = -np.inf
        out.append(idx[np.array(chosen)])
    return np.concatenate(out)


def count_forgetting_events(correct: np.ndarray) -> np.ndarray:
    """Events per example: correct -> incorrect transitions across epoch ends.

    `correct` is an epochs x N boolean matrix.
    """
    correct = np.asarray(correct, dtype=bool)
    if correct.ndim != 2 or correct.shape[0] < 2:
        raise SelectionError("need at least 2 epoch evaluations to observe transitions")
    return (correct[:-1] & ~correct[1:]).sum(axis=0)


def train_proxy(ds: LabeledDataset, spec: ModelSpec | None = None, epochs: int = 10,
                lr: float = 0.05, seed: int = 0, record_correct: bool = False):
    """Train the desk-scale proxy model with full-batch sgd on cross-entropy.

    Returns the final state, or (state, epochs x N correctness matrix).
    """
    spec = spec or ModelSpec(
        family="convnet", depth=2, width=32,
        input_shape=tuple(ds.images.shape[1:]), classes=ds.classes,
    )
    state = M.init_model(spec, seed=seed)
    onehot = np.eye(spec.classes, dtype=np.float32)[ds.labels]
    history = []
    for _ in range(epochs):
        t = Tape()
        pv = M.params_as_leaves(t, state)
        _, logits = M.build_forward(t, spec, pv, t.const(ds.images))
        loss = T.cross_entropy(logits, t.const(onehot))
        grads = T.backward(loss, pv)
        state = T.sgd_step(state, grads, lr)
        if record_correct:
            history.append(M.predict(state, ds.images) == ds.labels)
    if record_correct:
        return state, np.stack(history)
    return state


def select_forgetting(ds: LabeledDataset, ipc: int, epochs: int = 10, seed: int = 0,
                      spec: ModelSpec | None = None, lr: float = 0.05) -> np.ndarray:
    """Keep the ipc most-forgotten examples per class."""
    if epochs < 2:
        raise SelectionError("epochs must be >= 2 to observe forgetting transitions")
    _, correct = train_proxy(ds, spec=spec, epochs=epochs, lr=lr, seed=seed,
                             record_correct=True)
    events = count_forgetting_events(correct)
    out = []
    for c, idx in _per_class(ds.labels):
        if len(idx) < ipc:
            raise SelectionError(f"class {c} has {len(idx)} examples < ipc {ipc}")
        order = np.lexsort((idx, -events[idx]))   # events desc, then lowest index
        out.append(idx[order[:ipc]])
    return np.concatenate(out)


def extractor_features(ds: LabeledDataset, state: ModelState, tap: int | None = None) -> np.ndarray:
    """Flattened tap-layer embeddings of every example, batched for memory."""
    feats = []
    for i in range(0, len(ds.images), 256):
        f, _ = M.forward_split(state, ds.images[i : i + 256], tap=tap)
        feats.append(f.reshape(f.shape[0], -1))
    return np.concatenate(feats)
