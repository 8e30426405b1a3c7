"""Small model zoo with an explicit feature/classifier split.

Every architecture factors as g = classifier ∘ feature-extractor. The
extractor emits one intermediate output per layer ("tap"); the classifier
is a single linear map over the flattened final-layer features, so stored
feature labels of that shape can be fed straight into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from drupi import tape as T
from drupi.tape import ShapeError, Tape, Var

FAMILIES = ("convnet", "mlp", "lenet")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "convnet"
    depth: int = 2
    width: int = 32
    input_shape: tuple = (1, 16, 16)   # Ch, H, W
    classes: int = 3

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (channels, height, width)")
        if self.family in ("convnet", "lenet"):
            ch, h, w = self.input_shape
            if h % (2 ** self.depth) or w % (2 ** self.depth):
                raise ValueError(
                    f"{h}x{w} input not divisible by 2^{self.depth} pooling stages"
                )
        return self

    def feature_shape(self, tap: int | None = None) -> tuple:
        """Shape of the extractor output at layer `tap` (default: final layer)."""
        tap = self.depth if tap is None else tap
        if not 1 <= tap <= self.depth:
            raise ValueError(f"tap {tap} outside 1..{self.depth}")
        if self.family == "mlp":
            return (self.width,)
        ch, h, w = self.input_shape
        return (self.width, h // (2 ** tap), w // (2 ** tap))

    def classifier_in_dim(self) -> int:
        return int(np.prod(self.feature_shape(self.depth)))


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    params: dict = field(repr=False)
    seed: int = 0


@dataclass(frozen=True)
class FeatureTap:
    layer: int

    def resolve(self, spec: ModelSpec) -> int:
        if not 1 <= self.layer <= spec.depth:
            raise ValueError(f"tap layer {self.layer} outside 1..{spec.depth}")
        return self.layer


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_model(spec: ModelSpec, seed: int = 0) -> ModelState:
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    ch, h, w = spec.input_shape

    if spec.family in ("convnet", "lenet"):
        cin = ch
        for i in range(1, spec.depth + 1):
            params[f"conv{i}_w"] = _kaiming_uniform(rng, (spec.width, cin, 3, 3), cin * 9)
            params[f"conv{i}_b"] = np.zeros(spec.width, dtype=np.float32)
            cin = spec.width
    else:
        din = ch * h * w
        for i in range(1, spec.depth + 1):
            params[f"fc{i}_w"] = _kaiming_uniform(rng, (din, spec.width), din)
            params[f"fc{i}_b"] = np.zeros(spec.width, dtype=np.float32)
            din = spec.width

    d = spec.classifier_in_dim()
    params["head_w"] = _kaiming_uniform(rng, (d, spec.classes), d)
    params["head_b"] = np.zeros(spec.classes, dtype=np.float32)
    return ModelState(spec=spec, params=params, seed=seed)


def build_forward(tape: Tape, spec: ModelSpec, params: dict[str, Var], x: Var):
    """Record the forward pass; returns (per-layer taps, logits)."""
    taps: list[Var] = []
    if spec.family in ("convnet", "lenet"):
        h = x
        for i in range(1, spec.depth + 1):
            wv, bv = params[f"conv{i}_w"], params[f"conv{i}_b"]
            h = T.conv2d(h, wv, pad=1)
            h = T.add(h, T.reshape(bv, (1, spec.width, 1, 1)))
            if spec.family == "convnet":
                h = T.instance_norm(h)
                h = T.relu(h)
                h = T.avg_pool2d(h, 2)
            else:
                h = T.relu(h)
                h = T.max_pool2d(h, 2)
            taps.append(h)
    else:
        n = x.shape[0]
        h = T.reshape(x, (n, int(np.prod(x.shape[1:]))))
        for i in range(1, spec.depth + 1):
            h = T.relu(T.add(T.matmul(h, params[f"fc{i}_w"]), params[f"fc{i}_b"]))
            taps.append(h)

    flat = T.reshape(taps[-1], (taps[-1].shape[0], spec.classifier_in_dim()))
    logits = T.add(T.matmul(flat, params["head_w"]), params["head_b"])
    return taps, logits


def params_as_consts(tape: Tape, state: ModelState) -> dict[str, Var]:
    return {k: tape.const(v) for k, v in state.params.items()}


def params_as_leaves(tape: Tape, state: ModelState) -> dict[str, Var]:
    return {k: tape.leaf(k, v) for k, v in state.params.items()}


def forward_split(state: ModelState, x: np.ndarray, tap: int | None = None):
    """Run the model; returns (features at tap layer, logits) as arrays."""
    x = T.as_f32(x)
    if x.ndim != 4 and state.spec.family != "mlp":
        raise ShapeError(f"expected N x Ch x H x W input, got shape {x.shape}")
    if tuple(x.shape[1:]) != tuple(state.spec.input_shape):
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])} != spec {tuple(state.spec.input_shape)}"
        )
    tap = state.spec.depth if tap is None else FeatureTap(tap).resolve(state.spec)
    t = Tape()
    pv = params_as_consts(t, state)
    taps, logits = build_forward(t, state.spec, pv, t.const(x))
    return taps[tap - 1].value.copy(), logits.value.copy()


def classify_feature(state: ModelState, f: np.ndarray) -> np.ndarray:
    """Apply only the classifier head to final-layer-shaped features."""
    f = T.as_f32(f)
    feat_shape = state.spec.feature_shape(state.spec.depth)
    if f.ndim == len(feat_shape):
        f = f[None]
    if tuple(f.shape[1:]) != feat_shape:
        raise ShapeError(
            f"feature shape {tuple(f.shape[1:])} != final-layer shape {feat_shape}"
        )
    flat = f.reshape(f.shape[0], -1)
    return (flat @ state.params["head_w"] + state.params["head_b"]).astype(np.float32)


def predict(state: ModelState, x: np.ndarray) -> np.ndarray:
    _, logits = forward_split(state, x)
    return logits.argmax(axis=1)
