"""Reverse-mode automatic differentiation on an append-only tape.

All values are float32 numpy arrays. Every primitive appends one node
(op name, input node ids, attributes, result) to a Tape. Backward passes
are built out of the same primitives and therefore land on the tape as
ordinary nodes, which is what makes scalars of gradients differentiable
again (double backprop for gradient matching).

Stop-gradient ops (relu_mask, max_pool_mask, detached_rowmax) have no
VJP by definition: masks are piecewise constant, and the detached row
max is only used for shift-invariant softmax stabilization.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable

import numpy as np

F32 = np.float32

# reductions larger than this accumulate in float64 before casting back
_ACCUM_THRESHOLD = 4096


class TapeError(Exception):
    pass


class ShapeError(TapeError):
    pass


class NonFiniteError(TapeError):
    pass


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array (0-d stays 0-d)."""
    return np.asarray(x, dtype=F32, order="C")


class Node:
    __slots__ = ("op", "inputs", "attrs", "value", "name")

    def __init__(self, op, inputs, attrs, value, name=None):
        self.op = op
        self.inputs = inputs      # tuple of node ids, strictly smaller than own id
        self.attrs = attrs        # static op parameters (axes, padding, ...)
        self.value = value        # float32 ndarray result
        self.name = name          # set for leaves only


class Var:
    """Handle to one tape node. Cheap to copy; all state lives on the tape."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def name(self):
        return self.tape.nodes[self.nid].name

    def item(self) -> float:
        return float(self.value)

    # -- operator sugar; scalars and arrays become constants -------------
    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Var(nid={self.nid}, op={self.tape.nodes[self.nid].op}, shape={self.shape})"


class Tape:
    """Append-only computation record. Node ids are a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[str, int] = {}

    def _append(self, op, inputs, attrs, value, name=None) -> Var:
        value = as_f32(value)
        nid = len(self.nodes)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value produced by node {nid} ({op})")
        self.nodes.append(Node(op, tuple(inputs), attrs, value, name))
        return Var(self, nid)

    def leaf(self, name: str, value) -> Var:
        if name in self._leaf_ids:
            raise TapeError(f"duplicate leaf name {name!r}")
        v = self._append("leaf", (), {}, value, name=name)
        self._leaf_ids[name] = v.nid
        return v

    def const(self, value) -> Var:
        return self._append("const", (), {}, value)

    def leaf_var(self, name: str) -> Var:
        return Var(self, self._leaf_ids[name])

    @property
    def leaves(self) -> dict[str, Var]:
        return {k: Var(self, i) for k, i in self._leaf_ids.items()}

    def replay(self, bindings: dict[str, np.ndarray]) -> None:
        """Recompute every node value from new leaf bindings, in place.

        Deterministic: identical bindings reproduce identical values bit
        for bit. Raises ShapeError / NonFiniteError naming the offending
        node id.
        """
        unknown = set(bindings) - set(self._leaf_ids)
        if unknown:
            raise TapeError(f"bindings for unknown leaves: {sorted(unknown)}")
        missing = set(self._leaf_ids) - set(bindings)
        if missing:
            raise TapeError(f"missing bindings for leaves: {sorted(missing)}")
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                new = as_f32(bindings[node.name])
                if new.shape != node.value.shape:
                    raise ShapeError(
                        f"leaf {node.name!r} (node {nid}): bound shape {new.shape} "
                        f"!= recorded shape {node.value.shape}"
                    )
                node.value = new
            elif node.op == "const":
                pass
            else:
                args = [self.nodes[i].value for i in node.inputs]
                try:
                    with np.errstate(all="ignore"):
                        node.value = as_f32(_EVAL[node.op](args, node.attrs))
                except ValueError as e:
                    raise ShapeError(f"node {nid} ({node.op}): {e}") from e
            if not np.isfinite(node.value).all():
                raise NonFiniteError(f"non-finite value at node {nid} ({node.op})")


def forward(tape: Tape, leaves: dict[str, np.ndarray], root: Var) -> np.ndarray:
    """Replay the tape on new leaf values and return the root's value."""
    if root.tape is not tape:
        raise TapeError("root does not belong to this tape")
    tape.replay(leaves)
    return root.value.copy()


# ---------------------------------------------------------------------------
# kernels (pure numpy evaluation, float32 in / float32 out)
# ---------------------------------------------------------------------------

def _sum_kernel(x, axis, keepdims):
    reduced = int(np.prod([x.shape[a] for a in axis])) if axis else 1
    if reduced > _ACCUM_THRESHOLD:
        return x.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(F32)
    return x.sum(axis=axis, keepdims=keepdims)


def _matmul_kernel(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.shape[1] > _ACCUM_THRESHOLD:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(F32)
    return a @ b


def _conv2d_kernel(x, w, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    co, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv2d channel mismatch: x has {cin}, w has {cin2}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - kh + 1
    wo = wd + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty: {x.shape} with kernel {w.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = _matmul_kernel(np.ascontiguousarray(cols), w.reshape(co, -1).T.copy())
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)


def _pool_blocks(x, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"pool: spatial dims {h}x{w} not divisible by {k}")
    return x.reshape(n, c, h // k, k, w // k, k)


def _avg_pool_kernel(x, k):
    return _pool_blocks(x, k).mean(axis=(3, 5))


def _max_pool_kernel(x, k):
    return _pool_blocks(x, k).max(axis=(3, 5))


def _max_pool_mask_kernel(x, k):
    # one-hot argmax per block, first index on ties
    n, c, h, w = x.shape
    blocks = _pool_blocks(x, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=-1)
    mask = np.zeros_like(blocks)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    return (
        mask.reshape(n, c, h // k, w // k, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def _repeat_upsample_kernel(x, k):
    return np.repeat(np.repeat(x, k, axis=2), k, axis=3)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


_EVAL = {
    "add": lambda a, at: a[0] + a[1],
    "sub": lambda a, at: a[0] - a[1],
    "mul": lambda a, at: a[0] * a[1],
    "div": lambda a, at: a[0] / a[1],
    "neg": lambda a, at: -a[0],
    "matmul": lambda a, at: _matmul_kernel(a[0], a[1]),
    "permute": lambda a, at: a[0].transpose(at["axes"]),
    "conv2d": lambda a, at: _conv2d_kernel(a[0], a[1], at["pad"]),
    "flip2": lambda a, at: a[0][..., ::-1, ::-1],
    "relu": lambda a, at: np.maximum(a[0], 0.0),
    "relu_mask": lambda a, at: (a[0] > 0).astype(F32),
    "sigmoid": lambda a, at: 1.0 / (1.0 + np.exp(-a[0])),
    "exp": lambda a, at: np.exp(a[0]),
    "log": lambda a, at: np.log(a[0]),
    "powc": lambda a, at: np.power(a[0], at["c"]),
    "avg_pool2d": lambda a, at: _avg_pool_kernel(a[0], at["k"]),
    "max_pool2d": lambda a, at: _max_pool_kernel(a[0], at["k"]),
    "max_pool_mask": lambda a, at: _max_pool_mask_kernel(a[0], at["k"]),
    "repeat_upsample": lambda a, at: _repeat_upsample_kernel(a[0], at["k"]),
    "detached_rowmax": lambda a, at: a[0].max(axis=at["axis"], keepdims=True),
    "reshape": lambda a, at: a[0].reshape(at["shape"]),
    "broadcast_to": lambda a, at: np.broadcast_to(a[0], at["shape"]).copy(),
    "sum": lambda a, at: _sum_kernel(a[0], at["axis"], at["keepdims"]),
    "concat": lambda a, at: np.concatenate(a, axis=at["axis"]),
    "slice_axis": lambda a, at: np.take(a[0], range(at["start"], at["stop"]), axis=at["axis"]),
}

# ops without a VJP entry are gradient barriers by definition
STOP_GRADIENT_OPS = ("relu_mask", "max_pool_mask", "detached_rowmax")


# ---------------------------------------------------------------------------
# primitive constructors
# ---------------------------------------------------------------------------

def _same_tape(*vars_):
    t = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not t:
            raise TapeError("operands live on different tapes")
    return t


def _make(op, ins, attrs=None):
    t = _same_tape(*ins)
    attrs = attrs or {}
    args = [v.value for v in ins]
    try:
        with np.errstate(all="ignore"):
            out = _EVAL[op](args, attrs)
    except ValueError as e:
        raise ShapeError(f"{op}: {e}") from e
    return t._append(op, [v.nid for v in ins], attrs, out)


def add(a: Var, b: Var) -> Var:
    return _make("add", (a, b))


def sub(a: Var, b: Var) -> Var:
    return _make("sub", (a, b))


def mul(a: Var, b: Var) -> Var:
    return _make("mul", (a, b))


def div(a: Var, b: Var) -> Var:
    return _make("div", (a, b))


def neg(a: Var) -> Var:
    return _make("neg", (a,))


def matmul(a: Var, b: Var) -> Var:
    return _make("matmul", (a, b))


def permute(a: Var, axes) -> Var:
    return _make("permute", (a,), {"axes": tuple(axes)})


def conv2d(x: Var, w: Var, pad: int = 0) -> Var:
    kh = w.shape[2]
    if pad < 0 or pad > kh - 1:
        raise ShapeError(f"conv2d padding {pad} outside [0, {kh - 1}]")
    return _make("conv2d", (x, w), {"pad": int(pad)})


def flip2(a: Var) -> Var:
    return _make("flip2", (a,))


def relu(a: Var) -> Var:
    return _make("relu", (a,))


def relu_mask(a: Var) -> Var:
    return _make("relu_mask", (a,))


def sigmoid(a: Var) -> Var:
    return _make("sigmoid", (a,))


def exp(a: Var) -> Var:
    return _make("exp", (a,))


def log(a: Var) -> Var:
    return _make("log", (a,))


def powc(a: Var, c: float) -> Var:
    return _make("powc", (a,), {"c": float(c)})


def avg_pool2d(a: Var, k: int = 2) -> Var:
    return _make("avg_pool2d", (a,), {"k": int(k)})


def max_pool2d(a: Var, k: int = 2) -> Var:
    return _make("max_pool2d", (a,), {"k": int(k)})


def max_pool_mask(a: Var, k: int = 2) -> Var:
    return _make("max_pool_mask", (a,), {"k": int(k)})


def repeat_upsample(a: Var, k: int = 2) -> Var:
    return _make("repeat_upsample", (a,), {"k": int(k)})


def detached_rowmax(a: Var, axis: int = -1) -> Var:
    return _make("detached_rowmax", (a,), {"axis": int(axis)})


def reshape(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    return _make("reshape", (a,), {"shape": shape})


def broadcast_to(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    return _make("broadcast_to", (a,), {"shape": shape})


def reduce_sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    axis_n = _norm_axis(axis, a.value.ndim)
    return _make("sum", (a,), {"axis": axis_n, "keepdims": bool(keepdims)})


def reduce_mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    axis_n = _norm_axis(axis, a.value.ndim)
    n = int(np.prod([a.shape[i] for i in axis_n])) if axis_n else 1
    s = reduce_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, s.tape.const(1.0 / max(n, 1)))


def concat(vars_: Iterable[Var], axis: int = 0) -> Var:
    vars_ = list(vars_)
    return _make("concat", tuple(vars_), {"axis": int(axis)})


def slice_axis(a: Var, axis: int, start: int, stop: int) -> Var:
    return _make("slice_axis", (a,), {"axis": int(axis), "start": int(start), "stop": int(stop)})


# composites -----------------------------------------------------------------

def softmax(a: Var, axis: int = -1) -> Var:
    e = exp(sub(a, detached_rowmax(a, axis)))
    return div(e, reduce_sum(e, axis=axis, keepdims=True))


def log_softmax(a: Var, axis: int = -1) -> Var:
    xm = sub(a, detached_rowmax(a, axis))
    return sub(xm, log(reduce_sum(exp(xm), axis=axis, keepdims=True)))


def instance_norm(x: Var, eps: float = 1e-5) -> Var:
    """Normalize each (sample, channel) map over its spatial extent."""
    mu = reduce_mean(x, axis=(2, 3), keepdims=True)
    xc = sub(x, broadcast_to(mu, x.shape))
    var = reduce_mean(mul(xc, xc), axis=(2, 3), keepdims=True)
    inv = powc(add(var, x.tape.const(eps)), -0.5)
    return mul(xc, broadcast_to(inv, x.shape))


def mse(a: Var, b: Var) -> Var:
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def cross_entropy(logits: Var, onehot: Var) -> Var:
    """Mean cross-entropy between softmax(logits) rows and one-hot targets."""
    return neg(reduce_mean(reduce_sum(mul(onehot, log_softmax(logits, axis=-1)), axis=-1)))


# ---------------------------------------------------------------------------
# backward: VJP builders expressed with the primitives above
# ---------------------------------------------------------------------------

def _unbroadcast(g: Var, target_shape: tuple) -> Var:
    """Sum g down to target_shape, inverting numpy broadcasting."""
    gs = g.shape
    if gs == target_shape:
        return g
    extra = len(gs) - len(target_shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, d in enumerate(target_shape) if d == 1 and gs[i + extra] != 1
    )
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=False)
    if g.shape != target_shape:
        g = reshape(g, target_shape)
    return g


def _vjp_add(t, node, ins, out, g):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape)]


def _vjp_sub(t, node, ins, out, g):
    return [_unbroadcast(g, ins[0].shape), _unbroadcast(neg(g), ins[1].shape)]


def _vjp_mul(t, node, ins, out, g):
    a, b = ins
    return [_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)]


def _vjp_div(t, node, ins, out, g):
    a, b = ins
    ga = div(g, b)
    gb = neg(div(mul(g, a), mul(b, b)))
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _vjp_neg(t, node, ins, out, g):
    return [neg(g)]


def _vjp_matmul(t, node, ins, out, g):
    a, b = ins
    return [matmul(g, permute(b, (1, 0))), matmul(permute(a, (1, 0)), g)]


def _vjp_permute(t, node, ins, out, g):
    axes = node.attrs["axes"]
    inv = tuple(np.argsort(axes))
    return [permute(g, inv)]


def _vjp_conv2d(t, node, ins, out, g):
    x, w = ins
    pad = node.attrs["pad"]
    kh = w.shape[2]
    w_swap = permute(flip2(w), (1, 0, 2, 3))
    gx = conv2d(g, w_swap, pad=kh - 1 - pad)
    gw = permute(
        conv2d(permute(x, (1, 0, 2, 3)), permute(g, (1, 0, 2, 3)), pad=pad),
        (1, 0, 2, 3),
    )
    return [gx, gw]


def _vjp_flip2(t, node, ins, out, g):
    return [flip2(g)]


def _vjp_relu(t, node, ins, out, g):
    return [mul(g, relu_mask(ins[0]))]


def _vjp_sigmoid(t, node, ins, out, g):
    one = t.const(1.0)
    return [mul(g, mul(out, sub(one, out)))]


def _vjp_exp(t, node, ins, out, g):
    return [mul(g, out)]


def _vjp_log(t, node, ins, out, g):
    return [div(g, ins[0])]


def _vjp_powc(t, node, ins, out, g):
    c = node.attrs["c"]
    return [mul(g, mul(t.const(c), powc(ins[0], c - 1.0)))]


def _vjp_avg_pool2d(t, node, ins, out, g):
    k = node.attrs["k"]
    return [mul(repeat_upsample(g, k), t.const(1.0 / (k * k)))]


def _vjp_repeat_upsample(t, node, ins, out, g):
    k = node.attrs["k"]
    return [mul(avg_pool2d(g, k), t.const(float(k * k)))]


def _vjp_max_pool2d(t, node, ins, out, g):
    # argmax routing frozen as a mask (subgradient; constant on re-differentiation)
    k = node.attrs["k"]
    return [mul(repeat_upsample(g, k), max_pool_mask(ins[0], k))]


def _vjp_reshape(t, node, ins, out, g):
    return [reshape(g, ins[0].shape)]


def _vjp_broadcast_to(t, node, ins, out, g):
    return [_unbroadcast(g, ins[0].shape)]


def _vjp_sum(t, node, ins, out, g):
    x = ins[0]
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if not keepdims and x.shape:
        kshape = list(x.shape)
        for a in axis:
            kshape[a] = 1
        g = reshape(g, kshape)
    return [broadcast_to(g, x.shape)]


def _vjp_concat(t, node, ins, out, g):
    axis = node.attrs["axis"]
    grads, off = [], 0
    for v in ins:
        d = v.shape[axis]
        grads.append(slice_axis(g, axis, off, off + d))
        off += d
    return grads


def _vjp_slice_axis(t, node, ins, out, g):
    x = ins[0]
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    pieces = []
    if start > 0:
        shp = list(x.shape)
        shp[axis] = start
        pieces.append(t.const(np.zeros(shp, dtype=F32)))
    pieces.append(g)
    if stop < x.shape[axis]:
        shp = list(x.shape)
        shp[axis] = x.shape[axis] - stop
        pieces.append(t.const(np.zeros(shp, dtype=F32)))
    return [concat(pieces, axis=axis) if len(pieces) > 1 else pieces[0]]


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": _vjp_neg,
    "matmul": _vjp_matmul,
    "permute": _vjp_permute,
    "conv2d": _vjp_conv2d,
    "flip2": _vjp_flip2,
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "powc": _vjp_powc,
    "avg_pool2d": _vjp_avg_pool2d,
    "repeat_upsample": _vjp_repeat_upsample,
    "max_pool2d": _vjp_max_pool2d,
    "reshape": _vjp_reshape,
    "broadcast_to": _vjp_broadcast_to,
    "sum": _vjp_sum,
    "concat": _vjp_concat,
    "slice_axis": _vjp_slice_axis,
}


def backward(root: Var, wrt) -> dict[str, Var]:
    """Gradients of a scalar root with respect to named leaves.

    The returned map has one entry per requested leaf; leaves that do not
    influence the root map to zero tensors. All gradient computations are
    recorded on the same tape, so any scalar built from the results can be
    differentiated again.
    """
    tape = root.tape
    if root.value.shape != ():
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    wrt_vars = _resolve_wrt(tape, wrt)

    adjoint: dict[int, Var] = {root.nid: tape.const(1.0)}
    for nid in range(root.nid, -1, -1):
        g = adjoint.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        vjp = _VJP.get(node.op)
        if vjp is None:
            continue  # leaf, const, or stop-gradient op
        ins = [Var(tape, i) for i in node.inputs]
        gs = vjp(tape, node, ins, Var(tape, nid), g)
        for inp, gi in zip(node.inputs, gs):
            if gi is None:
                continue
            if gi.shape != tape.nodes[inp].value.shape:
                raise ShapeError(
                    f"VJP of {node.op} (node {nid}) produced shape {gi.shape} "
                    f"for input of shape {tape.nodes[inp].value.shape}"
                )
            prev = adjoint.get(inp)
            adjoint[inp] = gi if prev is None else add(prev, gi)

    out: dict[str, Var] = {}
    for name, v in wrt_vars.items():
        g = adjoint.get(v.nid)
        if g is None:
            g = tape.const(np.zeros(v.shape, dtype=F32))
        out[name] = g
    return out


def _resolve_wrt(tape: Tape, wrt) -> dict[str, Var]:
    if isinstance(wrt, dict):
        items = wrt.values()
    else:
        items = wrt
    resolved = {}
    for w in items:
        if isinstance(w, str):
            if w not in tape._leaf_ids:
                raise TapeError(f"unknown leaf {w!r}")
            resolved[w] = tape.leaf_var(w)
        else:
            node = tape.nodes[w.nid]
            if node.op != "leaf":
                raise TapeError("backward wrt targets must be leaves")
            resolved[node.name] = w
    return resolved


def grad_of_grad(root: Var, inner_wrt, outer_fn, outer_wrt) -> dict[str, Var]:
    """Differentiate a scalar function of inner gradients (double backprop).

    inner gradients ∂root/∂(inner_wrt) are built on the tape, outer_fn maps
    that GradMap to a scalar Var, and the result is the gradient of that
    scalar with respect to outer_wrt.
    """
    inner = backward(root, inner_wrt)
    outer = outer_fn(inner)
    if not isinstance(outer, Var) or outer.value.shape != ():
        raise ShapeError("outer_fn must return a scalar Var")
    return backward(outer, outer_wrt)


def grad_values(grads: dict[str, Var]) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in grads.items()}


def sgd_step(state, grads: dict, lr: float):
    """One plain gradient-descent step: θ ← θ − lr·∇θ.

    `state` is any dataclass with a `params: dict[str, ndarray]` field
    (or a bare dict of arrays). Every parameter must have a gradient.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = state.params if hasattr(state, "params") else state
    missing = set(params) - set(grads)
    if missing:
        raise ValueError(f"grads missing for parameters: {sorted(missing)}")
    new = {}
    for k, p in params.items():
        g = grads[k]
        g = g.value if isinstance(g, Var) else as_f32(g)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {k!r}")
        new[k] = (p - F32(lr) * g).astype(F32)
    if hasattr(state, "params"):
        return dataclasses.replace(state, params=new)
    return new
