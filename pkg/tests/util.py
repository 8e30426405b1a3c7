"""Shared test helpers: independent finite-difference oracles."""

import numpy as np


def numeric_grad(f, x, h=1e-3):
    """Central finite differences of a scalar function at x, elementwise."""
    x = np.asarray(x, dtype=np.float32)
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_close_rel(got, want, rtol=1e-3, atol=1e-4, msg=""):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), np.abs(got))
    err = np.abs(got - want)
    ok = err <= rtol * denom + atol
    assert ok.all(), (
        f"{msg} max abs err {err.max():.3e}, max rel err "
        f"{(err / np.maximum(denom, 1e-12)).max():.3e}"
    )


class ref_ops:
    """Float64 reference implementations, independent of the tape kernels."""

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    @staticmethod
    def exp(x):
        return np.exp(x)

    @staticmethod
    def log(x):
        return np.log(x)

    @staticmethod
    def neg(x):
        return -x

    @staticmethod
    def powc(x, c):
        return np.power(x, c)

    @staticmethod
    def softmax(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def log_softmax(x):
        xm = x - x.max(axis=-1, keepdims=True)
        return xm - np.log(np.exp(xm).sum(axis=-1, keepdims=True))

    @staticmethod
    def instance_norm(x, eps=1e-5):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        return (x - mu) / np.sqrt(var + eps)

    @staticmethod
    def avg_pool(x, k):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    @staticmethod
    def max_pool(x, k):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))

    @staticmethod
    def upsample(x, k):
        return np.repeat(np.repeat(x, k, axis=2), k, axis=3)

    @staticmethod
    def conv2d(x, w, pad):
        n, cin, h, wd = x.shape
        co, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
        out = np.zeros((n, co, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i : i + kh, j : j + kw]
                out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w)
        return out
