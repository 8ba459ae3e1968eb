"""Dense float64 kernels, a splittable counter-based PRNG and a finite-difference checker.

Tensors are plain ``numpy.ndarray`` objects in float64; the helpers here add
the shape checks and numerically stable formulations the rest of the package
relies on.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, ParameterError

__all__ = [
    "PrngStream",
    "as_tensor",
    "check_finite",
    "matmul",
    "softmax_axis",
    "log_sigmoid",
    "sigmoid",
    "softplus",
    "l2_normalize",
    "l2_normalize_backward",
    "finite_diff_grad",
]


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contains non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def softmax_axis(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    if x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softplus(x):
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    """log(sigmoid(x)) computed as -softplus(-x); finite for any finite input."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def l2_normalize(v, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    if eps <= 0:
        raise ParameterError("eps must be positive")
    v = as_tensor(v)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, eps)


def l2_normalize_backward(v, grad_out, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    """Vector-Jacobian product of :func:`l2_normalize` at ``v``."""
    v = as_tensor(v)
    grad_out = as_tensor(grad_out)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    safe = np.maximum(norm, eps)
    y = v / safe
    proj = np.sum(y * grad_out, axis=axis, keepdims=True)
    # below eps the map is a plain scaling by 1/eps
    return np.where(norm >= eps, (grad_out - y * proj) / safe, grad_out / eps)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ParameterError("step h must be positive")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"f is not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _derive_key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class PrngStream:
    """Counter-based random stream (Philox-4x64) keyed by a seed and a path of sub-stream ids.

    Streams with the same ``(seed, path)`` reproduce the same draws on any
    platform; ``child`` derives an independent stream without consuming
    draws from the parent.
    """

    def __init__(self, seed: int, *path, counter: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        bitgen = np.random.Philox(key=_derive_key(self.seed, self.path))
        if counter:
            bitgen.advance(counter)
        self.counter = int(counter)
        self._gen = np.random.Generator(bitgen)

    def child(self, *path) -> "PrngStream":
        return PrngStream(self.seed, *self.path, *path)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def raw(self, n: int) -> np.ndarray:
        """``n`` raw 64-bit words."""
        return self._gen.integers(0, 2**64, size=n, dtype=np.uint64)

    def __repr__(self):
        return f"PrngStream(seed={self.seed}, path={self.path!r})"
