"""Dense float64 tensors and a counter-based random stream.

Tensors are plain ``numpy.ndarray`` values of dtype float64. The helpers here
enforce the small contract the rest of the package relies on: explicit shape
checks with readable errors, and finite results.
"""

import math
import zlib

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

Tensor = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


def as_tensor(value) -> Tensor:
    return np.asarray(value, dtype=np.float64)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "matmul result")


def outer_product(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer product needs two vectors, got shapes {u.shape} and {v.shape}")
    return check_finite(np.outer(u, v), "outer product")


def heaviside(a) -> Tensor:
    # 1 at zero: the indicator of an active rectifier unit includes the boundary
    return (as_tensor(a) >= 0.0).astype(np.float64)


_UNARY = {
    "negate": np.negative,
    "relu": lambda a: np.maximum(a, 0.0),
    "heaviside": heaviside,
    "exp": np.exp,
    "log": np.log,
}

_BINARY = {
    "add": np.add,
    "hadamard": np.multiply,
}

ELEMENTWISE_OPS = tuple(sorted({*_UNARY, *_BINARY, "scale"}))


def elementwise(op: str, *operands, c: float | None = None) -> Tensor:
    """Apply ``op`` coordinatewise.

    ``scale`` multiplies its single operand by the constant ``c``; ``add`` and
    ``hadamard`` take two operands of identical shape; the rest are unary.
    """
    xs = [as_tensor(x) for x in operands]
    if op == "scale":
        if len(xs) != 1 or c is None:
            raise ValueError("scale takes one operand and a constant c")
        out = xs[0] * float(c)
    elif op in _UNARY:
        if len(xs) != 1:
            raise ValueError(f"{op} takes one operand, got {len(xs)}")
        if op == "log" and np.any(xs[0] <= 0.0):
            raise DomainError("log of a non-positive value")
        out = _UNARY[op](xs[0])
    elif op in _BINARY:
        if len(xs) != 2:
            raise ValueError(f"{op} takes two operands, got {len(xs)}")
        if xs[0].shape != xs[1].shape:
            raise ShapeError(f"{op}: shape mismatch {xs[0].shape} vs {xs[1].shape}")
        out = _BINARY[op](xs[0], xs[1])
    else:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")
    return check_finite(np.asarray(out, dtype=np.float64), f"{op} result")


def _stable_hash(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """Seeded Philox stream.

    Philox is counter based, so child streams made with :meth:`spawn` are
    independent of each other and of the parent, and identical for identical
    (seed, label path) pairs regardless of how much the parent has been used.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._path = tuple(_path)
        sequence = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self._path])
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def spawn(self, label: str) -> "Rng":
        return Rng(self.seed, self._path + (_stable_hash(label),))

    def normal(self, size=None, loc=0.0, scale=1.0) -> Tensor:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> Tensor:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size=None, p=None, replace=True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def gaussian_sample(rng: Rng, mean, stddev: float) -> Tensor:
    mean = as_tensor(mean)
    if stddev < 0:
        raise DomainError(f"stddev must be positive, got {stddev}")
    if stddev == 0:
        return mean.copy()
    return mean + stddev * rng.normal(size=mean.shape)


def gaussian_log_density(x, mean, stddev: float) -> float:
    """Log density of the isotropic normal N(mean, stddev^2 I) at x."""
    x, mean = as_tensor(x), as_tensor(mean)
    if x.shape != mean.shape:
        raise ShapeError(f"x has shape {x.shape} but mean has shape {mean.shape}")
    if stddev <= 0:
        raise DomainError(f"stddev must be positive, got {stddev}")
    d = x.size
    z = (x - mean) / stddev
    return float(-0.5 * np.sum(z * z) - d * (math.log(stddev) + 0.5 * LOG_2PI))
