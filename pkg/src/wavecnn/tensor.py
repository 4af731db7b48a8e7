"""Dense array helpers, shape checks, and the seeded random source.

Every module in the package shares two layout conventions:

    activations   [batch, time, channels]
    conv kernels  [receptive_field, in_channels, out_channels]

Keeping the time axis in the middle leaves it contiguously strided for the
convolution inner loops and avoids transposition bugs between layers.

Numeric precision is dual: float32 for training, float64 for numerical
gradient checks (finite differences are unreliable in 32-bit).
"""

from __future__ import annotations

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64

# Output finiteness assertions on every public op. Leave enabled; the cost is
# one min/max pass per op output.
finite_checks = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_shape(dims) -> tuple:
    """Validate extents (each >= 1, integral) and return them as a tuple."""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ValueError("shape must have at least one extent")
    for d in dims:
        if d < 1:
            raise ValueError(f"shape {dims} has extent {d} < 1")
    return dims


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    """Assert arr is all-finite; NaN/Inf is a hard error."""
    if finite_checks and arr.size:
        lo, hi = np.min(arr), np.max(arr)
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise NonFiniteError(f"{name}: non-finite values (min={lo}, max={hi})")
    return arr


ELEMENTWISE_KINDS = ("add", "sub", "mul", "scale", "max_with_zero")
REDUCE_KINDS = ("sum", "mean", "max_with_argmax")


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise(kind: str, a: np.ndarray, b=None) -> np.ndarray:
    """Elementwise op on equal-shaped tensors (or tensor with scalar).

    Kinds: add, sub, mul (tensor or scalar b), scale (scalar b),
    max_with_zero (unary).
    """
    a = np.asarray(a)
    if kind == "max_with_zero":
        out = np.maximum(a, 0)
    elif kind == "scale":
        if b is None or np.ndim(b) != 0:
            raise ValueError("scale requires a scalar operand")
        out = a * b
    elif kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{kind} requires a second operand")
        b = np.asarray(b)
        if b.ndim != 0:
            _require_same_shape(a, b)
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[kind](a, b)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return check_finite(f"elementwise[{kind}]", out)


def reduce(kind: str, t: np.ndarray, axis: int):
    """Reduce one axis of t. The axis is removed from the result shape.

    sum/mean return the reduced tensor; max_with_argmax returns
    (values, first-maximal indices).
    """
    t = np.asarray(t)
    if not 0 <= axis < t.ndim:
        raise ValueError(f"axis {axis} out of range for rank {t.ndim}")
    if kind == "sum":
        return check_finite("reduce[sum]", np.sum(t, axis=axis))
    if kind == "mean":
        return check_finite("reduce[mean]", np.mean(t, axis=axis))
    if kind == "max_with_argmax":
        idx = np.argmax(t, axis=axis)  # np.argmax keeps the first maximum
        vals = np.max(t, axis=axis)
        return check_finite("reduce[max]", vals), idx
    raise ValueError(f"unknown reduce kind {kind!r}")


class RandomSource:
    """Deterministic random stream.

    Backed by numpy's PCG64 generator; normal variates come from numpy's
    ziggurat `standard_normal`. Identical seeds (and derivation tags) yield
    identical value streams across runs.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _key=None):
        self.seed = int(seed)
        self._key = tuple(_key) if _key is not None else (self.seed,)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._key)))

    def derive(self, *tags: int) -> "RandomSource":
        """Independent child stream addressed by integer tags."""
        return RandomSource(self.seed, _key=self._key + tuple(int(t) for t in tags))

    def uniform(self, low: float, high: float, shape=None, dtype=TRAIN_DTYPE) -> np.ndarray:
        return np.asarray(self._gen.uniform(low, high, size=shape)).astype(dtype, copy=False)

    def normal(self, mean: float = 0.0, std: float = 1.0, shape=None, dtype=TRAIN_DTYPE) -> np.ndarray:
        out = mean + std * self._gen.standard_normal(size=shape)
        return np.asarray(out).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state
