"""Dense float32 tensor kernels: matmul, elementwise ops, top-k, init, RNG.

Storage dtype is float32 throughout the library; matrix products accumulate
in float64 and narrow back so results do not depend on BLAS blocking order.
"""

import hashlib
import math

import numpy as np

from .errors import BoundsError, DimensionError, ShapeError

DTYPE = np.float32


def validate_shape(dims) -> tuple[int, ...]:
    """Return ``dims`` as a tuple, rejecting non-positive extents."""
    out = tuple(int(d) for d in dims)
    if len(out) == 0:
        raise ShapeError("shape must have at least one dimension")
    for d in out:
        if d < 1:
            raise ShapeError(f"shape {out} has non-positive extent {d}")
    return out


def element_count(dims) -> int:
    return math.prod(validate_shape(dims))


def astensor(data, dtype=DTYPE) -> np.ndarray:
    return np.asarray(data, dtype=dtype)


def matmul(a, b) -> np.ndarray:
    """Matrix product with float64 accumulation.

    Output is float32 unless either operand is float64 (gradient-check mode),
    in which case float64 is preserved.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    if a.dtype == np.float64 or b.dtype == np.float64:
        return out
    return out.astype(DTYPE)


def elementwise_mul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(
            f"elementwise_mul needs identical shapes, got {a.shape} and {b.shape}"
        )
    return a * b


def top_k_indices(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of a flat tensor.

    Ties break toward the smaller flat index; the result is the first ``k``
    entries of a stable descending sort, so it is fully deterministic.
    """
    values = np.asarray(values)
    if values.ndim != 1:
        raise DimensionError(f"top_k_indices needs a flat tensor, got {values.shape}")
    k = int(k)
    if k < 0 or k > values.shape[0]:
        raise BoundsError(f"k={k} outside [0, {values.shape[0]}]")
    order = np.argsort(-values, kind="stable")
    return order[:k]


def _fans(dims: tuple[int, ...]) -> tuple[int, int]:
    # Dense [m, n]: fan_in=m, fan_out=n. Conv [s1, s2, c, f]: receptive field
    # multiplies both fans, matching the usual convnet convention.
    receptive = math.prod(dims[:-2]) if len(dims) > 2 else 1
    return dims[-2] * receptive, dims[-1] * receptive


def glorot_uniform_init(shape, rng: "Rng") -> np.ndarray:
    """Uniform init on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    dims = validate_shape(shape)
    if len(dims) < 2:
        raise ShapeError(f"glorot init needs rank >= 2, got {dims}")
    fan_in, fan_out = _fans(dims)
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, dims).astype(DTYPE)


class Rng:
    """Seeded random stream with deterministic, order-independent children.

    The same seed always yields the same draw sequence; ``spawn(key)`` derives
    an independent child stream from (seed, key) alone, so reordering call
    sites cannot silently change unrelated draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{key}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def normal(self, mean: float, std: float, shape=None) -> np.ndarray:
        return self._gen.normal(mean, std, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state
