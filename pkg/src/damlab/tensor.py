"""Dense float64 tensor helpers and the seedable random generator.

Tensors are plain ``numpy.ndarray`` values of dtype float64. The helpers here
add the shape checks and fixed-order reductions the rest of the package relies
on; everything else uses numpy directly.

Random numbers come from :class:`Rng`, a thin wrapper over numpy's Philox4x64
counter-based bit generator (``RNG_ALGORITHM``). Stochastic functions always
take an explicit ``Rng``; nothing reads global random state.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "philox4x64-10"

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "scale": np.multiply,
}


class ShapeError(ValueError):
    pass


def as_tensor(values) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    if out.ndim == 0:
        out = out.reshape(1)
    return out


def elementwise(op: str, a, b) -> np.ndarray:
    """Apply ``op`` in {add, sub, mul, scale}; ``b`` may be a scalar."""
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = np.asarray(a, dtype=np.float64)
    if np.isscalar(b):
        return _OPS[op](a, float(b))
    b = np.asarray(b, dtype=np.float64)
    if op == "scale" and b.size == 1:
        return _OPS[op](a, float(b.reshape(-1)[0]))
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return _OPS[op](a, b)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    return a @ b


def _nonempty(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("empty tensor")
    return t.reshape(-1)


def mean(t) -> float:
    flat = _nonempty(t)
    return float(np.add.reduce(flat, dtype=np.float64)) / flat.size


def l1_norm(t) -> float:
    return float(np.abs(_nonempty(t)).sum())


def argmax(t) -> int:
    # numpy returns the first maximal index, i.e. ties go to the lowest index
    return int(np.argmax(_nonempty(t)))


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    """Overflow-free logistic function; ``sigmoid(0) == 0.5`` exactly."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


class Rng:
    """Seeded counter-based generator.

    The bit stream is Philox4x64-10 keyed by ``seed``, which numpy implements
    identically on every platform.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform01_open(self, size=None) -> np.ndarray | float:
        # 53-bit mantissa draws shifted by half a step: values lie strictly in (0, 1)
        bits = self._gen.integers(0, 1 << 53, size=size, dtype=np.uint64)
        out = (np.asarray(bits, dtype=np.float64) + 0.5) * (1.0 / (1 << 53))
        return float(out) if size is None else out

    def normal(self, size, sigma: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * sigma

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, stream: int) -> "Rng":
        """Independent child generator derived from this seed and ``stream``."""
        return Rng(derive_seed(self.seed, stream))


def derive_seed(*parts) -> int:
    """Mix integers/strings into a 63-bit seed (stable across runs and platforms)."""
    import hashlib

    h = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1
