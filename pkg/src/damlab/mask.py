"""Concrete (Gumbel-sigmoid) parameter mask shared by all task vectors.

A sample is ``m = sigmoid((logit(u) + x) / T)`` with ``u ~ U(0, 1)``; the
identity ``log(sigmoid(x) / (1 - sigmoid(x))) == x`` removes the inner sigmoid.
Masked task vectors are rescaled by the mean mask entry. Gradients treat that
mean as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .merging import TaskVector
from .tensor import Rng, logit, sigmoid

DEGENERATE_MEAN = 1e-12


class DegenerateMaskError(ValueError):
    pass


@dataclass
class MaskState:
    logits: np.ndarray = field(repr=False)
    temperature: float = 0.5
    rng: Rng = field(default_factory=lambda: Rng(0), repr=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def zeros(cls, d: int, temperature: float = 0.5, seed: int = 0) -> "MaskState":
        return cls(np.zeros(d), temperature, Rng(seed))

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


def concrete_mask(logits: np.ndarray, u: np.ndarray, temperature: float) -> np.ndarray:
    # sigmoid saturates to exactly 0/1 in f64 far out; keep samples in the open interval
    return np.clip(sigmoid((logit(u) + logits) / temperature), _OPEN_LO, _OPEN_HI)


def sample(state: MaskState):
    """Draw ``(m, u)``; ``u`` is returned so the gradient can be replayed."""
    u = state.rng.uniform01_open(state.logits.shape)
    return concrete_mask(state.logits, u, state.temperature), u


def rescale_flat(tau: np.ndarray, m: np.ndarray) -> np.ndarray:
    denom = float(np.mean(m))
    if denom <= DEGENERATE_MEAN:
        raise DegenerateMaskError(f"mask mean {denom:.3g} is too small to rescale")
    return tau * m / denom


def rescale(tv: TaskVector, m: np.ndarray) -> TaskVector:
    if m.shape != tv.flat.shape:
        raise ValueError(f"mask length {m.size} does not match task vector length {tv.flat.size}")
    resid = None if tv.residual is None else rescale_flat(tv.residual, m)
    return TaskVector(tv.arch, rescale_flat(tv.flat, m), tv.source_task, resid)


def mask_jacobian(m: np.ndarray, temperature: float) -> np.ndarray:
    """Diagonal dm/dx."""
    return m * (1.0 - m) / temperature


def grad_logits(m: np.ndarray, u: np.ndarray, state: MaskState, upstream: np.ndarray) -> np.ndarray:
    # u only fixes which m was drawn; the derivative is expressible in m alone
    del u
    return upstream * mask_jacobian(m, state.temperature)


def deploy_mask(state: MaskState, mode: str = "soft") -> np.ndarray:
    """Evaluation-time mask: expected mask ``sigmoid(x)`` or its 0/1 threshold."""
    p = state.probs
    if mode == "soft":
        return p
    if mode == "hard":
        return (p > 0.5).astype(np.float64)
    raise ValueError(f"deploy mode must be 'soft' or 'hard', got {mode!r}")
