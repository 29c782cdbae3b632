"""Task vectors and the baseline merging rules (weight average, task arithmetic,
TIES, Fisher, AdaMerging-style entropy-tuned coefficients).

Layer-wise coefficients have one column per parameter tensor (``ArchSpec.segments``),
so an L-layer MLP has 2L columns (weight and bias of each layer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ArchSpec, ParamVector

TASK_ARITHMETIC_LAMBDA = 0.3
GRANULARITIES = ("task_wise", "layer_wise")


@dataclass
class TaskVector:
    """``flat = theta_i - theta_pre`` as rounded; ``residual`` holds the rounding
    error so that ``(theta_pre + flat) + residual`` gives back theta_i bit for bit."""

    arch: ArchSpec
    flat: np.ndarray = field(repr=False)
    source_task: str | None = None
    residual: np.ndarray | None = field(default=None, repr=False)


@dataclass
class MergeCoefficients:
    granularity: str
    values: np.ndarray

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        self.values = np.array(self.values, dtype=np.float64, ndmin=2)

    @classmethod
    def constant(cls, granularity: str, n_tasks: int, arch: ArchSpec, value: float) -> "MergeCoefficients":
        cols = 1 if granularity == "task_wise" else len(arch.segments())
        return cls(granularity, np.full((n_tasks, cols), float(value)))


def _check_arch(a: ArchSpec, b: ArchSpec):
    if a != b:
        raise ValueError(f"architecture mismatch: {a} vs {b}")


def task_vector(theta_i: ParamVector, theta_pre: ParamVector, source_task=None) -> TaskVector:
    _check_arch(theta_i.arch, theta_pre.arch)
    tau = theta_i.flat - theta_pre.flat
    resid = theta_i.flat - (theta_pre.flat + tau)
    return TaskVector(theta_i.arch, tau, source_task, resid if np.any(resid) else None)


def _add_scaled(out: np.ndarray, lam, tv: TaskVector) -> np.ndarray:
    out = out + lam * tv.flat
    if tv.residual is not None:
        out = out + lam * tv.residual
    return out


def apply_task_vector(theta_pre: ParamVector, tv: TaskVector) -> ParamVector:
    _check_arch(theta_pre.arch, tv.arch)
    return ParamVector(theta_pre.arch, _add_scaled(theta_pre.flat, 1.0, tv))


def expand_coefficients(arch: ArchSpec, coeffs: MergeCoefficients, n_tasks: int) -> np.ndarray:
    """Per-coordinate coefficient matrix (n_tasks x d), clamped to [0, 1]."""
    vals = np.clip(coeffs.values, 0.0, 1.0)
    segs = arch.segments()
    want = (n_tasks, 1 if coeffs.granularity == "task_wise" else len(segs))
    if vals.shape != want:
        raise ValueError(f"{coeffs.granularity} coefficients have shape {list(vals.shape)}, expected {list(want)}")
    if coeffs.granularity == "task_wise":
        return np.repeat(vals, arch.param_count, axis=1)
    sizes = [b - a for _, a, b, _ in segs]
    return np.repeat(vals, sizes, axis=1)


def _stack(theta_pre: ParamVector, tvs) -> np.ndarray:
    for tv in tvs:
        _check_arch(theta_pre.arch, tv.arch)
    return np.stack([tv.flat for tv in tvs]) if tvs else np.zeros((0, theta_pre.arch.param_count))


def merge_with_coefficients(theta_pre: ParamVector, tvs: list[TaskVector], coeffs: MergeCoefficients) -> ParamVector:
    """theta_pre + sum_i lambda_i * tau_i, summed in task-index order."""
    _stack(theta_pre, tvs)
    lam = expand_coefficients(theta_pre.arch, coeffs, len(tvs))
    out = theta_pre.flat.copy()
    for i, tv in enumerate(tvs):
        out = _add_scaled(out, lam[i], tv)
    return ParamVector(theta_pre.arch, out)


def merge_task_arithmetic(theta_pre: ParamVector, tvs: list[TaskVector], lam: float = TASK_ARITHMETIC_LAMBDA) -> ParamVector:
    return merge_with_coefficients(theta_pre, tvs, MergeCoefficients.constant("task_wise", len(tvs), theta_pre.arch, lam))


def merge_weight_average(thetas: list[ParamVector]) -> ParamVector:
    if not thetas:
        raise ValueError("need at least one checkpoint")
    for t in thetas[1:]:
        _check_arch(thetas[0].arch, t.arch)
    acc = np.zeros_like(thetas[0].flat)
    for t in thetas:
        acc = acc + t.flat
    return ParamVector(thetas[0].arch, acc / len(thetas))


def ties_trim(tau: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(k*d) largest-magnitude entries (lower index wins ties)."""
    d = tau.size
    keep = math.ceil(density * d)
    order = np.argsort(-np.abs(tau), kind="stable")
    out = np.zeros_like(tau)
    out[order[:keep]] = tau[order[:keep]]
    return out


def ties_combine(taus: np.ndarray, density: float) -> np.ndarray:
    """Trim, elect sign by the sum of kept values, disjoint mean over agreeing entries."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    trimmed = np.stack([ties_trim(t, density) for t in taus])
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def merge_ties(theta_pre: ParamVector, tvs: list[TaskVector], density: float = 0.2, lam: float = 1.0) -> ParamVector:
    taus = _stack(theta_pre, tvs)
    return ParamVector(theta_pre.arch, theta_pre.flat + lam * ties_combine(taus, density))


FISHER_EPS = 1e-8


def fisher_weighted_average(thetas: np.ndarray, fishers: np.ndarray, eps: float = FISHER_EPS) -> np.ndarray:
    w = fishers + eps
    return (w * thetas).sum(axis=0) / w.sum(axis=0)


def merge_fisher(thetas: list[ParamVector], probe_batches) -> ParamVector:
    if len(probe_batches) != len(thetas):
        raise ValueError("need exactly one probe batch per model")
    for t in thetas[1:]:
        _check_arch(thetas[0].arch, t.arch)
    fishers = np.stack([nn.fisher_diagonal(t, np.asarray(b)) for t, b in zip(thetas, probe_batches)])
    flat = fisher_weighted_average(np.stack([t.flat for t in thetas]), fishers)
    return ParamVector(thetas[0].arch, flat)


def coefficient_gradient(arch: ArchSpec, grad_theta: np.ndarray, taus: np.ndarray, granularity: str) -> np.ndarray:
    """d loss / d lambda given d loss / d theta for theta = pre + sum lambda_i tau_i."""
    prod = taus * grad_theta[None, :]
    if granularity == "task_wise":
        return prod.sum(axis=1, keepdims=True)
    return np.stack([prod[:, a:b].sum(axis=1) for _, a, b, _ in arch.segments()], axis=1)


def entropy_objective(theta_pre: ParamVector, tvs, coeffs: MergeCoefficients, batches):
    """Sum over tasks of merged-model entropy and its gradient w.r.t. the coefficients.

    The gradient is exact where coefficients lie inside (0, 1); the clamp applied
    during merging is treated as the identity.
    """
    merged = merge_with_coefficients(theta_pre, tvs, coeffs)
    total, g_theta = 0.0, np.zeros(theta_pre.arch.param_count)
    for b in batches:
        loss, g, _ = nn.loss_and_grads(merged, b, "entropy")
        total += loss
        g_theta = g_theta + g
    return total, coefficient_gradient(theta_pre.arch, g_theta, _stack(theta_pre, tvs), coeffs.granularity)


def optimize_coefficients(
    theta_pre: ParamVector,
    tvs: list[TaskVector],
    test_batches,
    granularity: str = "layer_wise",
    lr: float = 1e-2,
    steps: int = 100,
    init: float = TASK_ARITHMETIC_LAMBDA,
) -> MergeCoefficients:
    """AdaMerging: projected gradient descent on the summed test-time entropy."""
    coeffs = MergeCoefficients.constant(granularity, len(tvs), theta_pre.arch, init)
    for _ in range(steps):
        _, g = entropy_objective(theta_pre, tvs, coeffs, test_batches)
        coeffs = MergeCoefficients(granularity, np.clip(coeffs.values - lr * g, 0.0, 1.0))
    return coeffs
