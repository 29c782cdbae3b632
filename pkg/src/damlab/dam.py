"""Defense-Aware Merging: bi-level optimisation of a shared concrete mask,
merging coefficients and per-task universal input perturbations.

Every epoch, in order:

1. reset the perturbations to zero;
2. sample a mask ``m`` and rescale the task vectors by ``m / mean(m)``;
3. initialise the coefficients (or keep the previous epoch's with ``warm_start``);
4. merge;
5. if the coefficients are optimisable: per task, draw a batch, evaluate the
   clean and perturbed entropy, clip the perturbation; take one coefficient
   step on the clean entropy; re-merge; take ``delta_steps`` perturbation
   steps on the perturbed entropy (each followed by the L1 clip);
6. per task, on fresh batches, evaluate clean and perturbed entropy;
7. one mask-logit step on ``sum(clean + alpha * perturbed)``.

Perturbed inputs are ``clip(X + delta, 0, 1)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .mask import MaskState, deploy_mask, mask_jacobian, rescale_flat, sample
from .merging import (
    GRANULARITIES,
    TASK_ARITHMETIC_LAMBDA,
    MergeCoefficients,
    TaskVector,
    coefficient_gradient,
    expand_coefficients,
)
from .nn import ParamVector
from .tensor import Rng, derive_seed

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
PERTURBED_LOSSES = ("entropy", "pseudo_label")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DamConfig:
    epochs: int = 300
    lr_lambda: float = 1e-2
    lr_delta: float = 1e-1
    lr_mask: float = 1e-1
    alpha: float = 1.0
    xi: float = 5.0
    temperature: float = 0.5
    batch_size: int = 64
    granularity: str = "layer_wise"
    seed: int = 0
    optimize_lambda: bool = True
    lambda_init: float = TASK_ARITHMETIC_LAMBDA
    warm_start: bool = False
    update_delta: bool = True
    persist_delta: bool = False
    delta_steps: int = 1
    deploy: str = "soft"
    perturbed_loss: str = "entropy"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr_lambda", "lr_delta", "lr_mask", "xi", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size <= 0 or self.delta_steps < 1:
            raise ValueError("batch_size and delta_steps must be positive")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if self.deploy not in ("soft", "hard"):
            raise ValueError("deploy must be 'soft' or 'hard'")
        if self.perturbed_loss not in PERTURBED_LOSSES:
            raise ValueError(f"perturbed_loss must be one of {PERTURBED_LOSSES}")

    def to_dict(self) -> dict:
        return asdict(self)


def clip_l1(delta: np.ndarray, xi: float) -> np.ndarray:
    """Scale ``delta`` down uniformly so that its L1 norm is at most ``xi``."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    norm = float(np.abs(delta).sum())
    if norm <= xi:
        return delta.copy()
    # the product can land one ulp above xi; shave until it does not
    out = delta * (xi / norm)
    while float(np.abs(out).sum()) > xi:
        out = out * (1.0 - 2.0**-52)
    return out


def perturb(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(X + delta[None, :], 0.0, 1.0)


def perturbation_gradient(params: ParamVector, X: np.ndarray, delta: np.ndarray):
    """Entropy on ``clip(X + delta)`` and its gradient w.r.t. the shared ``delta``.

    The clip passes gradient where ``0 <= X + delta <= 1`` (boundary inclusive).
    """
    z = X + delta[None, :]
    loss, _, g_in = nn.loss_and_grads(params, np.clip(z, 0.0, 1.0), "entropy", want_params=False, want_input=True)
    inside = (z >= 0.0) & (z <= 1.0)
    return loss, (g_in * inside).sum(axis=0)


@dataclass
class DamResult:
    mask: MaskState
    coefficients: MergeCoefficients
    perturbations: np.ndarray
    trace: list[dict] = field(default_factory=list)
    config: DamConfig | None = None

    def deployed_mask(self) -> np.ndarray:
        return deploy_mask(self.mask, self.config.deploy if self.config else "soft")


def masked_merge(theta_pre: ParamVector, taus: np.ndarray, m: np.ndarray, coeffs: MergeCoefficients) -> ParamVector:
    """theta_pre + sum_i lambda_i * tau_i * m / mean(m)."""
    lam = expand_coefficients(theta_pre.arch, coeffs, taus.shape[0])
    out = theta_pre.flat.copy()
    for i in range(taus.shape[0]):
        out = out + lam[i] * rescale_flat(taus[i], m)
    return ParamVector(theta_pre.arch, out)


def deployed_model(theta_pre: ParamVector, tvs: list[TaskVector], result: DamResult) -> ParamVector:
    taus = np.stack([tv.flat for tv in tvs])
    return masked_merge(theta_pre, taus, result.deployed_mask(), result.coefficients)


def mask_gradient(theta_pre: ParamVector, taus, m, coeffs: MergeCoefficients, temperature: float, grad_theta):
    """d loss / d logits through theta = pre + sum lambda_i tau_i m / mean(m), mean(m) held fixed."""
    lam = expand_coefficients(theta_pre.arch, coeffs, taus.shape[0])
    direction = np.zeros_like(grad_theta)
    for i in range(taus.shape[0]):
        direction = direction + lam[i] * taus[i]
    upstream = grad_theta * direction / float(np.mean(m))
    return upstream * mask_jacobian(m, temperature)


class _BatchSampler:
    def __init__(self, batches, batch_size: int, rng: Rng):
        self.data = [np.asarray(b, dtype=np.float64) for b in batches]
        self.batch_size = batch_size
        self.rng = rng

    def draw(self, i: int) -> np.ndarray:
        X = self.data[i]
        n = X.shape[0]
        if n <= self.batch_size:
            return X
        return X[np.sort(self.rng.choice(n, self.batch_size))]


def run_dam(theta_pre: ParamVector, tvs: list[TaskVector], test_batches, cfg: DamConfig) -> DamResult:
    if not tvs:
        raise ValueError("need at least one task vector")
    if len(test_batches) != len(tvs):
        raise ValueError("need one unlabeled batch source per task vector")
    arch = theta_pre.arch
    n = len(tvs)
    taus = np.stack([tv.flat for tv in tvs])
    state = MaskState.zeros(arch.param_count, cfg.temperature, derive_seed(cfg.seed, "mask"))
    sampler = _BatchSampler(test_batches, cfg.batch_size, Rng(derive_seed(cfg.seed, "batches")))
    init = MergeCoefficients.constant(cfg.granularity, n, arch, cfg.lambda_init)
    coeffs = init
    deltas = np.zeros((n, arch.input_dim))
    trace = []
    first_clean = None

    for epoch in range(cfg.epochs):
        if not cfg.persist_delta:
            deltas = np.zeros((n, arch.input_dim))
        m, _ = sample(state)
        if not (cfg.warm_start and epoch > 0):
            coeffs = init
        theta = masked_merge(theta_pre, taus, m, coeffs)
        denom = float(np.mean(m))
        rescaled = taus * m[None, :] / denom

        if cfg.optimize_lambda:
            g_theta = np.zeros(arch.param_count)
            drawn = []
            for i in range(n):
                X = sampler.draw(i)
                drawn.append(X)
                _, g, _ = nn.loss_and_grads(theta, X, "entropy")
                g_theta = g_theta + g
                deltas[i] = clip_l1(deltas[i], cfg.xi)
            g_lam = coefficient_gradient(arch, g_theta, rescaled, cfg.granularity)
            coeffs = MergeCoefficients(cfg.granularity, np.clip(coeffs.values - cfg.lr_lambda * g_lam, 0.0, 1.0))
            theta = masked_merge(theta_pre, taus, m, coeffs)
            if cfg.update_delta:
                for i in range(n):
                    for _ in range(cfg.delta_steps):
                        _, g_d = perturbation_gradient(theta, drawn[i], deltas[i])
                        deltas[i] = clip_l1(deltas[i] - cfg.lr_delta * g_d, cfg.xi)

        clean_sum = pert_sum = 0.0
        g_theta = np.zeros(arch.param_count)
        for i in range(n):
            X = sampler.draw(i)
            l, g, _ = nn.loss_and_grads(theta, X, "entropy")
            clean_sum += l
            g_theta = g_theta + g
            Xp = perturb(X, deltas[i])
            if cfg.perturbed_loss == "entropy":
                kind, labels = "entropy", None
            else:
                kind, labels = "cross_entropy", nn.predict(theta, X)
            if cfg.alpha > 0:
                lp, gp, _ = nn.loss_and_grads(theta, Xp, kind, labels)
                g_theta = g_theta + cfg.alpha * gp
            else:
                lp = nn.loss_and_grads(theta, Xp, kind, labels, want_params=False)[0]
            pert_sum += lp
        state.logits = state.logits - cfg.lr_mask * mask_gradient(theta_pre, taus, m, coeffs, cfg.temperature, g_theta)

        if first_clean is None:
            first_clean = clean_sum
        elif clean_sum > DIVERGENCE_FACTOR * first_clean and first_clean > 0:
            raise DivergenceError(
                f"epoch {epoch + 1}: clean entropy {clean_sum:.4g} exceeds {DIVERGENCE_FACTOR}x its epoch-1 value {first_clean:.4g}"
            )
        trace.append(
            {
                "epoch": epoch + 1,
                "clean_entropy": clean_sum,
                "perturbed_entropy": pert_sum,
                "mean_p": float(np.mean(state.probs)),
                "delta_l1": [float(np.abs(d).sum()) for d in deltas],
            }
        )

    return DamResult(state, coeffs, deltas, trace, cfg)


def sweep_alpha(theta_pre: ParamVector, tvs, test_batches, cfg: DamConfig, alphas, evaluate) -> list[dict]:
    """Run DAM once per alpha with shared seeds; ``evaluate(model) -> (acc_avg, asr_avg)``."""
    from dataclasses import replace

    from .evaluation import pareto_mask

    alphas = list(alphas)
    if not alphas:
        raise ValueError("need at least one alpha")
    rows = []
    for a in alphas:
        res = run_dam(theta_pre, tvs, test_batches, replace(cfg, alpha=float(a)))
        acc, asr = evaluate(deployed_model(theta_pre, tvs, res))
        rows.append({"alpha": float(a), "acc_avg": acc, "asr_avg": asr})
    for row, nd in zip(rows, pareto_mask([(r["acc_avg"], r["asr_avg"]) for r in rows])):
        row["non_dominated"] = nd
    return rows
