"""Model zoo construction: shared pre-training, clean and poisoned fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .checkpoint import Checkpoint, checkpoint_meta
from .data import Dataset, TaskSpec, TriggerSpec, generate, poison
from .nn import ArchSpec, ParamVector
from .tensor import Rng, derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    poison_rate: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def sgd(params: ParamVector, data: Dataset, cfg: TrainConfig, stream: str) -> ParamVector:
    """Minibatch SGD with heavy-ball momentum on mean cross-entropy.

    Shuffling depends only on ``(cfg.seed, stream, epoch)``, so two runs that
    differ only in their data contents visit rows in the same order.
    """
    theta = params.flat.copy()
    vel = np.zeros_like(theta)
    n = len(data)
    for epoch in range(cfg.epochs):
        order = Rng(derive_seed(cfg.seed, stream, epoch)).permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            _, g, _ = nn.loss_and_grads(ParamVector(params.arch, theta), data.inputs[rows], "cross_entropy", data.labels[rows])
            vel = cfg.momentum * vel + g
            theta = theta - cfg.learning_rate * vel
    return ParamVector(params.arch, theta)


def _train_accuracy(params, data) -> float:
    return float(np.mean(nn.predict(params, data.inputs) == data.labels))


def mixture(tasks: list[TaskSpec], data_seed: int, split: str) -> Dataset:
    parts = [generate(t, data_seed, split) for t in tasks]
    return Dataset(
        np.concatenate([p.inputs for p in parts]),
        np.concatenate([p.labels for p in parts]),
        {"mixture": [t.task_id for t in tasks], "split": split, "seed": data_seed},
    )


def pretrain(tasks: list[TaskSpec], cfg: TrainConfig, arch: ArchSpec | None = None, data_seed: int = 0) -> Checkpoint:
    if len(tasks) < 2:
        raise ValueError("pre-training needs at least two tasks")
    arch = arch or ArchSpec(tasks[0].input_dim, (64, 64), tasks[0].num_classes)
    init = nn.init_params(arch, Rng(derive_seed(cfg.seed, "init")))
    data = mixture(tasks, data_seed, "train")
    theta = sgd(init, data, cfg, "pretrain")
    meta = checkpoint_meta(task_id=None, seed=cfg.seed, pretrained=True, train=cfg.to_dict())
    acc = _train_accuracy(theta, data)
    meta["train_acc"] = acc
    floor = 1.0 / arch.num_classes + 0.05
    if acc < floor:
        meta["warning"] = f"non-learnable config: train accuracy {acc:.3f} < {floor:.3f}"
        log.warning(meta["warning"])
    return Checkpoint(theta, meta)


def finetune(theta_pre: Checkpoint, task: TaskSpec, cfg: TrainConfig, data_seed: int = 0) -> Checkpoint:
    _check_task(theta_pre, task)
    data = generate(task, data_seed, "train")
    theta = sgd(theta_pre.params, data, cfg, f"finetune/{task.task_id}")
    meta = checkpoint_meta(task_id=task.task_id, backdoored=False, seed=cfg.seed, train=cfg.to_dict())
    return Checkpoint(theta, meta)


def finetune_backdoored(
    theta_pre: Checkpoint, task: TaskSpec, trig: TriggerSpec, cfg: TrainConfig, data_seed: int = 0
) -> Checkpoint:
    _check_task(theta_pre, task)
    clean = generate(task, data_seed, "train")
    data = poison(clean, trig, cfg.poison_rate, Rng(derive_seed(cfg.seed, task.task_id, "poison")))
    theta = sgd(theta_pre.params, data, cfg, f"finetune/{task.task_id}")
    meta = checkpoint_meta(
        task_id=task.task_id, backdoored=True, trigger=trig.to_dict(), seed=cfg.seed, train=cfg.to_dict()
    )
    return Checkpoint(theta, meta)


def _check_task(theta_pre: Checkpoint, task: TaskSpec):
    arch = theta_pre.arch
    if arch.input_dim != task.input_dim or arch.num_classes != task.num_classes:
        raise ValueError(
            f"task {task.task_id!r} ({task.input_dim} inputs, {task.num_classes} classes) "
            f"does not fit architecture {arch}"
        )
