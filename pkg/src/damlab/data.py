"""Synthetic prototype-plus-noise image tasks and BadNets-style patch triggers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Rng, derive_seed

CORNERS = ("bottom-right", "bottom-left", "top-right", "top-left")


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    side: int = 14
    num_classes: int = 4
    prototype_seed: int = 0
    noise_sigma: float = 0.25
    n_train: int = 1000
    n_test: int = 400
    class_separation: float = 1.0

    @property
    def input_dim(self) -> int:
        return self.side * self.side

    def prototypes(self) -> np.ndarray:
        """One [0,1]-valued prototype image per class, shape (C, side*side).

        A uniform task base image is shared by all classes; class ``c`` adds
        ``class_separation * (r_c - base)`` with its own uniform image ``r_c``.
        Separation 1 gives independent uniform prototypes.
        """
        rng = Rng(self.prototype_seed)
        base = rng.uniform01_open(self.input_dim)
        own = rng.uniform01_open((self.num_classes, self.input_dim))
        return base + self.class_separation * (own - base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TriggerSpec:
    patch_size: int = 3
    position: str = "bottom-right"
    value: float = 1.0
    target_class: int = 0

    def __post_init__(self):
        if self.position not in CORNERS:
            raise ValueError(f"position must be one of {CORNERS}, got {self.position!r}")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")

    def pixel_indices(self, side: int) -> np.ndarray:
        p = self.patch_size
        if p > side:
            raise ValueError(f"{p}x{p} patch does not fit a {side}x{side} image")
        r0 = side - p if self.position.startswith("bottom") else 0
        c0 = side - p if self.position.endswith("right") else 0
        rows, cols = np.meshgrid(np.arange(r0, r0 + p), np.arange(c0, c0 + p), indexing="ij")
        return (rows * side + cols).reshape(-1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(**d)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"inputs {list(self.inputs.shape)} and labels {list(self.labels.shape)} disagree"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


def generate(task: TaskSpec, split_seed: int, split: str) -> Dataset:
    """Class ``c`` samples are ``clip(prototype_c + N(0, sigma^2), 0, 1)``; labels cycle 0..C-1."""
    n = {"train": task.n_train, "test": task.n_test}.get(split)
    if n is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    protos = task.prototypes()
    labels = np.arange(n) % task.num_classes
    rng = Rng(derive_seed(split_seed, task.task_id, split))
    noise = rng.normal((n, task.input_dim), sigma=task.noise_sigma) if task.noise_sigma > 0 else 0.0
    inputs = np.clip(protos[labels] + noise, 0.0, 1.0)
    prov = {"task": task.to_dict(), "split": split, "seed": int(split_seed)}
    return Dataset(inputs, labels, prov)


def image_side(dim: int) -> int:
    side = math.isqrt(dim)
    if side * side != dim:
        raise ValueError(f"input dimension {dim} is not a square image")
    return side


def apply_trigger(x, trig: TriggerSpec) -> np.ndarray:
    """Stamp the patch onto one image (shape [dim]) or a batch ([N, dim])."""
    out = np.array(x, dtype=np.float64, copy=True)
    idx = trig.pixel_indices(image_side(out.shape[-1]))
    out[..., idx] = trig.value
    return out


def poison(train: Dataset, trig: TriggerSpec, rate: float, rng: Rng) -> Dataset:
    """Trigger ``floor(rate * N)`` randomly chosen rows and relabel them to the target."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poison rate must lie in [0, 1], got {rate}")
    n = len(train)
    k = int(math.floor(rate * n))
    inputs = train.inputs.copy()
    labels = train.labels.copy()
    if k:
        rows = np.sort(rng.choice(n, k))
        inputs[rows] = apply_trigger(inputs[rows], trig)
        labels[rows] = trig.target_class
    prov = dict(train.provenance, poison={"rate": rate, "count": k, "trigger": trig.to_dict()})
    return Dataset(inputs, labels, prov)
