"""Experiment configuration: one JSON file drives every pipeline stage."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .dam import DamConfig
from .data import TaskSpec, TriggerSpec
from .nn import ArchSpec
from .train import TrainConfig

MERGE_METHODS = ("average", "task_arithmetic", "ties", "fisher", "adamerging")


class ConfigError(ValueError):
    """Validation failure; the message starts with the offending field path."""


DEFAULT_CONFIG = {
    "name": "default",
    "seed": 0,
    "output_dir": "runs/default",
    "arch": {"hidden": [64, 64]},
    "tasks": [
        {"task_id": f"task{i}", "prototype_seed": 100 + i, "class_separation": 0.4, "noise_sigma": 0.25,
         "n_train": 1000, "n_test": 400, "num_classes": 4, "side": 14}
        for i in range(4)
    ],
    "zoo": {
        "task0": {"kind": "backdoored", "trigger": {}},
        "task1": {"kind": "backdoored", "trigger": {}},
        "task2": {"kind": "clean"},
        "task3": {"kind": "clean"},
    },
    "trainer": {
        "pretrain": {"epochs": 1, "batch_size": 32, "learning_rate": 0.005, "momentum": 0.9},
        "finetune": {"epochs": 10, "batch_size": 32, "learning_rate": 0.02, "momentum": 0.9, "poison_rate": 0.1},
    },
    "merge": {
        "method": "task_arithmetic",
        "lambda": 0.3,
        "ties": {"density": 0.2, "lambda": 1.0},
        "adamerging": {"granularity": "layer_wise", "lr": 0.01, "steps": 100},
        "fisher": {"probe_size": 64},
    },
    "dam": {
        "epochs": 300, "lr_lambda": 0.01, "lr_delta": 10.0, "lr_mask": 0.1, "alpha": 1.0, "xi": 10.0,
        "temperature": 0.5, "batch_size": 64, "granularity": "layer_wise", "delta_steps": 20,
        "perturbed_loss": "pseudo_label",
    },
    "eval": {"omega": 1.0, "succession_threshold": 0.4, "transfer_threshold": 0.05, "alpha_sweep": [0, 0.1, 1, 10]},
}


@dataclass
class ZooEntry:
    kind: str
    trigger: TriggerSpec | None = None


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    output_dir: str
    arch: ArchSpec
    tasks: list[TaskSpec]
    zoo: dict[str, ZooEntry]
    pretrain: TrainConfig
    finetune: TrainConfig
    merge: dict
    dam: DamConfig
    eval: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def hash16(self) -> str:
        return self.hash[:16]

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def backdoored_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks if self.zoo[t.task_id].kind == "backdoored"]

    def clean_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks if self.zoo[t.task_id].kind == "clean"]

    def eval_trigger(self, task_id: str) -> TriggerSpec:
        """Trigger used to measure ASR on a task: its own, else the first attacker's."""
        entry = self.zoo[task_id]
        if entry.trigger is not None:
            return entry.trigger
        for tid in self.backdoored_ids():
            return self.zoo[tid].trigger
        return TriggerSpec()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for dotted, value in changes.items():
            node = raw
            *head, last = dotted.split(".")
            for k in head:
                node = node.setdefault(k, {})
            node[last] = value
        return from_dict(raw)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON config, excluding where outputs are written."""
    body = {k: v for k, v in raw.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def _merge_defaults(default, given):
    if isinstance(default, dict) and isinstance(given, dict):
        out = copy.deepcopy(default)
        for k, v in given.items():
            out[k] = _merge_defaults(default.get(k), v) if k in default else copy.deepcopy(v)
        return out
    return copy.deepcopy(given)


def _build(path: str, cls, data, **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown field")
    try:
        return cls(**data, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _positive(path, value, allow_zero=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path}: must be a number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{path}: must be {'non-negative' if allow_zero else 'positive'}, got {value}")


def _train_config(path, d, seed_tag, seed):
    for key in ("learning_rate", "batch_size"):
        if key in d:
            _positive(f"{path}.{key}", d[key])
    if "epochs" in d:
        _positive(f"{path}.epochs", d["epochs"], allow_zero=True)
    from .tensor import derive_seed

    d = dict(d)
    d.setdefault("seed", derive_seed(seed, seed_tag))
    return _build(path, TrainConfig, d)


def from_dict(given: dict) -> ExperimentConfig:
    if not isinstance(given, dict):
        raise ConfigError("<root>: config must be a JSON object")
    raw = _merge_defaults(DEFAULT_CONFIG, given)
    if "tasks" in given:
        raw["tasks"] = copy.deepcopy(given["tasks"])
    if "zoo" in given:
        raw["zoo"] = copy.deepcopy(given["zoo"])
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed: must be a non-negative integer")

    tasks = []
    if not isinstance(raw["tasks"], list) or len(raw["tasks"]) < 1:
        raise ConfigError("tasks: need at least one task")
    for i, t in enumerate(raw["tasks"]):
        p = f"tasks[{i}]"
        for key in ("noise_sigma",):
            if key in t:
                _positive(f"{p}.{key}", t[key], allow_zero=True)
        for key in ("n_train", "n_test", "num_classes", "side"):
            if key in t:
                _positive(f"{p}.{key}", t[key])
        tasks.append(_build(p, TaskSpec, t))
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigError("tasks: duplicate task_id")
    dims = {(t.input_dim, t.num_classes) for t in tasks}
    if len(dims) != 1:
        raise ConfigError("tasks: all tasks must share image size and class count")
    input_dim, num_classes = dims.pop()
    try:
        arch = ArchSpec(input_dim, tuple(raw["arch"].get("hidden", (64, 64))), num_classes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"arch: {exc}") from exc

    zoo = {}
    for tid in ids:
        entry = raw["zoo"].get(tid)
        p = f"zoo.{tid}"
        if entry is None:
            raise ConfigError(f"{p}: missing zoo entry")
        kind = entry.get("kind")
        if kind not in ("clean", "backdoored"):
            raise ConfigError(f"{p}.kind: must be 'clean' or 'backdoored'")
        trig = None
        if kind == "backdoored":
            trig = _build(f"{p}.trigger", TriggerSpec, entry.get("trigger", {}))
            if trig.patch_size > tasks[0].side:
                raise ConfigError(f"{p}.trigger.patch_size: patch does not fit the image")
            if not 0 <= trig.target_class < num_classes:
                raise ConfigError(f"{p}.trigger.target_class: must lie in [0, {num_classes})")
        zoo[tid] = ZooEntry(kind, trig)
    extra = set(raw["zoo"]) - set(ids)
    if extra:
        raise ConfigError(f"zoo.{sorted(extra)[0]}: no such task")

    pre = _train_config("trainer.pretrain", raw["trainer"]["pretrain"], "pretrain", seed)
    ft = _train_config("trainer.finetune", raw["trainer"]["finetune"], "finetune", seed)

    merge = raw["merge"]
    if merge.get("method") not in MERGE_METHODS:
        raise ConfigError(f"merge.method: must be one of {MERGE_METHODS}")
    _positive("merge.lambda", merge["lambda"], allow_zero=True)
    _positive("merge.ties.density", merge["ties"]["density"])
    _positive("merge.adamerging.lr", merge["adamerging"]["lr"])
    _positive("merge.adamerging.steps", merge["adamerging"]["steps"], allow_zero=True)
    _positive("merge.fisher.probe_size", merge["fisher"]["probe_size"])

    dam_raw = dict(raw["dam"])
    for key in ("lr_lambda", "lr_delta", "lr_mask", "xi", "temperature"):
        if key in dam_raw:
            _positive(f"dam.{key}", dam_raw[key])
    if "alpha" in dam_raw:
        _positive("dam.alpha", dam_raw["alpha"], allow_zero=True)
    from .tensor import derive_seed

    dam_raw.setdefault("seed", derive_seed(seed, "dam"))
    dam = _build("dam", DamConfig, dam_raw)

    ev = raw["eval"]
    _positive("eval.omega", ev["omega"], allow_zero=True)
    sweep = ev.get("alpha_sweep", [])
    if not isinstance(sweep, list) or any(not isinstance(a, (int, float)) or a < 0 for a in sweep):
        raise ConfigError("eval.alpha_sweep: must be a list of non-negative numbers")

    out_dir = os.environ.get("DAM_OUTPUT_DIR") or raw["output_dir"]
    return ExperimentConfig(
        raw.get("name", "experiment"), seed, out_dir, arch, tasks, zoo, pre, ft, merge, dam, ev, raw
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
    return from_dict(data)


def default_config(**overrides) -> ExperimentConfig:
    cfg = from_dict(copy.deepcopy(DEFAULT_CONFIG))
    return cfg.with_overrides(**overrides) if overrides else cfg
