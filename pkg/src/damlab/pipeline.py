"""Experiment stages shared by the CLI and the acceptance suite.

In-memory builders (``build_zoo``, ``merge_models``, ``dam_model`` ...) do the
work; :class:`Workspace` persists artifacts under ``output_dir`` with the
config hash in every filename.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from . import checkpoint as ckio
from . import merging
from .checkpoint import Checkpoint, Container
from .config import ExperimentConfig
from .dam import DamConfig, DamResult, deployed_model, run_dam
from .data import Dataset, generate
from .evaluation import (
    Report,
    accuracy,
    attack_success_rate,
    evaluate_task,
    pareto_mask,
    succession_report,
    transfer_report,
)
from .nn import ParamVector
from .train import finetune, finetune_backdoored, mixture, pretrain

log = logging.getLogger(__name__)

BACKDOOR_GATE_ACC = 0.90
BACKDOOR_GATE_ASR = 0.90
CLEAN_GATE_ACC = 0.95


class ZooGateError(RuntimeError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class Zoo:
    pre: Checkpoint
    models: dict[str, Checkpoint]
    tests: dict[str, Dataset]
    individual: dict[str, dict]

    def task_vectors(self, ids) -> list[merging.TaskVector]:
        return [merging.task_vector(self.models[t].params, self.pre.params, t) for t in ids]


def datasets(cfg: ExperimentConfig, split: str) -> dict[str, Dataset]:
    return {t.task_id: generate(t, cfg.seed, split) for t in cfg.tasks}


def train_pretrained(cfg: ExperimentConfig) -> Checkpoint:
    ck = pretrain(cfg.tasks, cfg.pretrain, cfg.arch, data_seed=cfg.seed)
    ck.meta["config_hash"] = cfg.hash
    ck.meta["mixture_test_acc"] = accuracy(ck.params, mixture(cfg.tasks, cfg.seed, "test"))
    return ck


def train_task(cfg: ExperimentConfig, pre: Checkpoint, task_id: str) -> Checkpoint:
    task = cfg.task(task_id)
    entry = cfg.zoo[task_id]
    if entry.kind == "backdoored":
        ck = finetune_backdoored(pre, task, entry.trigger, cfg.finetune, data_seed=cfg.seed)
    else:
        ck = finetune(pre, task, replace(cfg.finetune, poison_rate=0.0), data_seed=cfg.seed)
    ck.meta["config_hash"] = cfg.hash
    return ck


def individual_metrics(cfg, models, tests) -> dict[str, dict]:
    out = {}
    for tid, ck in models.items():
        trig = cfg.eval_trigger(tid)
        out[tid] = {
            "acc": accuracy(ck.params, tests[tid]),
            "asr": attack_success_rate(ck.params, tests[tid], trig),
            "role": cfg.zoo[tid].kind,
        }
    return out


def check_gate(individual: dict[str, dict]) -> list[str]:
    """Problems that block merging experiments (empty when the zoo is usable)."""
    problems = []
    for tid, m in individual.items():
        if m["role"] == "backdoored":
            if m["acc"] < BACKDOOR_GATE_ACC or m["asr"] < BACKDOOR_GATE_ASR:
                problems.append(
                    f"{tid}: backdoored model ACC {m['acc']:.3f} / ASR {m['asr']:.3f} "
                    f"(need >= {BACKDOOR_GATE_ACC} / >= {BACKDOOR_GATE_ASR})"
                )
        elif m["acc"] < CLEAN_GATE_ACC:
            problems.append(f"{tid}: clean model ACC {m['acc']:.3f} (need >= {CLEAN_GATE_ACC})")
    return problems


def build_zoo(cfg: ExperimentConfig, enforce_gate: bool = True) -> Zoo:
    pre = train_pretrained(cfg)
    models = {t.task_id: train_task(cfg, pre, t.task_id) for t in cfg.tasks}
    tests = datasets(cfg, "test")
    zoo = Zoo(pre, models, tests, individual_metrics(cfg, models, tests))
    if enforce_gate:
        problems = check_gate(zoo.individual)
        if problems:
            raise ZooGateError("zoo gate failed: " + "; ".join(problems))
    return zoo


def task_ids(cfg) -> list[str]:
    return [t.task_id for t in cfg.tasks]


def merge_models(cfg: ExperimentConfig, zoo: Zoo, method: str) -> tuple[ParamVector, dict]:
    """Merged parameters plus method details (e.g. learned coefficients)."""
    ids = task_ids(cfg)
    tvs = zoo.task_vectors(ids)
    pre = zoo.pre.params
    mc = cfg.merge
    info: dict = {"method": method}
    if method == "average":
        merged = merging.merge_weight_average([zoo.models[t].params for t in ids])
    elif method == "task_arithmetic":
        merged = merging.merge_task_arithmetic(pre, tvs, mc["lambda"])
        info["lambda"] = mc["lambda"]
    elif method == "ties":
        merged = merging.merge_ties(pre, tvs, mc["ties"]["density"], mc["ties"]["lambda"])
        info.update(density=mc["ties"]["density"], **{"lambda": mc["ties"]["lambda"]})
    elif method == "fisher":
        k = mc["fisher"]["probe_size"]
        probes = [zoo.tests[t].inputs[:k] for t in ids]
        merged = merging.merge_fisher([zoo.models[t].params for t in ids], probes)
    elif method == "adamerging":
        ad = mc["adamerging"]
        coeffs = merging.optimize_coefficients(
            pre, tvs, [zoo.tests[t].inputs for t in ids], ad["granularity"], ad["lr"], ad["steps"]
        )
        merged = merging.merge_with_coefficients(pre, tvs, coeffs)
        info["coefficients"] = coeffs.values.tolist()
        info["granularity"] = ad["granularity"]
    else:
        raise ValueError(f"unknown merge method {method!r}")
    return merged, info


def dam_run(cfg: ExperimentConfig, zoo: Zoo, dam_cfg: DamConfig | None = None) -> tuple[ParamVector, DamResult]:
    ids = task_ids(cfg)
    tvs = zoo.task_vectors(ids)
    res = run_dam(zoo.pre.params, tvs, [zoo.tests[t].inputs for t in ids], dam_cfg or cfg.dam)
    return deployed_model(zoo.pre.params, tvs, res), res


def make_report(cfg: ExperimentConfig, zoo: Zoo, model: ParamVector, method: str, extra=None) -> Report:
    rows = [evaluate_task(model, t, cfg.zoo[t].kind, zoo.tests[t], cfg.eval_trigger(t)) for t in task_ids(cfg)]
    bd = {t: (zoo.tests[t], cfg.eval_trigger(t)) for t in cfg.backdoored_ids()}
    cl = {t: (zoo.tests[t], cfg.eval_trigger(t)) for t in cfg.clean_ids()}
    succ = succession_report(
        model, bd, {t: zoo.individual[t]["asr"] for t in bd}, cfg.eval["succession_threshold"]
    )
    trans = transfer_report(model, cl, {t: zoo.individual[t]["asr"] for t in cl}, cfg.eval["transfer_threshold"])
    return Report(f"{cfg.name}/{method}", cfg.hash, method, rows, cfg.eval["omega"], succ, trans, extra or {})


def alpha_sweep(cfg: ExperimentConfig, zoo: Zoo, alphas) -> list[dict]:
    rows = []
    for a in alphas:
        model, res = dam_run(cfg, zoo, replace(cfg.dam, alpha=float(a)))
        agg = make_report(cfg, zoo, model, f"dam_alpha_{a:g}").aggregates
        rows.append({"alpha": float(a), "acc_avg": agg["acc_avg"], "asr_avg": agg["asr_avg"]})
    for row, nd in zip(rows, pareto_mask([(r["acc_avg"], r["asr_avg"]) for r in rows])):
        row["non_dominated"] = nd
    return rows


def count_inversions(values) -> int:
    """Adjacent increases in a sequence that should be non-increasing."""
    return sum(1 for a, b in zip(values, values[1:]) if b > a)


# persistence ---------------------------------------------------------------


class Workspace:
    """Artifact paths ``<output_dir>/<name>-<hash16>.<ext>`` for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = cfg.output_dir

    def path(self, name: str, ext: str = "dam") -> str:
        return os.path.join(self.root, f"{name}-{self.cfg.hash16}.{ext}")

    def require(self, name: str, producer: str) -> str:
        p = self.path(name)
        if not os.path.exists(p):
            raise MissingArtifactError(f"missing {p}; run `damlab {producer} --config <config>` first")
        return p

    def save_dataset(self, tid: str, split: str, ds: Dataset):
        ckio.save(self.path(f"data-{tid}-{split}"), ckio.dataset_container(ds, task_id=tid, seed=self.cfg.seed, config_hash=self.cfg.hash))

    def load_dataset(self, tid: str, split: str) -> Dataset:
        return ckio.dataset_from_container(ckio.load(self.require(f"data-{tid}-{split}", "gen-data")))

    def save_checkpoint(self, name: str, ck: Checkpoint):
        ckio.save_checkpoint(self.path(name), ck)

    def load_checkpoint(self, name: str, producer: str) -> Checkpoint:
        return ckio.load_checkpoint(self.require(name, producer))

    def write_json(self, name: str, payload) -> str:
        p = self.path(name, "json")
        os.makedirs(self.root, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return p

    def load_zoo(self) -> Zoo:
        cfg = self.cfg
        pre = self.load_checkpoint("pretrained", "pretrain")
        models = {t: self.load_checkpoint(f"model-{t}", "finetune") for t in task_ids(cfg)}
        tests = {t: self.load_dataset(t, "test") for t in task_ids(cfg)}
        zoo = Zoo(pre, models, tests, individual_metrics(cfg, models, tests))
        problems = check_gate(zoo.individual)
        if problems:
            raise ZooGateError("zoo gate failed: " + "; ".join(problems))
        return zoo

    def save_dam(self, stem: str, model: ParamVector, res: DamResult, alpha: float):
        cfg = self.cfg
        meta = dict(config_hash=cfg.hash, seed=cfg.dam.seed, alpha=alpha)
        ckio.save(self.path(f"{stem}-mask"), ckio.mask_container(res.mask.logits, res.mask.temperature, model.arch, **meta))
        ckio.save(
            self.path(f"{stem}-coefficients"),
            Container(
                {"lambda": res.coefficients.values},
                ckio.checkpoint_meta("coefficients", granularity=res.coefficients.granularity, **meta),
            ),
        )
        ckio.save(
            self.path(f"{stem}-perturbations"),
            Container({"delta": res.perturbations}, ckio.checkpoint_meta("perturbation", **meta)),
        )
        self.save_checkpoint(f"{stem}-merged", Checkpoint(model, ckio.checkpoint_meta(method="dam", **meta)))
        self.write_json(f"{stem}-trace", res.trace)


def report_container(report: Report) -> Container:
    metrics = np.array([[t.acc, t.asr] for t in report.tasks], dtype=np.float64)
    return Container({"metrics": metrics}, ckio.checkpoint_meta("report", report=report.to_dict()))


def report_from_container(c: Container) -> Report:
    rep = Report.from_dict(c.meta["report"])
    stored = c.tensors["metrics"]
    fresh = np.array([[t.acc, t.asr] for t in rep.tasks])
    if stored.shape != fresh.shape or np.any(stored != fresh):
        raise ValueError("report tensor does not match its JSON rows")
    return rep
