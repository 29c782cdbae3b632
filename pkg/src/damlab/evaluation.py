"""ACC / ASR measurement and the succession, transfer and summary reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Dataset, TriggerSpec, apply_trigger

REPORT_SCHEMA_VERSION = 1
SUCCESSION_THRESHOLD = 0.40
TRANSFER_THRESHOLD = 0.05
CSV_COLUMNS = ("task_id", "role", "acc", "asr")


class ReportError(ValueError):
    pass


def accuracy(model, clean_test: Dataset) -> float:
    if len(clean_test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(nn.predict(model, clean_test.inputs) == clean_test.labels))


def triggered_subset(clean_test: Dataset, trig: TriggerSpec) -> np.ndarray:
    keep = clean_test.labels != trig.target_class
    if not keep.any():
        raise ValueError("every test sample belongs to the target class; ASR is undefined")
    return apply_trigger(clean_test.inputs[keep], trig)


def attack_success_rate(model, clean_test: Dataset, trig: TriggerSpec) -> float:
    """Fraction of triggered non-target samples predicted as the target class."""
    x = triggered_subset(clean_test, trig)
    return float(np.mean(nn.predict(model, x) == trig.target_class))


@dataclass
class TaskMetrics:
    task_id: str
    role: str
    acc: float
    asr: float
    n_clean_eval: int
    n_trigger_eval: int

    def __post_init__(self):
        if not (0.0 <= self.acc <= 1.0 and 0.0 <= self.asr <= 1.0):
            raise ReportError(f"{self.task_id}: metrics must lie in [0, 1]")
        if self.n_clean_eval <= 0 or self.n_trigger_eval <= 0:
            raise ReportError(f"{self.task_id}: evaluation counts must be positive")


def evaluate_task(model, task_id: str, role: str, test: Dataset, trig: TriggerSpec) -> TaskMetrics:
    n_trig = int(np.sum(test.labels != trig.target_class))
    return TaskMetrics(task_id, role, accuracy(model, test), attack_success_rate(model, test, trig), len(test), n_trig)


def _mean(vals):
    vals = list(vals)
    return float(sum(vals) / len(vals)) if vals else None


def aggregates(rows: list[TaskMetrics]) -> dict:
    bd = [r for r in rows if r.role == "backdoored"]
    cl = [r for r in rows if r.role == "clean"]
    return {
        "acc_avg": _mean(r.acc for r in rows),
        "asr_avg": _mean(r.asr for r in rows),
        "acc_avg_backdoored": _mean(r.acc for r in bd),
        "asr_avg_backdoored": _mean(r.asr for r in bd),
        "acc_avg_clean": _mean(r.acc for r in cl),
        "asr_avg_clean": _mean(r.asr for r in cl),
    }


@dataclass
class Report:
    experiment_id: str
    config_hash: str
    method: str
    tasks: list[TaskMetrics]
    omega: float = 1.0
    succession: list[dict] = field(default_factory=list)
    transfer: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregates(self.tasks)

    @property
    def score(self) -> float:
        agg = self.aggregates
        return agg["acc_avg"] - self.omega * agg["asr_avg"]

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "experiment_id": self.experiment_id,
            "config_hash": self.config_hash,
            "method": self.method,
            "tasks": [asdict(t) for t in self.tasks],
            "aggregates": self.aggregates,
            "omega": self.omega,
            "score": self.score,
            "thresholds": {"succession_asr": SUCCESSION_THRESHOLD, "transfer_delta_asr": TRANSFER_THRESHOLD},
            "succession": self.succession,
            "transfer": self.transfer,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportError(f"unsupported report schema {d.get('schema_version')!r}")
        rep = cls(
            d["experiment_id"],
            d["config_hash"],
            d["method"],
            [TaskMetrics(**t) for t in d["tasks"]],
            d.get("omega", 1.0),
            d.get("succession", []),
            d.get("transfer", []),
            d.get("extra", {}),
        )
        stored, fresh = d.get("aggregates", {}), rep.aggregates
        for k, v in fresh.items():
            s = stored.get(k)
            if (s is None) != (v is None) or (v is not None and abs(s - v) > 1e-12):
                raise ReportError(f"aggregate {k!r} = {s} does not match per-task rows ({v})")
        return rep


def succession_report(merged, backdoored: dict, individual_asr: dict, threshold: float = SUCCESSION_THRESHOLD) -> list[dict]:
    """Per backdoored task: merged ASR vs the individual backdoored model's ASR.

    ``backdoored`` maps task_id -> (test Dataset, TriggerSpec).
    """
    rows = []
    for tid, (test, trig) in backdoored.items():
        asr = attack_success_rate(merged, test, trig)
        rows.append(
            {"task_id": tid, "merged_asr": asr, "individual_asr": individual_asr.get(tid), "succession": bool(asr >= threshold)}
        )
    return rows


def transfer_report(merged, clean: dict, individual_asr: dict, threshold: float = TRANSFER_THRESHOLD) -> list[dict]:
    """Per clean task: ASR change of the merged model over the clean individual model."""
    rows = []
    for tid, (test, trig) in clean.items():
        asr = attack_success_rate(merged, test, trig)
        base = individual_asr[tid]
        delta = asr - base
        # compare at 1e-12 so that an identical model never reports a spurious transfer
        rows.append(
            {"task_id": tid, "merged_asr": asr, "individual_asr": base, "delta_asr": delta, "transfer": bool(delta >= threshold - 1e-12)}
        )
    return rows


def report_json(report: Report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for t in report.tasks:
        w.writerow([t.task_id, t.role, f"{t.acc:.6f}", f"{t.asr:.6f}"])
    return buf.getvalue()


def emit_report(report: Report, stem, formats=("json", "csv")) -> list[str]:
    """Write ``<stem>.json`` / ``<stem>.csv``; returns the paths written."""
    paths = []
    render = {"json": report_json, "csv": report_csv}
    for fmt in formats:
        if fmt not in render:
            raise ValueError(f"unknown report format {fmt!r}")
        path = f"{os.fspath(stem)}.{fmt}"
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(render[fmt](report))
        paths.append(path)
    return paths


def load_report(path) -> Report:
    with open(path, encoding="utf-8") as fh:
        return Report.from_dict(json.load(fh))


def pareto_mask(points) -> list[bool]:
    """Non-dominated flags for (acc, asr) pairs: higher acc and lower asr are better."""
    pts = [(float(a), float(s)) for a, s in points]
    flags = []
    for i, (a, s) in enumerate(pts):
        dominated = any(
            (a2 >= a and s2 <= s) and (a2 > a or s2 < s) for j, (a2, s2) in enumerate(pts) if j != i
        )
        flags.append(not dominated)
    return flags
