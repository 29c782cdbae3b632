"""Experiment-level gates (zoo, succession, transfer, DAM trade-off, alpha sweep).

``measure_seed`` runs one config end to end in memory; ``summarize`` turns one
or more seed measurements into pass/fail gate rows.
"""

from __future__ import annotations

import time
from dataclasses import replace

from . import pipeline as P
from .config import ExperimentConfig

PERFORMANCE_BASELINES = ("task_arithmetic", "adamerging", "dam_alpha_0")
DAM_ASR_MARGIN = 0.10
DAM_ACC_BUDGET = 0.03

# property-level criteria live in the test suite; repro lists them without evaluating
UNIT_LEVEL_GATES = {
    1: "gradient fidelity (finite differences)",
    2: "merging identities",
    3: "TIES vs brute-force oracle",
    4: "mask statistics",
    5: "L1 clip invariant",
    12: "serialization round trip and corrupt fixtures",
    13: "repro determinism",
}
EXPERIMENT_GATES = {
    7: "backdoor succession",
    8: "backdoor transfer",
    9: "DAM vs best performance-only baseline",
    10: "alpha sweep",
    11: "ablation ordering",
}


def measure_seed(cfg: ExperimentConfig, alphas=None) -> dict:
    t0 = time.perf_counter()
    zoo = P.build_zoo(cfg, enforce_gate=False)
    gate_problems = P.check_gate(zoo.individual)
    out = {
        "seed": cfg.seed,
        "individual": zoo.individual,
        "pretrain_mixture_acc": zoo.pre.meta["mixture_test_acc"],
        "gate_problems": gate_problems,
        "zoo_seconds": time.perf_counter() - t0,
        "methods": {},
    }
    if gate_problems:
        return out
    for method in ("average", "task_arithmetic", "adamerging"):
        model, _ = P.merge_models(cfg, zoo, method)
        rep = P.make_report(cfg, zoo, model, method)
        out["methods"][method] = {"agg": rep.aggregates, "succession": rep.succession, "transfer": rep.transfer}
    alphas = list(cfg.eval["alpha_sweep"] if alphas is None else alphas)
    if cfg.dam.alpha not in alphas:
        alphas.append(cfg.dam.alpha)
    t1 = time.perf_counter()
    sweep = {}
    for a in alphas:
        model, res = P.dam_run(cfg, zoo, replace(cfg.dam, alpha=float(a)))
        rep = P.make_report(cfg, zoo, model, f"dam_alpha_{a:g}")
        sweep[float(a)] = {
            "agg": rep.aggregates,
            "max_delta_l1": max(max(row["delta_l1"]) for row in res.trace) if res.trace else 0.0,
        }
    out["sweep"] = sweep
    out["methods"]["dam"] = sweep[float(cfg.dam.alpha)]
    out["methods"]["dam_alpha_0"] = sweep.get(0.0)
    out["dam_seconds"] = time.perf_counter() - t1
    out["seconds"] = time.perf_counter() - t0
    return out


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs)


def _not_evaluated(gid, name, why):
    return {"id": gid, "name": name, "passed": None, "detail": why}


def summarize(cfg: ExperimentConfig, runs: list[dict]) -> list[dict]:
    """Rows for every gate, sorted by id; ``passed`` is None where repro does not evaluate it."""
    gates = [_not_evaluated(g, n, "unit-level; run tests/test_acceptance.py") for g, n in UNIT_LEVEL_GATES.items()]
    gates += _experiment_gates(cfg, runs)
    return sorted(gates, key=lambda g: g["id"])


def _experiment_gates(cfg: ExperimentConfig, runs: list[dict]) -> list[dict]:
    gates = []

    problems = [p for r in runs for p in r["gate_problems"]]
    gates.append({"id": 6, "name": "zoo gate (backdoored ACC>=0.90 & ASR>=0.90, clean ACC>=0.95)", "passed": not problems, "detail": problems})
    if problems:
        return gates + [_not_evaluated(g, n, "zoo gate failed") for g, n in EXPERIMENT_GATES.items()]

    for gid, name, key, pred in (
        (7, "backdoor succession: merged ASR >= 0.40 on >=1 backdoored task", "succession", lambda row: row["succession"]),
        (8, "backdoor transfer: clean-task ASR +0.05 over individual on >=1 task", "transfer", lambda row: row["transfer"]),
    ):
        per = {
            f"seed{r['seed']}/{m}": any(pred(row) for row in r["methods"][m][key])
            for r in runs
            for m in ("average", "task_arithmetic")
        }
        gates.append({"id": gid, "name": name, "passed": all(per.values()), "detail": per})

    means = {}
    for m in PERFORMANCE_BASELINES + ("dam",):
        means[m] = {
            "acc_avg": _mean(r["methods"][m]["agg"]["acc_avg"] for r in runs),
            "asr_avg": _mean(r["methods"][m]["agg"]["asr_avg"] for r in runs),
        }
    best = max(PERFORMANCE_BASELINES, key=lambda m: means[m]["acc_avg"])
    asr_gain = means[best]["asr_avg"] - means["dam"]["asr_avg"]
    acc_drop = means[best]["acc_avg"] - means["dam"]["acc_avg"]
    gates.append(
        {
            "id": 9,
            "name": "DAM vs best performance-only baseline: ASR lower by >=0.10, ACC drop <=0.03",
            "passed": asr_gain >= DAM_ASR_MARGIN and acc_drop <= DAM_ACC_BUDGET,
            "detail": {"best_baseline": best, "asr_reduction": asr_gain, "acc_drop": acc_drop, "means": means},
        }
    )

    alphas = sorted(runs[0]["sweep"])
    curve = [
        (a, _mean(r["sweep"][a]["agg"]["acc_avg"] for r in runs), _mean(r["sweep"][a]["agg"]["asr_avg"] for r in runs))
        for a in alphas
    ]
    from .evaluation import pareto_mask

    nd = pareto_mask([(acc, asr) for _, acc, asr in curve])
    inversions = P.count_inversions([asr for _, _, asr in curve])
    gates.append(
        {
            "id": 10,
            "name": "alpha sweep: >=2 non-dominated points, ASR non-increasing with <=1 inversion",
            "passed": sum(nd) >= 2 and inversions <= 1,
            "detail": {"curve": curve, "non_dominated": nd, "inversions": inversions},
        }
    )
    gates.append(
        {
            "id": 11,
            "name": "ablation: full DAM ASR <= alpha=0 variant ASR",
            "passed": means["dam"]["asr_avg"] <= means["dam_alpha_0"]["asr_avg"],
            "detail": {"dam": means["dam"]["asr_avg"], "alpha_0": means["dam_alpha_0"]["asr_avg"]},
        }
    )
    return gates
