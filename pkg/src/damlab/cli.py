"""``damlab`` command line: every stage reads one JSON experiment config.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import acceptance
from . import checkpoint as ckio
from . import pipeline as P
from .config import MERGE_METHODS, ConfigError, load_config
from .evaluation import emit_report, load_report

log = logging.getLogger("damlab")


class UsageError(Exception):
    pass


def _emit(ws: P.Workspace, name: str, report) -> list[str]:
    paths = emit_report(report, ws.path(name, "report")[: -len(".report")])
    ckio.save(ws.path(name), P.report_container(report))
    return paths


def cmd_gen_data(cfg, args):
    ws = P.Workspace(cfg)
    for split in ("train", "test"):
        for tid, ds in P.datasets(cfg, split).items():
            ws.save_dataset(tid, split, ds)
    print(f"wrote datasets for {len(cfg.tasks)} tasks to {ws.root}")


def cmd_pretrain(cfg, args):
    ws = P.Workspace(cfg)
    ck = P.train_pretrained(cfg)
    ws.save_checkpoint("pretrained", ck)
    print(f"pretrained: mixture test ACC {ck.meta['mixture_test_acc']:.4f} -> {ws.path('pretrained')}")
    if "warning" in ck.meta:
        print(f"warning: {ck.meta['warning']}", file=sys.stderr)


def cmd_finetune(cfg, args):
    ws = P.Workspace(cfg)
    ids = [args.task] if args.task else P.task_ids(cfg)
    for tid in ids:
        if tid not in cfg.zoo:
            raise UsageError(f"--task: unknown task {tid!r}")
    pre = ws.load_checkpoint("pretrained", "pretrain")
    for tid in ids:
        ck = P.train_task(cfg, pre, tid)
        ws.save_checkpoint(f"model-{tid}", ck)
        test = ws.load_dataset(tid, "test") if os.path.exists(ws.path(f"data-{tid}-test")) else P.datasets(cfg, "test")[tid]
        m = P.individual_metrics(cfg, {tid: ck}, {tid: test})[tid]
        print(f"{tid} ({m['role']}): ACC {m['acc']:.4f} ASR {m['asr']:.4f}")


def _merge_cfg(cfg, args):
    over = {}
    if args.lam is not None:
        over["merge.lambda"] = args.lam
        over["merge.ties.lambda"] = args.lam
    if args.density is not None:
        over["merge.ties.density"] = args.density
    if args.steps is not None:
        over["merge.adamerging.steps"] = args.steps
    if args.granularity is not None:
        over["merge.adamerging.granularity"] = args.granularity
    return cfg.with_overrides(**over) if over else cfg


def cmd_merge(cfg, args):
    # the zoo belongs to the base config; overridden merge settings get their own hash
    zoo = P.Workspace(cfg).load_zoo()
    cfg = _merge_cfg(cfg, args)
    ws = P.Workspace(cfg)
    model, info = P.merge_models(cfg, zoo, args.method)
    ws.save_checkpoint(f"merged-{args.method}", ckio.Checkpoint(model, ckio.checkpoint_meta(config_hash=cfg.hash, **info)))
    rep = P.make_report(cfg, zoo, model, args.method, info)
    _emit(ws, f"report-{args.method}", rep)
    _print_report(rep)


def _print_report(rep):
    agg = rep.aggregates
    print(f"{rep.method}: ACC_avg {agg['acc_avg']:.4f} ASR_avg {agg['asr_avg']:.4f} score {rep.score:.4f}")
    for t in rep.tasks:
        print(f"  {t.task_id:<10} {t.role:<10} acc {t.acc:.4f} asr {t.asr:.4f}")


def _parse_alphas(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--alpha-sweep: {exc}") from exc
    if len(vals) < 2 or any(v < 0 for v in vals):
        raise UsageError("--alpha-sweep: need at least two non-negative values")
    return vals


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds: {exc}") from exc
    if not seeds or any(s < 0 for s in seeds):
        raise UsageError("--seeds: need non-negative integers")
    return seeds


def cmd_dam(cfg, args):
    ws = P.Workspace(cfg)
    alphas = _parse_alphas(args.alpha_sweep) if args.alpha_sweep else None
    if args.alpha is not None and args.alpha < 0:
        raise UsageError("--alpha: must be non-negative")
    zoo = ws.load_zoo()
    if alphas:
        rows = []
        for a in alphas:
            model, res = P.dam_run(cfg, zoo, replace(cfg.dam, alpha=a))
            ws.save_dam(f"dam-alpha{a:g}", model, res, a)
            rep = P.make_report(cfg, zoo, model, f"dam_alpha_{a:g}", {"alpha": a})
            _emit(ws, f"report-dam-alpha{a:g}", rep)
            rows.append({"alpha": a, "acc_avg": rep.aggregates["acc_avg"], "asr_avg": rep.aggregates["asr_avg"]})
        from .evaluation import pareto_mask

        for row, nd in zip(rows, pareto_mask([(r["acc_avg"], r["asr_avg"]) for r in rows])):
            row["non_dominated"] = nd
        ws.write_json("pareto", rows)
        with open(ws.path("pareto", "csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("alpha,acc_avg,asr_avg,non_dominated\n")
            for r in rows:
                fh.write(f"{r['alpha']:.6f},{r['acc_avg']:.6f},{r['asr_avg']:.6f},{int(r['non_dominated'])}\n")
        for r in rows:
            print(f"alpha {r['alpha']:g}: ACC_avg {r['acc_avg']:.4f} ASR_avg {r['asr_avg']:.4f}{'  *' if r['non_dominated'] else ''}")
        return
    alpha = cfg.dam.alpha if args.alpha is None else args.alpha
    model, res = P.dam_run(cfg, zoo, replace(cfg.dam, alpha=alpha))
    ws.save_dam(f"dam-alpha{alpha:g}", model, res, alpha)
    rep = P.make_report(cfg, zoo, model, "dam", {"alpha": alpha, "dam": replace(cfg.dam, alpha=alpha).to_dict()})
    _emit(ws, f"report-dam-alpha{alpha:g}", rep)
    _print_report(rep)


def cmd_eval(cfg, args):
    ws = P.Workspace(cfg)
    ck = ckio.load_checkpoint(args.model)
    tests = {t: (ws.load_dataset(t, "test") if os.path.exists(ws.path(f"data-{t}-test")) else None) for t in P.task_ids(cfg)}
    if any(v is None for v in tests.values()):
        tests = P.datasets(cfg, "test")
    pre = ws.load_checkpoint("pretrained", "pretrain")
    models = {t: ws.load_checkpoint(f"model-{t}", "finetune") for t in P.task_ids(cfg)}
    zoo = P.Zoo(pre, models, tests, P.individual_metrics(cfg, models, tests))
    name = os.path.splitext(os.path.basename(args.model))[0]
    name = name.removesuffix(f"-{cfg.hash16}")
    rep = P.make_report(cfg, zoo, ck.params, name, {"model": os.path.basename(args.model)})
    _emit(ws, f"report-eval-{name}", rep)
    _print_report(rep)


def cmd_report(cfg, args):
    ws = P.Workspace(cfg)
    suffix = f"-{cfg.hash16}.json"
    names = sorted(f for f in os.listdir(ws.root) if f.startswith("report-") and f.endswith(suffix)) if os.path.isdir(ws.root) else []
    if not names:
        raise P.MissingArtifactError(f"no reports for config {cfg.hash16} in {ws.root}; run `damlab merge` or `damlab dam` first")
    lines = ["method,acc_avg,asr_avg,score"]
    for n in names:
        rep = load_report(os.path.join(ws.root, n))
        agg = rep.aggregates
        lines.append(f"{rep.method},{agg['acc_avg']:.6f},{agg['asr_avg']:.6f},{rep.score:.6f}")
    text = "\n".join(lines) + "\n"
    with open(ws.path("summary", "csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    print(text, end="")


def cmd_repro(cfg, args):
    ws = P.Workspace(cfg)
    cmd_gen_data(cfg, args)
    cmd_pretrain(cfg, args)
    args.task = None
    cmd_finetune(cfg, args)
    zoo_problems = P.check_gate(P.individual_metrics(cfg, {t: ws.load_checkpoint(f"model-{t}", "finetune") for t in P.task_ids(cfg)}, P.datasets(cfg, "test")))
    if not zoo_problems:
        args.lam = args.density = args.steps = args.granularity = None
        for method in MERGE_METHODS:
            args.method = method
            cmd_merge(cfg, args)
        args.alpha, args.alpha_sweep = None, ",".join(f"{a:g}" for a in cfg.eval["alpha_sweep"])
        cmd_dam(cfg, args)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg.seed + k for k in range(3)]
    runs = [acceptance.measure_seed(cfg if s == cfg.seed else cfg.with_overrides(seed=s)) for s in seeds]
    gates = acceptance.summarize(cfg, runs)
    evaluated = [g for g in gates if g["passed"] is not None]
    summary = {"config_hash": cfg.hash, "seeds": seeds, "gates": gates, "all_evaluated_passed": all(g["passed"] for g in evaluated)}
    path = ws.write_json("acceptance", summary)
    for g in gates:
        status = {True: "PASS", False: "FAIL", None: "----"}[g["passed"]]
        print(f"[{status}] {g['id']:>2} {g['name']}" + ("" if g["passed"] is not None else f" ({g['detail']})"))
    print(f"acceptance summary -> {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="damlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=True, help="experiment JSON config")
        sp.set_defaults(func=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate train/test datasets per task")
    add("pretrain", cmd_pretrain, "train the shared pre-trained checkpoint")
    sp = add("finetune", cmd_finetune, "fine-tune clean / backdoored task models")
    sp.add_argument("--task", help="only this task id")
    sp = add("merge", cmd_merge, "merge the zoo with a baseline method")
    sp.add_argument("--method", required=True, choices=MERGE_METHODS)
    sp.add_argument("--lambda", dest="lam", type=float, help="task arithmetic / TIES scaling")
    sp.add_argument("--density", type=float, help="TIES trim density")
    sp.add_argument("--steps", type=int, help="AdaMerging steps")
    sp.add_argument("--granularity", choices=("task_wise", "layer_wise"), help="AdaMerging granularity")
    sp = add("dam", cmd_dam, "run Defense-Aware Merging")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float)
    g.add_argument("--alpha-sweep", help="comma-separated alphas, e.g. 0,0.1,1,10")
    sp = add("eval", cmd_eval, "evaluate a checkpoint on every task")
    sp.add_argument("--model", required=True)
    add("report", cmd_report, "summarise all reports written for this config")
    sp = add("repro", cmd_repro, "full pipeline plus acceptance summary")
    sp.add_argument("--seeds", help="comma-separated seeds for the acceptance gates (default: seed, seed+1, seed+2)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        args.func(cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
