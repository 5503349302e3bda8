"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data/format error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .analysis import (activation_report, checkpoint_flops, load_run_gates, merge_adapters, prune_inactive,
                       random_selection_baseline)
from .adapters import RegularizerSpec
from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint, write_checkpoint
from .config import RunConfig, load_config, save_config
from .data import resolve_dataset
from .errors import ConfigError, DataError, NumericAbort
from .train import evaluate_knn, evaluate_top1, finetune, pretrain

log = logging.getLogger("gatedlora")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _write_run(out: Path, result, run: RunConfig, kind: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    meta = {"stage": kind, "best_step": result.best_step, "best_val": result.best_val, "metrics": result.metrics}
    save_checkpoint(out, result.model, run, meta=meta)
    result.write_metrics(out / "metrics.csv")
    save_config(run, out / "config.json")


def _overrides(run: RunConfig, args) -> RunConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.rank is not None:
        changes["adapter"] = dataclasses.replace(run.adapter, rank=args.rank)
    if args.lam is not None or args.reg is not None:
        reg = run.reg
        kind = args.reg or reg.kind
        tau = reg.tau if reg.tau is not None or kind != "hinge" else run.adapter.tau
        changes["reg"] = RegularizerSpec(kind, args.lam if args.lam is not None else reg.lam, tau)
    return run.replace(**changes) if changes else run


def cmd_pretrain(args) -> int:
    run = load_config(args.config)
    result = pretrain(run)
    _write_run(Path(args.out), result, run, "pretrain")
    _emit({"out": str(args.out), **result.metrics})
    return 0


def cmd_finetune(args) -> int:
    run = _overrides(load_config(args.config), args)
    init = model_from_checkpoint(load_checkpoint(args.init)) if args.init else None
    result = finetune(run, init)
    _write_run(Path(args.out), result, run, "finetune")
    _emit({"out": str(args.out), "best_step": result.best_step, "final_active_pct": result.final_active_pct,
           **result.metrics})
    return 0


def cmd_eval(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    if args.metric == "top1":
        ds = resolve_dataset(args.data, split=None if "split=" in args.data else "test")
        value = evaluate_top1(model, ds)
    else:
        if args.bank:
            bank, queries = resolve_dataset(args.bank), resolve_dataset(args.data)
        elif args.data.startswith("synth:"):
            bank, queries = resolve_dataset(args.data, split="train"), resolve_dataset(args.data, split="test")
        else:
            raise ConfigError("knn on non-synthetic data needs --bank URI")
        value = evaluate_knn(model, bank, queries, args.k)
    _emit({"metric": args.metric, "value": value, "data": args.data})
    return 0


def cmd_flops(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ranks = [int(r) for r in args.ranks.split(",")] if args.ranks else ()
    _emit(checkpoint_flops(ckpt, args.mode, args.tokens, ranks).to_dict())
    return 0


def cmd_merge(args) -> int:
    write_checkpoint(merge_adapters(load_checkpoint(args.ckpt)), args.out)
    _emit({"out": str(args.out)})
    return 0


def cmd_prune(args) -> int:
    src = load_checkpoint(args.ckpt)
    out = prune_inactive(src)
    write_checkpoint(out, args.out)
    _emit({"out": str(args.out), "kept": len(out.adapters), "dropped": len(src.adapters) - len(out.adapters)})
    return 0


def cmd_report(args) -> int:
    runs = load_run_gates(args.runs)
    if not runs:
        raise DataError(f"no gated checkpoints under {args.runs}")
    rep = activation_report(runs)
    out = Path(args.out)
    written = []
    if out.suffix in (".csv", ".svg"):
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_svg() if out.suffix == ".svg" else rep.to_csv())
        written.append(str(out))
    else:
        out.mkdir(parents=True, exist_ok=True)
        (out / "activations.csv").write_text(rep.to_csv())
        (out / "activations.svg").write_text(rep.to_svg())
        written += [str(out / "activations.csv"), str(out / "activations.svg")]
    _emit({"runs": rep.runs, "written": written})
    return 0


def cmd_baseline(args) -> int:
    run = load_config(args.config)
    init = model_from_checkpoint(load_checkpoint(args.init)) if args.init else None
    result = random_selection_baseline(args.n, args.seed, run, init)
    if args.out:
        _write_run(Path(args.out), result, run.replace(seed=args.seed), "baseline")
    _emit({"n_active": args.n, "seed": args.seed, **result.metrics})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatedlora", description="Gated low-rank adapter fine-tuning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="supervised source-task training of the trunk")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("finetune", help="gated adapter fine-tuning on the target task")
    sp.add_argument("--config", required=True)
    sp.add_argument("--init")
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--reg", choices=("l1", "l2", "hinge"))
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("eval", help="top-1 or K-NN accuracy of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--metric", choices=("top1", "knn"), default="top1")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--bank", help="reference set for knn (defaults to the train split of --data)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("flops", help="analytic FLOPs of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=("merged", "unmerged"), default="unmerged")
    sp.add_argument("--tokens", type=int)
    sp.add_argument("--ranks", help="comma-separated ranks for a sweep curve")
    sp.set_defaults(fn=cmd_flops)

    for name, fn, text in (("merge", cmd_merge, "fold active adapters into the trunk"),
                           ("prune", cmd_prune, "drop inactive adapter blocks")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--out", required=True)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("report", help="reports over finished runs")
    rsub = sp.add_subparsers(dest="report", required=True)
    ra = rsub.add_parser("activations", help="normalized activation counts per site")
    ra.add_argument("--runs", required=True)
    ra.add_argument("--out", required=True)
    ra.set_defaults(fn=cmd_report)

    sp = sub.add_parser("baseline", help="baselines")
    bsub = sp.add_subparsers(dest="baseline", required=True)
    br = bsub.add_parser("random", help="random block selection with fixed gates")
    br.add_argument("--n", type=int, required=True)
    br.add_argument("--seed", type=int, default=0)
    br.add_argument("--config", required=True)
    br.add_argument("--init")
    br.add_argument("--out")
    br.set_defaults(fn=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
