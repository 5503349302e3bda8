"""Argument handling shared by the experiment scripts."""

import argparse
import json
import sys
from pathlib import Path

from gatedlora.experiments import SEEDS, build_trunk


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--trunk", default="runs/trunk", help="pretrained trunk checkpoint (built if missing)")
    p.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    p.add_argument("--steps", type=int, default=None, help="override the fine-tune step budget")
    p.add_argument("--out", default=None, help="write the JSON summary here as well as to stdout")
    return p


def seeds(args) -> list[int]:
    return [int(s) for s in args.seeds.split(",")]


def changes(args) -> dict:
    return {} if args.steps is None else {"steps": args.steps}


def trunk(args):
    print(f"trunk: {args.trunk}", file=sys.stderr)
    return build_trunk(args.trunk)


def emit(summary: dict, args) -> None:
    text = json.dumps(summary, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
