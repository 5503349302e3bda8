"""Desk-scale experiments shared by the scripts and the acceptance suite.

Every function takes a pretrained trunk and returns plain results so callers
decide what to print or assert.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import RegularizerSpec
from .analysis import random_selection_baseline
from .checkpoint import load_model, save_checkpoint
from .config import RunConfig, desk_finetune_config, desk_pretrain_config
from .model import TinyViT
from .train import RunResult, finetune, pretrain

SEEDS = (0, 1, 2)
LAMBDAS = (0.1, 0.5, 1.0)


def build_trunk(cache: str | Path | None = None, **changes) -> TinyViT:
    """Pretrain the source trunk, reusing a float64 checkpoint at ``cache`` when present."""
    if cache is not None and (Path(cache) / "manifest.json").exists():
        return load_model(cache)
    run = desk_pretrain_config(**changes)
    res = pretrain(run)
    if cache is not None:
        save_checkpoint(cache, res.model, run, precision="float64")
    return res.model


def gated_run(lam: float, seed: int = 0, kind: str = "l1", **changes) -> RunConfig:
    return desk_finetune_config(seed=seed, reg=RegularizerSpec(kind, lam, tau=0.1), **changes)


def lora_run(seed: int = 0, **changes) -> RunConfig:
    """Plain LoRA: gates pinned on, no penalty."""
    run = desk_finetune_config(seed=seed, reg=RegularizerSpec("l1", 0.0), **changes)
    return run.replace(adapter=dataclasses.replace(run.adapter, gated=False))


def _strip(res: RunResult) -> RunResult:
    res.model = None
    return res


def lambda_sweep(trunk: TinyViT, lams: Sequence[float] = LAMBDAS, seeds: Sequence[int] = SEEDS,
                 **changes) -> dict[float, list[RunResult]]:
    return {lam: [_strip(finetune(gated_run(lam, s, **changes), trunk)) for s in seeds] for lam in lams}


def mean_final_active(results: Sequence[RunResult]) -> float:
    return float(np.mean([r.final_active_pct for r in results]))


@dataclass
class RetentionRow:
    seed: int
    lora_top1: float
    lora_knn: float
    gated_top1: float
    gated_knn: float
    gated_active_pct: float

    @property
    def top1_gap(self) -> float:
        """LoRA minus gated target top-1, in percentage points."""
        return 100.0 * (self.lora_top1 - self.gated_top1)

    @property
    def retains(self) -> bool:
        return self.gated_knn >= self.lora_knn


def retention(trunk: TinyViT, gated: Sequence[RunResult] | None = None, seeds: Sequence[int] = SEEDS,
              lam: float = 1.0, **changes) -> list[RetentionRow]:
    """Plain LoRA against the gated run, seed by seed; pass ``gated`` to reuse finished runs."""
    if gated is None:
        gated = [_strip(finetune(gated_run(lam, s, **changes), trunk)) for s in seeds]
    rows = []
    for seed, g in zip(seeds, gated):
        lora = finetune(lora_run(seed, **changes), trunk)
        rows.append(RetentionRow(seed, lora.metrics["target_top1"], lora.metrics["source_knn"],
                                 g.metrics["target_top1"], g.metrics["source_knn"], g.final_active_pct))
    return rows


@dataclass
class RandomVsLearned:
    n_active: int
    learned_top1: float
    random_top1: list[float] = field(default_factory=list)
    random_sites: list[list[str]] = field(default_factory=list)

    @property
    def random_mean(self) -> float:
        return float(np.mean(self.random_top1))

    @property
    def learned_wins(self) -> bool:
        return self.learned_top1 >= self.random_mean


def random_vs_learned(trunk: TinyViT, learned: RunResult, seeds: Sequence[int] = SEEDS) -> RandomVsLearned:
    """Random fixed selections of the learned run's final active count.

    Both sides are scored at their last step so the learned accuracy belongs to
    the model that actually has the final gates.
    """
    n = sum(g.active for g in learned.final_gates)
    out = RandomVsLearned(n, learned.metrics["final_target_top1"])
    run = learned.config.replace(reg=RegularizerSpec("l1", 0.0))
    for seed in seeds:
        res = random_selection_baseline(n, seed, run, trunk)
        out.random_top1.append(res.metrics["final_target_top1"])
        out.random_sites.append(res.metrics["random_sites"])
    return out


def regularizer_ablation(trunk: TinyViT, kinds: Sequence[str] = ("l1", "l2", "hinge"), lam: float = 1.0,
                         seed: int = 0, **changes) -> dict[str, RunResult]:
    return {k: _strip(finetune(gated_run(lam, seed, kind=k, **changes), trunk)) for k in kinds}
