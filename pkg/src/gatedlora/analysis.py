"""FLOPs accounting, checkpoint merge/prune, activation reports and the random-selection baseline.

FLOPs are analytic counts with a multiply-add counted as 2 FLOPs.  Layer
norms, softmax, GELU, bias adds and residual adds are not counted.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapters import KINDS, _dora_weight_np
from .checkpoint import Checkpoint, MANIFEST, load_checkpoint
from .config import RunConfig
from .errors import ContractError, FormatError
from .model import SITE_KINDS, GateRecord, ModelConfig, SiteId, TinyViT, enumerate_sites, site_weight_name
from .train import RunResult, finetune


# ---------------------------------------------------------------- FLOPs

def adapter_flops(m: int, n: int, r: int, tokens: int, kind: str = "lora", mode: str = "unmerged") -> int:
    """Extra cost of one unmerged adapter over ``tokens`` rows.

    LoRA: ``x @ A`` then ``(xA) @ B`` = 2 r (m + n) per token.  DoRA adds a
    dense ``m x n`` product per token plus ``3 m n`` for the column norm and
    rescale.  Merged adapters cost nothing.
    """
    if mode == "merged" or r == 0:
        return 0
    if min(m, n, tokens) < 1 or r < 0:
        raise ContractError(f"adapter_flops needs positive sizes, got m={m} n={n} r={r} tokens={tokens}")
    flops = 2 * r * (m + n) * tokens
    if kind == "dora":
        flops += 2 * m * n * tokens + 3 * m * n
    return flops


def base_flops(cfg: ModelConfig, tokens: int | None = None) -> int:
    """Forward cost of one sequence through the frozen model.

    patch embedding 2 P d per patch; per layer 8 N d^2 (q, k, v, output
    projections) + 4 N^2 d (scores and weighted sum) + 4 N d h (two MLP
    linears); head 2 d C.
    """
    n = cfg.tokens if tokens is None else tokens
    d, h = cfg.dim, cfg.hidden
    per_layer = 8 * n * d * d + 4 * n * n * d + 4 * n * d * h
    return 2 * cfg.num_patches * cfg.patch_dim * d + cfg.layers * per_layer + 2 * d * cfg.num_classes


@dataclass
class FlopsReport:
    base_flops: int
    adapter_flops: dict[str, int]
    full_adapter_flops: int
    active_count: int
    site_count: int
    mode: str
    tokens: int
    rank_curve: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.base_flops + sum(self.adapter_flops.values())

    @property
    def gated_adapter_total(self) -> int:
        return sum(self.adapter_flops.values())

    @property
    def adapter_ratio(self) -> float:
        """Ungated adapter cost over gated adapter cost."""
        gated = self.gated_adapter_total
        return float("inf") if gated == 0 else self.full_adapter_flops / gated

    @property
    def total_ratio(self) -> float:
        return (self.base_flops + self.full_adapter_flops) / self.total

    def to_dict(self) -> dict:
        return {"mode": self.mode, "tokens": self.tokens, "base_flops": self.base_flops, "total": self.total,
                "active_count": self.active_count, "site_count": self.site_count,
                "gated_adapter_flops": self.gated_adapter_total, "full_adapter_flops": self.full_adapter_flops,
                "adapter_ratio": self.adapter_ratio, "total_ratio": self.total_ratio,
                "adapter_flops": self.adapter_flops, "rank_curve": self.rank_curve}


def _gate_list(gates) -> list[tuple[SiteId, bool, int | None, str | None]]:
    out = []
    for g in gates:
        if isinstance(g, GateRecord):
            out.append((g.site, g.active, None, None))
        elif isinstance(g, dict):
            out.append((SiteId.parse(g["site"]), bool(g["active"]), int(g["rank"]), g["kind"]))
        else:
            site, active = g
            out.append((site, bool(active), None, None))
    return out


def model_flops_report(cfg: ModelConfig, gates, mode: str = "unmerged", rank: int = 8, kind: str = "lora",
                       tokens: int | None = None) -> FlopsReport:
    """Base cost plus the adapter cost of active sites.

    ``gates`` holds GateRecords, ``(SiteId, active)`` pairs or checkpoint
    adapter entries (which carry their own rank and kind).
    """
    if mode not in ("merged", "unmerged"):
        raise ContractError(f"mode must be merged or unmerged, got {mode!r}")
    n = cfg.tokens if tokens is None else tokens
    per_site, full, active = {}, 0, 0
    entries = _gate_list(gates)
    for site, on, r, k in entries:
        m_, n_ = cfg.site_shape(site.kind)
        cost = adapter_flops(m_, n_, r if r is not None else rank, n, k or kind, mode)
        full += cost
        if on:
            active += 1
            per_site[str(site)] = cost
    return FlopsReport(base_flops(cfg, n), per_site, full, active, len(entries), mode, n)


def rank_sweep(cfg: ModelConfig, gates, ranks: Iterable[int], kind: str = "lora",
               tokens: int | None = None) -> list[dict]:
    """Unmerged totals per rank with all sites on (``full``) and with the given gates (``gated``)."""
    curve = []
    for r in ranks:
        rep = model_flops_report(cfg, gates, "unmerged", r, kind, tokens)
        curve.append({"rank": r, "full": rep.base_flops + rep.full_adapter_flops, "gated": rep.total})
    return curve


def checkpoint_flops(ckpt: Checkpoint, mode: str = "unmerged", tokens: int | None = None,
                     ranks: Sequence[int] = ()) -> FlopsReport:
    rep = model_flops_report(ckpt.model_config, ckpt.adapters, mode, tokens=tokens)
    if ranks:
        kind = ckpt.adapters[0]["kind"] if ckpt.adapters else "lora"
        pairs = [(SiteId.parse(e["site"]), e["active"]) for e in ckpt.adapters]
        rep.rank_curve = rank_sweep(ckpt.model_config, pairs, ranks, kind, tokens)
    return rep


# ---------------------------------------------------------------- checkpoint surgery

def _adapter_prefix(site: str) -> str:
    return f"adapters.{site}."


def merge_adapters(ckpt: Checkpoint) -> Checkpoint:
    """Fold active blocks into their trunk weights and drop every adapter tensor.

    Folded weights are stored as float64 so the merge adds no rounding.
    """
    out = ckpt.copy()
    for entry in ckpt.adapters:
        if entry["kind"] not in KINDS:
            raise FormatError(f"cannot merge adapter kind {entry['kind']!r}")
        site = SiteId.parse(entry["site"])
        pre = _adapter_prefix(entry["site"])
        if entry["active"]:
            wname = site_weight_name(site)
            w0 = ckpt.tensors[wname]
            a, b = ckpt.tensors[pre + "a"], ckpt.tensors[pre + "b"]
            s = float(entry["alpha"]) / int(entry["rank"])
            if entry["kind"] == "lora":
                w = w0 + s * (a @ b)
            else:
                w = _dora_weight_np(w0, a, b, ckpt.tensors[pre + "magnitude"], s)
            out.tensors[wname] = w
            out.dtypes[wname] = "float64"
        for name in [n for n in out.tensors if n.startswith(pre)]:
            del out.tensors[name]
            out.dtypes.pop(name, None)
    out.adapters = []
    out.meta["merged"] = True
    return out


def prune_inactive(ckpt: Checkpoint) -> Checkpoint:
    """Remove inactive blocks (entries and tensors); the forward pass is unchanged."""
    out = ckpt.copy()
    keep = []
    for entry in ckpt.adapters:
        if entry["active"]:
            keep.append(entry)
            continue
        pre = _adapter_prefix(entry["site"])
        for name in [n for n in out.tensors if n.startswith(pre)]:
            del out.tensors[name]
            out.dtypes.pop(name, None)
    out.adapters = keep
    return out


# ---------------------------------------------------------------- activation reports

@dataclass
class ActivationReport:
    grid: np.ndarray  # (len(SITE_KINDS), layers) fraction of runs ending active
    runs: int
    kinds: tuple[str, ...] = SITE_KINDS

    @property
    def layers(self) -> int:
        return self.grid.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("kind," + ",".join(f"layer{i}" for i in range(self.layers)) + "\n")
        for kind, row in zip(self.kinds, self.grid):
            buf.write(kind + "," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def to_svg(self, cell: int = 28) -> str:
        label_w, label_h = 56, 18
        w = label_w + cell * self.layers
        h = label_h + cell * len(self.kinds)
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">']
        for j in range(self.layers):
            parts.append(f'<text x="{label_w + j * cell + cell // 2}" y="12" text-anchor="middle">{j}</text>')
        for i, kind in enumerate(self.kinds):
            y = label_h + i * cell
            parts.append(f'<text x="2" y="{y + cell // 2 + 4}">{kind}</text>')
            for j in range(self.layers):
                shade = int(round(255 * (1.0 - float(self.grid[i, j]))))
                parts.append(f'<rect x="{label_w + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="rgb({shade},{shade},255)" stroke="#888"><title>{kind} L{j}: '
                             f'{float(self.grid[i, j]):.3f}</title></rect>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def activation_report(runs: Sequence) -> ActivationReport:
    """Per-(kind, layer) fraction of runs whose gate ended active.

    Each run is a RunResult (its selected gates) or a list of GateRecords.
    """
    if not runs:
        raise ContractError("activation_report needs at least one run")
    snaps = [r.selected_gates if isinstance(r, RunResult) else list(r) for r in runs]
    layouts = {tuple(sorted((g.site.order for g in s))) for s in snaps}
    if len(layouts) != 1:
        raise ContractError("runs disagree on model shape / adapter sites")
    layers = 1 + max(g.site.layer for g in snaps[0])
    grid = np.zeros((len(SITE_KINDS), layers))
    for snap in snaps:
        for g in snap:
            if g.active:
                grid[SITE_KINDS.index(g.site.kind), g.site.layer] += 1
    return ActivationReport(grid / len(snaps), len(snaps))


def load_run_gates(runs_dir: str | Path) -> list[list[GateRecord]]:
    """Gate records from every checkpoint directory under ``runs_dir`` (sorted by path)."""
    out = []
    for manifest in sorted(Path(runs_dir).rglob(MANIFEST)):
        ckpt = load_checkpoint(manifest.parent)
        if ckpt.adapters:
            out.append([GateRecord(SiteId.parse(e["site"]), float(e["score"]), bool(e["active"]))
                        for e in ckpt.adapters])
    return out


# ---------------------------------------------------------------- random selection

def random_sites(n_active: int, seed: int, cfg: ModelConfig) -> list[SiteId]:
    sites = enumerate_sites(cfg)
    if not 0 <= n_active <= len(sites):
        raise ContractError(f"n_active={n_active} outside [0, {len(sites)}]")
    rng = np.random.default_rng([seed, 1009])
    picked = np.sort(rng.choice(len(sites), size=n_active, replace=False))
    return [sites[i] for i in picked]


def random_selection_baseline(n_active: int, seed: int, run: RunConfig, init: TinyViT | None = None,
                              evaluate: bool = True) -> RunResult:
    """Fine-tune with ``n_active`` uniformly chosen sites fixed on and every other gate off."""
    sites = random_sites(n_active, seed, run.model)
    result = finetune(run.replace(seed=seed), init, fixed_gates=sites, evaluate=evaluate)
    result.metrics["random_sites"] = [str(s) for s in sites]
    return result
