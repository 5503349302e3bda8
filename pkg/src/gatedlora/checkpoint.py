"""Checkpoint directories: ``tensors.bin`` (raw little-endian floats) + ``manifest.json``.

The manifest carries the model config, the run config (when known), one entry
per adapter block ``{site, kind, rank, alpha, score, tau, active, ...}`` and
the tensor table ``{name, shape, dtype, offset}``.  Weights are stored as
float32 unless a wider precision is requested; gate scores are always stored
as float64 so a reload never flips a gate sitting next to its threshold.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import AdapterBlock, GateState
from .config import RunConfig
from .errors import ConfigError, FormatError
from .model import ModelConfig, SiteId, TinyViT, site_weight_name
from .tensor import Tensor, read_blob, write_blob

FORMAT = "gatedlora-checkpoint/1"
BLOB = "tensors.bin"
MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model: dict
    adapters: list[dict] = field(default_factory=list)
    run: dict | None = None
    meta: dict = field(default_factory=dict)
    dtypes: dict[str, str] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    @property
    def run_config(self) -> RunConfig | None:
        return RunConfig.from_dict(self.run) if self.run is not None else None

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()}, dict(self.model),
                          copy.deepcopy(self.adapters), copy.deepcopy(self.run), copy.deepcopy(self.meta),
                          dict(self.dtypes))

    def nbytes(self) -> int:
        width = {"float32": 4, "float64": 8}
        return sum(v.size * width[self.dtypes.get(k, "float32")] for k, v in self.tensors.items())


def adapter_entry(blk: AdapterBlock) -> dict:
    return {"site": str(blk.site), "kind": blk.kind, "rank": blk.rank, "alpha": blk.alpha,
            "score": blk.gate.value, "tau": blk.gate.tau, "active": blk.gate.active,
            "trainable": blk.gate.trainable, "ste": blk.ste, "always_flow": blk.always_flow}


def checkpoint_from_model(model: TinyViT, run: RunConfig | None = None, precision: str = "float32",
                          meta: dict | None = None) -> Checkpoint:
    tensors, dtypes = {}, {}
    for name, t in model.named_tensors().items():
        tensors[name] = t.data.copy()
        dtypes[name] = "float64" if name.endswith(".score") else precision
    entries = [adapter_entry(b) for b in sorted(model.adapters(), key=lambda b: b.site.order)]
    return Checkpoint(tensors, model.cfg.to_dict(), entries, run.to_dict() if run else None,
                      dict(meta or {}), dtypes)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.tensors)
    entries = write_blob(path / BLOB, ((n, ckpt.tensors[n], ckpt.dtypes.get(n, "float32")) for n in names))
    manifest = {"format": FORMAT, "model": ckpt.model, "run": ckpt.run, "adapters": ckpt.adapters,
                "meta": ckpt.meta, "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def save_checkpoint(path: str | Path, model: TinyViT, run: RunConfig | None = None,
                    precision: str = "float32", meta: dict | None = None) -> Path:
    return write_checkpoint(checkpoint_from_model(model, run, precision, meta), path)


def load_checkpoint(path: str | Path, expect: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint directory; warns when ``expect`` differs from the stored run config."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    if not (path / BLOB).exists():
        raise FormatError(f"{path}: no {BLOB}")
    entries = manifest["tensors"]
    tensors = read_blob(path / BLOB, entries)
    dtypes = {e["name"]: e["dtype"] for e in entries}
    ckpt = Checkpoint(tensors, manifest["model"], manifest.get("adapters", []), manifest.get("run"),
                      manifest.get("meta", {}), dtypes)
    if expect is not None and ckpt.run is not None and ckpt.run != expect.to_dict():
        warnings.warn(f"{path}: checkpoint was written under a different run config", stacklevel=2)
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> TinyViT:
    """Rebuild the model (and its adapters) from a checkpoint, checking the tensor table both ways."""
    try:
        cfg = ckpt.model_config
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"bad model config in manifest: {exc}") from None
    model = TinyViT(cfg)
    for entry in ckpt.adapters:
        site = SiteId.parse(entry["site"])
        if entry["kind"] not in ("lora", "dora"):
            raise FormatError(f"unknown adapter kind {entry['kind']!r} at {site}")
        lin = model.linears[site]
        m, n = lin.weight.shape
        r = int(entry["rank"])
        gate = GateState(Tensor(float(entry["score"])), tau=float(entry["tau"]),
                         trainable=bool(entry.get("trainable", True)))
        mag = Tensor(np.ones(n), requires_grad=True) if entry["kind"] == "dora" else None
        lin.adapter = AdapterBlock(Tensor(np.zeros((m, r)), requires_grad=True),
                                   Tensor(np.zeros((r, n)), requires_grad=True),
                                   float(entry["alpha"]), entry["kind"], gate, site=site, magnitude=mag,
                                   ste=bool(entry.get("ste", True)), always_flow=bool(entry.get("always_flow", False)))
    named = model.named_tensors()
    missing = sorted(set(named) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(named))
    if missing:
        raise FormatError(f"checkpoint lacks tensor(s) {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if extra:
        raise FormatError(f"checkpoint has tensor(s) not described by the manifest: {extra[:5]}")
    for name, t in named.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != t.shape:
            raise FormatError(f"{name}: manifest shape {arr.shape} vs model {t.shape}")
        t.data[...] = arr
    model.set_trainable(trunk=False, head=False)
    return model


def load_model(path: str | Path, expect: RunConfig | None = None) -> TinyViT:
    return model_from_checkpoint(load_checkpoint(path, expect))


def trunk_weight_name(site: SiteId) -> str:
    return site_weight_name(site)
