"""A small pre-norm vision transformer with six adapter sites per layer.

Sites per layer, in order: ``q``, ``k``, ``v`` (attention projections),
``mlp_1`` (attention output projection), ``mlp_2`` and ``mlp_3`` (the two
feed-forward linears).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .adapters import AdapterBlock, GateState, active_fraction
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SITE_KINDS = ("q", "k", "v", "mlp_1", "mlp_2", "mlp_3")


@dataclass(frozen=True)
class SiteId:
    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in SITE_KINDS:
            raise ConfigError(f"unknown site kind {self.kind!r}")
        if self.layer < 0:
            raise ConfigError(f"negative layer index {self.layer}")

    @property
    def order(self) -> tuple[int, int]:
        return self.layer, SITE_KINDS.index(self.kind)

    def __str__(self) -> str:
        return f"{self.layer}.{self.kind}"

    @classmethod
    def parse(cls, text: str) -> "SiteId":
        layer, _, kind = text.partition(".")
        try:
            return cls(int(layer), kind)
        except ValueError:
            raise ConfigError(f"bad site id {text!r}") from None


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 64
    heads: int = 4
    layers: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "dim", "heads", "layers", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def hidden(self) -> int:
        return self.mlp_ratio * self.dim

    def site_shape(self, kind: str) -> tuple[int, int]:
        d, h = self.dim, self.hidden
        return {"mlp_2": (d, h), "mlp_3": (h, d)}.get(kind, (d, d))

    def to_dict(self) -> dict:
        return asdict(self)


def enumerate_sites(cfg: ModelConfig) -> list[SiteId]:
    return [SiteId(layer, kind) for layer in range(cfg.layers) for kind in SITE_KINDS]


# parameter-name stem of the linear behind each site
_SITE_LINEAR = {"q": "attn.q", "k": "attn.k", "v": "attn.v", "mlp_1": "attn.out", "mlp_2": "mlp.fc1", "mlp_3": "mlp.fc2"}


def site_weight_name(site: SiteId) -> str:
    return f"layers.{site.layer}.{_SITE_LINEAR[site.kind]}.weight"


class Linear:
    def __init__(self, weight: Tensor, bias: Tensor, site: SiteId | None = None):
        self.weight = weight
        self.bias = bias
        self.site = site
        self.adapter: AdapterBlock | None = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.adapter is None:
            proj = T.matmul(x, self.weight)
        else:
            proj = self.adapter.forward(x, self.weight)
        return T.add(proj, self.bias)


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(b, c, H, W) -> (b, T, c*p*p), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != want:
        raise DimensionError(f"expected images of shape (b, {want[0]}, {want[1]}, {want[2]}), got {images.shape}")
    b, c, H, W = images.shape
    p = cfg.patch_size
    x = images.reshape(b, c, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (H // p) * (W // p), c * p * p)


class TinyViT:
    """Class-token ViT classifier.  Parameters live in ``self.params`` by name."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, L = cfg.dim, cfg.layers
        p: dict[str, Tensor] = {}

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape))

        p["patch.weight"] = normal(cfg.patch_dim, d)
        p["patch.bias"] = Tensor(np.zeros(d))
        p["cls"] = normal(d)
        p["pos"] = normal(cfg.tokens, d)
        for i in range(L):
            pre = f"layers.{i}"
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}.gamma"] = Tensor(np.ones(d))
                p[f"{pre}.{ln}.beta"] = Tensor(np.zeros(d))
            for kind in SITE_KINDS:
                m, n = cfg.site_shape(kind)
                stem = f"{pre}.{_SITE_LINEAR[kind]}"
                p[f"{stem}.weight"] = normal(m, n)
                p[f"{stem}.bias"] = Tensor(np.zeros(n))
        p["norm.gamma"] = Tensor(np.ones(d))
        p["norm.beta"] = Tensor(np.zeros(d))
        p["head.weight"] = normal(d, cfg.num_classes)
        p["head.bias"] = Tensor(np.zeros(cfg.num_classes))
        for name, t in p.items():
            t.name = name
        self.params = p
        self.linears: dict[SiteId, Linear] = {}
        for site in enumerate_sites(cfg):
            stem = f"layers.{site.layer}.{_SITE_LINEAR[site.kind]}"
            self.linears[site] = Linear(p[f"{stem}.weight"], p[f"{stem}.bias"], site)

    # ------------------------------------------------------------ params

    def head_names(self) -> list[str]:
        return ["head.weight", "head.bias"]

    def trunk_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def set_trainable(self, trunk: bool, head: bool = True) -> None:
        for name, t in self.params.items():
            t.requires_grad = head if name.startswith("head.") else trunk

    def adapters(self) -> list[AdapterBlock]:
        return [lin.adapter for lin in self.linears.values() if lin.adapter is not None]

    def gates(self) -> list[GateState]:
        return [blk.gate for blk in self.adapters()]

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for blk in self.adapters():
            pre = f"adapters.{blk.site}"
            out[f"{pre}.a"] = blk.a
            out[f"{pre}.b"] = blk.b
            if blk.magnitude is not None:
                out[f"{pre}.magnitude"] = blk.magnitude
            out[f"{pre}.score"] = blk.gate.score
        return out

    def attach_adapters(self, kind: str = "lora", rank: int = 8, alpha: float = 16.0, tau: float = 0.1,
                        s_init: float = 0.5, seed: int = 0, sites=None, trainable_scores: bool = True,
                        ste: bool = True, always_flow: bool = False) -> list[AdapterBlock]:
        """Attach one adapter per site (all sites by default), in site order.

        Each block's init is seeded from ``(seed, site position)`` so a subset
        of sites gets the same initial factors it would get in a full attach.
        """
        chosen = set(enumerate_sites(self.cfg) if sites is None else sites)
        blocks = []
        for idx, site in enumerate(enumerate_sites(self.cfg)):
            if site not in chosen:
                continue
            lin = self.linears[site]
            rng = np.random.default_rng([seed, idx])
            blk = AdapterBlock.create(lin.weight, rank, alpha, kind, site=site, tau=tau, s_init=s_init,
                                      trainable_score=trainable_scores, rng=rng, ste=ste, always_flow=always_flow)
            lin.adapter = blk
            blocks.append(blk)
        return blocks

    def detach_adapters(self) -> None:
        for lin in self.linears.values():
            lin.adapter = None

    # ------------------------------------------------------------ forward

    def patch_embed(self, images) -> Tensor:
        cfg, p = self.cfg, self.params
        patches = Tensor._wrap(patchify(images, cfg))
        tokens = T.add(T.matmul(patches, p["patch.weight"]), p["patch.bias"])
        b = patches.shape[0]
        cls = T.repeat_rows(T.reshape(p["cls"], (1, cfg.dim)), b)
        return T.add(T.concat([cls, tokens], axis=1), p["pos"])

    def attention_block(self, x: Tensor, layer: int) -> Tensor:
        cfg, p = self.cfg, self.params
        pre = f"layers.{layer}"
        b, n, d = x.shape
        heads = cfg.heads
        dh = d // heads
        h = T.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])

        def split(t):
            return T.permute(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

        q = split(self.linears[SiteId(layer, "q")](h))
        k = split(self.linears[SiteId(layer, "k")](h))
        v = split(self.linears[SiteId(layer, "v")](h))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh)))
        o = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        return T.add(x, self.linears[SiteId(layer, "mlp_1")](o))

    def mlp_block(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        pre = f"layers.{layer}"
        h = T.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        h = T.gelu(self.linears[SiteId(layer, "mlp_2")](h))
        return T.add(x, self.linears[SiteId(layer, "mlp_3")](h))

    def embed(self, images) -> Tensor:
        """Pre-head embedding: final-norm class token, shape (b, dim)."""
        x = self.patch_embed(images)
        for layer in range(self.cfg.layers):
            x = self.mlp_block(self.attention_block(x, layer), layer)
        x = T.layer_norm(x, self.params["norm.gamma"], self.params["norm.beta"])
        return T.take(x, 0, axis=1)

    def head(self, emb: Tensor) -> Tensor:
        return T.add(T.matmul(emb, self.params["head.weight"]), self.params["head.bias"])

    def __call__(self, images) -> Tensor:
        return self.head(self.embed(images))

    forward = __call__

    def forward_with_embedding(self, images) -> tuple[Tensor, Tensor]:
        emb = self.embed(images)
        return self.head(emb), emb

    # ------------------------------------------------------------ state

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        named = self.named_tensors()
        for name, arr in arrays.items():
            if name not in named:
                if strict:
                    raise KeyError(f"unexpected tensor {name}")
                continue
            if named[name].shape != np.shape(arr):
                raise DimensionError(f"{name}: expected {named[name].shape}, got {np.shape(arr)}")
            named[name].data[...] = arr


def model_forward(model: TinyViT, images) -> Tensor:
    return model(images)


@dataclass(frozen=True)
class GateRecord:
    site: SiteId
    score: float
    active: bool


def gate_snapshot(model: TinyViT) -> list[GateRecord]:
    return [GateRecord(blk.site, blk.gate.value, blk.gate.active)
            for blk in sorted(model.adapters(), key=lambda b: b.site.order)]


def model_active_fraction(model: TinyViT):
    return active_fraction(model.gates())


def iter_batches(n: int, batch: int) -> Iterator[slice]:
    for start in range(0, n, batch):
        yield slice(start, min(n, start + batch))
