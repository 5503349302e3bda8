"""Gated low-rank adapter blocks.

A block adds ``g * (alpha / r) * A @ B`` to a frozen weight ``W0`` where the
gate ``g = 1[score >= tau]`` is a hard indicator on a learnable scalar score.
In backward the indicator is treated as identity (straight-through), so the
score receives the derivative of the relaxed layer

    y(m) = x @ W0 + m * (alpha / r) * (x @ A) @ B

evaluated at ``m = g``.  DoRA blocks gate their whole reparameterised delta
``W' - W0`` the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

KINDS = ("lora", "dora")
REG_KINDS = ("l1", "l2", "hinge")


def indicator(score: float, tau: float) -> int:
    if tau <= 0:
        raise ConfigError(f"gate threshold must be positive, got {tau}")
    return 1 if score >= tau else 0


@dataclass
class GateState:
    score: Tensor
    tau: float = 0.1
    trainable: bool = True

    def __post_init__(self):
        if not isinstance(self.score, Tensor):
            self.score = Tensor(float(self.score))
        if self.score.shape != ():
            raise DimensionError(f"gate score must be 0-d, got {self.score.shape}")
        if self.tau <= 0:
            raise ConfigError(f"gate threshold must be positive, got {self.tau}")
        self.score.requires_grad = self.trainable

    @property
    def value(self) -> float:
        return float(self.score.data)

    @property
    def active(self) -> bool:
        return indicator(self.value, self.tau) == 1

    def set_score(self, value: float) -> None:
        self.score.data[...] = value


@dataclass
class AdapterBlock:
    a: Tensor
    b: Tensor
    alpha: float
    kind: str
    gate: GateState
    site: object = None
    magnitude: Tensor | None = None
    ste: bool = True
    always_flow: bool = False
    # finite-difference hook: replaces the hard gate in forward when set
    multiplier: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        m, r = self.a.shape
        r2, n = self.b.shape
        if r != r2:
            raise DimensionError(f"adapter factors disagree: {self.a.shape} vs {self.b.shape}")
        if not 1 <= r <= min(m, n):
            raise ConfigError(f"rank {r} outside [1, min({m}, {n})]")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.kind == "lora" and self.magnitude is not None:
            raise ConfigError("LoRA blocks carry no magnitude vector")
        if self.kind == "dora" and (self.magnitude is None or self.magnitude.shape != (n,)):
            raise ConfigError(f"DoRA blocks need a magnitude vector of length {n}")

    @classmethod
    def create(cls, w0: Tensor, rank: int, alpha: float, kind: str = "lora", site=None,
               tau: float = 0.1, s_init: float = 0.5, trainable_score: bool = True,
               rng: np.random.Generator | None = None, init_std: float = 0.02, **flags) -> "AdapterBlock":
        rng = rng if rng is not None else np.random.default_rng(0)
        m, n = w0.shape
        a = Tensor(rng.normal(0.0, init_std, size=(m, rank)), requires_grad=True)
        b = Tensor(np.zeros((rank, n)), requires_grad=True)
        mag = None
        if kind == "dora":
            mag = Tensor(np.sqrt(np.sum(w0.data ** 2, axis=0)), requires_grad=True)
        gate = GateState(Tensor(float(s_init)), tau=tau, trainable=trainable_score)
        return cls(a=a, b=b, alpha=float(alpha), kind=kind, gate=gate, site=site, magnitude=mag, **flags)

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def active(self) -> bool:
        return self.gate.active

    def parameters(self) -> list[Tensor]:
        ps = [self.a, self.b]
        if self.magnitude is not None:
            ps.append(self.magnitude)
        return ps

    def forward(self, x: Tensor, w0: Tensor) -> Tensor:
        if self.kind == "lora":
            return gated_lora_forward(x, w0, self)
        return gated_dora_forward(x, w0, self)

    def effective_weight(self, w0: np.ndarray) -> np.ndarray:
        """Folded weight ``W0 + g * delta`` as a plain array."""
        if not self.active:
            return w0.copy()
        if self.kind == "lora":
            return w0 + self.scale * (self.a.data @ self.b.data)
        return _dora_weight_np(w0, self.a.data, self.b.data, self.magnitude.data, self.scale)


def _gate_value(blk: AdapterBlock) -> float:
    if blk.multiplier is not None:
        return float(blk.multiplier)
    return float(indicator(blk.gate.value, blk.gate.tau))


def gated_lora_forward(x: Tensor, w0: Tensor, blk: AdapterBlock) -> Tensor:
    """``x @ w0 + g * (alpha/r) * (x @ a) @ b``; the adapter path is skipped when g == 0."""
    if x.shape[-1] != w0.shape[0] or blk.a.shape[0] != w0.shape[0] or blk.b.shape[1] != w0.shape[1]:
        raise DimensionError(f"gated_lora_forward: x {x.shape}, w0 {w0.shape}, a {blk.a.shape}, b {blk.b.shape}")
    g = _gate_value(blk)
    s = blk.scale
    a, b, score = blk.a, blk.b, blk.gate.score
    base = np.matmul(x.data, w0.data)
    xa = xab = None
    if g != 0.0:
        xa = np.matmul(x.data, a.data)
        xab = np.matmul(xa, b.data)
        out = base + (g * s) * xab
    else:
        out = base
    flow = g * s if g != 0.0 else (s if blk.always_flow else 0.0)

    def bw(dy):
        nonlocal xa, xab
        gx = ga = gb = gs = None
        if flow != 0.0 or (blk.ste and score.requires_grad):
            if xa is None:
                xa = np.matmul(x.data, a.data)
        if x.requires_grad:
            gx = np.matmul(dy, w0.data.T)
        if flow != 0.0:
            dyb = np.matmul(dy, b.data.T)
            if x.requires_grad and g != 0.0:
                gx = gx + (g * s) * np.matmul(dyb, a.data.T)
            if a.requires_grad:
                ga = flow * (x.data.reshape(-1, x.shape[-1]).T @ dyb.reshape(-1, dyb.shape[-1]))
            if b.requires_grad:
                gb = flow * (xa.reshape(-1, xa.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
        if blk.ste and score.requires_grad:
            if xab is None:
                xab = np.matmul(xa, b.data)
            gs = np.asarray(s * np.sum(dy * xab))
        return gx, ga, gb, gs

    return T._result(out, (x, a, b, score), bw)


def _dora_weight_np(w0, a, b, mag, s):
    v = w0 + s * (a @ b)
    norm = np.sqrt(np.sum(v * v, axis=0))
    return mag * (v / np.where(norm > 0, norm, 1.0))


def dora_weight(w0: Tensor, blk: AdapterBlock) -> Tensor:
    """Differentiable ``magnitude * V / ||V||_col`` with ``V = w0 + (alpha/r) a b``."""
    v = T.add(T.scale(T.matmul(blk.a, blk.b), blk.scale), w0)
    return T.mul(T.div(v, T.col_norm(v)), blk.magnitude)


def gated_dora_forward(x: Tensor, w0: Tensor, blk: AdapterBlock) -> Tensor:
    """Gate on: ``x @ W'``.  Gate off: ``x @ w0`` exactly, magnitude included in the bypass."""
    if blk.kind != "dora" or blk.magnitude is None:
        raise ConfigError("gated_dora_forward needs a DoRA block")
    if x.shape[-1] != w0.shape[0] or blk.a.shape[0] != w0.shape[0] or blk.b.shape[1] != w0.shape[1]:
        raise DimensionError(f"gated_dora_forward: x {x.shape}, w0 {w0.shape}, a {blk.a.shape}, b {blk.b.shape}")
    g = _gate_value(blk)
    if g == 0.0:
        y = T.matmul(x, w0)
    elif g == 1.0:
        y = T.matmul(x, dora_weight(w0, blk))
    else:
        w = T.add(T.scale(T.sub(dora_weight(w0, blk), w0), g), w0)
        y = T.matmul(x, w)
    score = blk.gate.score
    if not (blk.ste and score.requires_grad):
        return y

    def bw(dy):
        delta = _dora_weight_np(w0.data, blk.a.data, blk.b.data, blk.magnitude.data, blk.scale) - w0.data
        return dy, np.asarray(np.sum(dy * np.matmul(x.data, delta)))

    return T._result(y.data, (y, score), bw)


# ---------------------------------------------------------------- regularizers

@dataclass
class RegularizerSpec:
    kind: str = "l1"
    lam: float = 1.0
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ConfigError(f"unknown regularizer {self.kind!r}; expected one of {REG_KINDS}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "hinge" and self.tau is None:
            raise ConfigError("hinge regularizer needs tau")


def regularizer_value(scores: Sequence[float], spec: RegularizerSpec) -> float:
    s = np.asarray(scores, dtype=np.float64)
    if spec.kind == "l1":
        v = np.abs(s).sum()
    elif spec.kind == "l2":
        v = (s * s).sum()
    else:
        v = np.maximum(0.0, s - spec.tau).sum()
    return float(spec.lam * v)


def regularizer_grad(scores: Sequence[float], spec: RegularizerSpec) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if spec.kind == "l1":
        return spec.lam * np.sign(s)
    if spec.kind == "l2":
        return 2.0 * spec.lam * s
    return spec.lam * (s > spec.tau).astype(np.float64)


def regularizer(scores: Sequence[Tensor], spec: RegularizerSpec) -> Tensor:
    """Penalty over gate score tensors as a differentiable scalar."""
    vals = [float(t.data) for t in scores]
    out = np.asarray(regularizer_value(vals, spec))
    grads = regularizer_grad(vals, spec)

    def bw(g):
        return tuple(np.asarray(g * gi) for gi in grads)

    return T._result(out, tuple(scores), bw)


def total_loss(task_loss, scores: Sequence, spec: RegularizerSpec):
    """Return ``(task + penalty, penalty)``.

    Accepts tensors (training path) or plain floats (reporting path).
    """
    if isinstance(task_loss, Tensor):
        reg = regularizer([s if isinstance(s, Tensor) else Tensor(s) for s in scores], spec)
        return T.add(task_loss, reg), reg
    vals = [float(s.data) if isinstance(s, Tensor) else float(s) for s in scores]
    reg = regularizer_value(vals, spec)
    return float(task_loss) + reg, reg


@dataclass(frozen=True)
class ActiveFraction:
    count: int
    total: int

    @property
    def percent(self) -> float:
        return round(100.0 * self.count / self.total, 2)

    @property
    def fraction(self) -> float:
        return self.count / self.total


def active_fraction(gates: Sequence[GateState]) -> ActiveFraction:
    if not gates:
        raise ContractError("active_fraction of an empty gate list")
    return ActiveFraction(sum(1 for g in gates if g.active), len(gates))
