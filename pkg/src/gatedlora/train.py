"""Optimizers, the warmup+cosine schedule, and the pretrain / fine-tune loops."""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .adapters import active_fraction, regularizer
from .config import OptimSpec, RunConfig, ScheduleSpec
from .data import Dataset, knn_eval, resolve_dataset, top1_accuracy
from .errors import ContractError, NumericAbort
from .model import GateRecord, SiteId, TinyViT, enumerate_sites, gate_snapshot, iter_batches
from .tensor import Tensor

CSV_COLUMNS = ("step", "lr", "task_loss", "reg_loss", "val_acc", "active_pct")


def cosine_warmup_lr(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to ``floor``."""
    total, warm = spec.total_steps, spec.warmup_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warm:
        return spec.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return spec.floor + (spec.base_lr - spec.floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- optimizers

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], spec: OptimSpec, state: dict,
             lr: float, decay: Sequence[bool] | None = None) -> None:
    """In-place momentum SGD (heavy ball, no dampening) with coupled weight decay."""
    bufs = state.setdefault("momentum", [None] * len(params))
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if spec.weight_decay and (decay is None or decay[i]):
            g = g + spec.weight_decay * p
        if spec.momentum:
            bufs[i] = g.copy() if bufs[i] is None else spec.momentum * bufs[i] + g
            g = bufs[i]
        p -= lr * g


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], spec: OptimSpec, state: dict,
               lr: float, decay: Sequence[bool] | None = None) -> None:
    """In-place AdamW: decoupled decay, bias-corrected moments, per-parameter step counts."""
    b1, b2 = spec.betas
    n = len(params)
    ms = state.setdefault("m", [None] * n)
    vs = state.setdefault("v", [None] * n)
    ts = state.setdefault("t", [0] * n)
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ContractError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if ms[i] is None:
            ms[i] = np.zeros_like(p)
            vs[i] = np.zeros_like(p)
        ts[i] += 1
        if spec.weight_decay and (decay is None or decay[i]):
            p *= 1.0 - lr * spec.weight_decay
        ms[i] = b1 * ms[i] + (1.0 - b1) * g
        vs[i] = b2 * vs[i] + (1.0 - b2) * g * g
        mhat = ms[i] / (1.0 - b1 ** ts[i])
        vhat = vs[i] / (1.0 - b2 ** ts[i])
        p -= lr * mhat / (np.sqrt(vhat) + spec.eps)


@dataclass
class Param:
    tensor: Tensor
    decay: bool = True
    lr_scale: float = 1.0
    # updates are skipped entirely (state untouched) while this returns False
    active: Callable[[], bool] | None = None


class Optimizer:
    def __init__(self, params: Sequence[Param], spec: OptimSpec):
        self.params = list(params)
        self.spec = spec
        self.states = [dict() for _ in self.params]
        self._fn = sgd_step if spec.kind == "sgd_momentum" else adamw_step

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self, lr: float) -> None:
        for p, state in zip(self.params, self.states):
            if p.active is not None and not p.active():
                continue
            if p.tensor.grad is None:
                continue
            self._fn([p.tensor.data], [p.tensor.grad.data], self.spec, state, lr * p.lr_scale, [p.decay])


# ---------------------------------------------------------------- evaluation helpers

def predict(model: TinyViT, images: np.ndarray, batch: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Logits and pre-head embeddings without recording a graph."""
    logits, embs = [], []
    with T.no_grad():
        for sl in iter_batches(len(images), batch):
            lg, em = model.forward_with_embedding(images[sl])
            logits.append(lg.data)
            embs.append(em.data)
    if not logits:
        return np.zeros((0, model.cfg.num_classes)), np.zeros((0, model.cfg.dim))
    return np.concatenate(logits), np.concatenate(embs)


def evaluate_top1(model: TinyViT, ds: Dataset) -> float:
    logits, _ = predict(model, ds.images)
    return top1_accuracy(logits, ds.labels)


def evaluate_knn(model: TinyViT, bank: Dataset, queries: Dataset, k: int = 20) -> float:
    _, train_emb = predict(model, bank.images)
    _, test_emb = predict(model, queries.images)
    return knn_eval(train_emb, bank.labels, test_emb, queries.labels, k)


# ---------------------------------------------------------------- results

@dataclass
class RunResult:
    config: RunConfig
    timeline: list[dict] = field(default_factory=list)
    sites: list[SiteId] = field(default_factory=list)
    gate_trajectory: np.ndarray | None = None
    final_gates: list[GateRecord] = field(default_factory=list)
    selected_gates: list[GateRecord] = field(default_factory=list)
    best_step: int | None = None
    best_val: float | None = None
    metrics: dict = field(default_factory=dict)
    model: TinyViT | None = None

    @property
    def final_active_pct(self) -> float:
        if not self.final_gates:
            return 0.0
        return round(100.0 * sum(g.active for g in self.final_gates) / len(self.final_gates), 2)

    @property
    def selected_active_count(self) -> int:
        return sum(g.active for g in self.selected_gates)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for row in self.timeline:
            buf.write(",".join(_fmt(row.get(c)) for c in CSV_COLUMNS) + "\n")
        return buf.getvalue()

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.metrics_csv())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- loops

def clone_model(model: TinyViT) -> TinyViT:
    """Fresh copy of the base model; adapters are not carried over."""
    out = TinyViT(model.cfg)
    out.load_arrays({n: t.data for n, t in model.params.items()})
    return out


class _Batches:
    def __init__(self, n: int, batch: int, seed: int):
        self.n, self.batch = n, batch
        self.rng = np.random.default_rng([seed, 7])
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def _train(model: TinyViT, run: RunConfig, train: Dataset, val: Dataset, params: list[Param],
           log_gates: bool, final_eval: Callable[[TinyViT], dict] | None = None) -> RunResult:
    sched = run.schedule.resolved(run.optim.lr, run.steps)
    opt = Optimizer(params, run.optim)
    gates = model.gates()
    scores = [g.score for g in gates]
    result = RunResult(config=run, sites=[b.site for b in model.adapters()])
    traj = np.empty((run.steps + 1, len(gates)))
    if gates:
        traj[0] = [g.value for g in gates]
    batches = _Batches(len(train), min(run.batch_size, len(train)), run.seed)
    trainable = [p.tensor for p in params]
    best = None

    def snapshot():
        return [t.data.copy() for t in trainable]

    for step in range(1, run.steps + 1):
        lr = cosine_warmup_lr(step, sched)
        idx = batches.next()
        opt.zero_grad()
        logits = model(train.images[idx])
        task = T.cross_entropy(logits, train.labels[idx])
        reg = regularizer(scores, run.reg) if scores else Tensor(0.0)
        total = T.add(task, reg)
        if not np.isfinite(total.data):
            raise NumericAbort(f"non-finite loss {float(total.data)} at step {step}")
        if total.requires_grad:
            total.backward()
        opt.step(lr)
        row = {"step": step, "lr": lr, "task_loss": float(task.data), "reg_loss": float(reg.data),
               "val_acc": None, "active_pct": active_fraction(gates).percent if gates else None}
        if gates:
            traj[step] = [g.value for g in gates]
        if step % run.eval_every == 0 or step == run.steps:
            acc = evaluate_top1(model, val)
            row["val_acc"] = acc
            if best is None or acc > best[1]:
                best = (step, acc, snapshot())
        result.timeline.append(row)

    result.gate_trajectory = traj if log_gates and gates else None
    result.final_gates = gate_snapshot(model)
    if final_eval is not None:
        result.metrics.update(final_eval(model))
    if best is not None:
        result.best_step, result.best_val = best[0], best[1]
        if run.selection == "best_val":
            for t, arr in zip(trainable, best[2]):
                t.data[...] = arr
    result.selected_gates = gate_snapshot(model)
    result.model = model
    return result


def pretrain(run: RunConfig, evaluate: bool = True) -> RunResult:
    """Supervised training of the whole model on the source task (no adapters)."""
    model = TinyViT(run.model, seed=run.seed)
    model.set_trainable(trunk=True, head=True)
    train = resolve_dataset(run.source, split="train")
    val = resolve_dataset(run.source, split="val")
    params = [Param(t, decay=t.ndim >= 2) for t in model.params.values()]
    result = _train(model, run, train, val, params, log_gates=False)
    model.set_trainable(trunk=False, head=False)
    if evaluate:
        test = resolve_dataset(run.source, split="test")
        result.metrics["source_top1"] = evaluate_top1(model, test)
        result.metrics["source_val_top1"] = evaluate_top1(model, val)
    return result


def finetune(run: RunConfig, init: TinyViT | None = None, fixed_gates: Iterable[SiteId] | None = None,
             evaluate: bool = True) -> RunResult:
    """Adapter fine-tuning on the target task with the gate penalty.

    ``init`` supplies the pretrained trunk (copied, never mutated); a fresh
    model is used when omitted.  ``fixed_gates`` freezes every score and turns
    on exactly the listed sites (random-selection baseline).
    """
    base = init if init is not None else TinyViT(run.model, seed=run.seed)
    model = clone_model(base)
    model.set_trainable(trunk=False, head=True)
    ad = run.adapter
    fixed = None if fixed_gates is None else set(fixed_gates)
    trainable_scores = ad.gated and fixed is None
    blocks = model.attach_adapters(ad.kind, ad.rank, ad.alpha, ad.tau, ad.s_init, seed=run.seed,
                                   trainable_scores=trainable_scores, ste=ad.ste, always_flow=ad.always_flow)
    if fixed is not None:
        unknown = fixed - set(enumerate_sites(run.model))
        if unknown:
            raise ContractError(f"fixed gates name unknown sites {sorted(map(str, unknown))}")
        for blk in blocks:
            blk.gate.set_score(ad.s_init if blk.site in fixed else 0.0)

    params = [Param(model.params[n]) for n in model.head_names()]
    for blk in blocks:
        live = (lambda b=blk: b.active or b.always_flow)
        params.extend(Param(t, active=live) for t in blk.parameters())
        if blk.gate.trainable:
            params.append(Param(blk.gate.score, decay=False, lr_scale=ad.score_lr_scale))

    train = resolve_dataset(run.target, split="train")
    val = resolve_dataset(run.target, split="val")
    # target accuracy of the last-step state, whose gates are the "final" ones
    final_eval = None
    if evaluate:
        test = resolve_dataset(run.target, split="test")
        final_eval = lambda m: {"final_target_top1": evaluate_top1(m, test)}  # noqa: E731
    result = _train(model, run, train, val, params, log_gates=True, final_eval=final_eval)
    if evaluate:
        result.metrics.update(evaluate_run(model, run))
    return result


def evaluate_run(model: TinyViT, run: RunConfig) -> dict:
    """Target top-1 on held-out target data and source K-NN retention."""
    out = {"target_top1": evaluate_top1(model, resolve_dataset(run.target, split="test"))}
    bank = resolve_dataset(run.source, split="train")
    queries = resolve_dataset(run.source, split="test")
    out["source_knn"] = evaluate_knn(model, bank, queries, run.knn_k)
    if model.gates():
        frac = active_fraction(model.gates())
        out["active_count"] = frac.count
        out["active_pct"] = frac.percent
    return out


def _finetune_job(args):
    run, init, kwargs = args
    res = finetune(run, init, **kwargs)
    res.model = None
    return res


def run_seeds(run: RunConfig, seeds: Sequence[int], init: TinyViT | None = None, workers: int = 1,
              **kwargs) -> list[RunResult]:
    """Independent fine-tunes differing only in seed; optionally in worker processes."""
    jobs = [(run.replace(seed=s), init, kwargs) for s in seeds]
    if workers <= 1:
        return [finetune(*job[:2], **job[2]) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_finetune_job, jobs))
