import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gatedlora.adapters import RegularizerSpec
from gatedlora.analysis import random_selection_baseline
from gatedlora.config import AdapterSpec, OptimSpec, RunConfig, ScheduleSpec, pretrain_config
from gatedlora.errors import ConfigError, ContractError, NumericAbort
from gatedlora.model import ModelConfig, SiteId, TinyViT
from gatedlora.tensor import Tensor
from gatedlora.train import (Optimizer, Param, adamw_step, cosine_warmup_lr, finetune, pretrain, run_seeds,
                             sgd_step)

TINY = ModelConfig(image_size=8, patch_size=4, dim=8, heads=2, layers=1, mlp_ratio=2, num_classes=3)
SRC = "synth:source?size=8&classes=3&n=8&noise=0.3"
TGT = "synth:target?size=8&classes=3&n=8&noise=0.3"


def tiny_run(**changes) -> RunConfig:
    base = RunConfig(model=TINY, adapter=AdapterSpec(rank=2, alpha=2.0), schedule=ScheduleSpec(warmup_steps=2),
                     steps=12, eval_every=4, batch_size=6, source=SRC, target=TGT, knn_k=3)
    return base.replace(**changes)


@pytest.fixture(scope="module")
def trunk():
    return pretrain(pretrain_config(model=TINY, source=SRC, target=TGT, steps=20, eval_every=10,
                                    schedule=ScheduleSpec(warmup_steps=4), batch_size=6, knn_k=3)).model


# ---------------------------------------------------------------- schedule

SCHED = ScheduleSpec(warmup_steps=10, floor=0.0, base_lr=0.5, total_steps=100)


def test_schedule_endpoints():
    assert cosine_warmup_lr(0, SCHED) == 0.0
    assert cosine_warmup_lr(10, SCHED) == 0.5
    assert cosine_warmup_lr(100, SCHED) == pytest.approx(0.0, abs=1e-15)


def test_schedule_midpoint_and_floor():
    assert cosine_warmup_lr(55, SCHED) == pytest.approx(0.25)
    floored = ScheduleSpec(10, 0.1, 0.5, 100)
    assert cosine_warmup_lr(100, floored) == pytest.approx(0.1)


def test_schedule_out_of_range():
    with pytest.raises(ContractError):
        cosine_warmup_lr(101, SCHED)


@given(st.integers(0, 99))
def test_schedule_bounded(step):
    assert 0.0 <= cosine_warmup_lr(step, SCHED) <= 0.5


def test_warmup_must_be_shorter_than_run():
    with pytest.raises(ConfigError):
        RunConfig(steps=100, schedule=ScheduleSpec(warmup_steps=100))


# ---------------------------------------------------------------- optimizers

def test_sgd_zero_grad_no_change():
    p = np.array([1.0, -2.0])
    sgd_step([p], [np.zeros(2)], OptimSpec(lr=0.1), {}, 0.1)
    assert p.tolist() == [1.0, -2.0]


def test_sgd_plain_step():
    p = np.array([1.0, -2.0])
    sgd_step([p], [np.array([0.25, 0.5])], OptimSpec(momentum=0.0), {}, 1.0)
    assert p.tolist() == [0.75, -2.5]


def test_sgd_momentum_trace():
    p, state = np.array([0.0]), {}
    spec = OptimSpec(momentum=0.9)
    for _ in range(3):
        sgd_step([p], [np.array([1.0])], spec, state, 0.1)
    # buffers 1, 1.9, 2.71
    assert p[0] == pytest.approx(-0.1 * (1 + 1.9 + 2.71), abs=1e-15)


def test_adamw_zero_grad_no_decay_no_change():
    p = np.array([0.3])
    adamw_step([p], [np.zeros(1)], OptimSpec(kind="adamw"), {}, 0.1)
    assert p[0] == 0.3


def adamw_reference(p, grads, lr, b1, b2, eps, wd):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def test_adamw_three_step_scalar_trace():
    spec = OptimSpec(kind="adamw", betas=(0.9, 0.999), weight_decay=0.1, eps=1e-8)
    grads = [0.5, -1.5, 2.0]
    want = adamw_reference(1.0, grads, 0.01, 0.9, 0.999, 1e-8, 0.1)
    p, state = np.array([1.0]), {}
    for g, w in zip(grads, want):
        adamw_step([p], [np.array([g])], spec, state, 0.01)
        assert abs(p[0] - w) < 1e-12


def test_optimizer_skips_inactive_and_scales_lr():
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    a.grad, b.grad = Tensor([1.0]), Tensor([1.0])
    opt = Optimizer([Param(a, active=lambda: False), Param(b, lr_scale=0.5)], OptimSpec(momentum=0.0))
    opt.step(0.2)
    assert (a.data[0], b.data[0]) == (1.0, 0.9)


# ---------------------------------------------------------------- loops

def test_zero_steps_leaves_model_unchanged(trunk):
    res = finetune(tiny_run(steps=0, schedule=ScheduleSpec(warmup_steps=0)), trunk, evaluate=False)
    assert res.timeline == []
    assert all(np.array_equal(res.model.params[n].data, t.data) for n, t in trunk.params.items())


def test_trunk_frozen_and_init_untouched(trunk):
    before = {n: t.data.copy() for n, t in trunk.params.items()}
    res = finetune(tiny_run(), trunk, evaluate=False)
    for name in trunk.trunk_names():
        assert np.array_equal(res.model.params[name].data, before[name]), name
    assert all(np.array_equal(before[n], t.data) for n, t in trunk.params.items())
    assert not np.array_equal(res.model.params["head.weight"].data, before["head.weight"])


def test_lambda_zero_matches_ungated_lora_bitwise(trunk):
    gated = finetune(tiny_run(reg=RegularizerSpec(lam=0.0)), trunk, evaluate=False)
    plain = finetune(tiny_run(reg=RegularizerSpec(lam=0.0), adapter=AdapterSpec(rank=2, alpha=2.0, gated=False)),
                     trunk, evaluate=False)
    assert [r["task_loss"] for r in gated.timeline] == [r["task_loss"] for r in plain.timeline]


def test_ste_off_keeps_scores_constant(trunk):
    res = finetune(tiny_run(reg=RegularizerSpec(lam=0.0), adapter=AdapterSpec(rank=2, alpha=2.0, ste=False)),
                   trunk, evaluate=False)
    assert np.all(res.gate_trajectory == 0.5)


def test_scores_move_only_through_ste_at_lambda_zero(trunk):
    res = finetune(tiny_run(reg=RegularizerSpec(lam=0.0)), trunk, evaluate=False)
    assert np.any(res.gate_trajectory[-1] != 0.5)


def test_metrics_csv_reproducible(trunk):
    a = finetune(tiny_run(reg=RegularizerSpec(lam=0.5)), trunk, evaluate=False)
    b = finetune(tiny_run(reg=RegularizerSpec(lam=0.5)), trunk, evaluate=False)
    assert a.metrics_csv() == b.metrics_csv()
    lines = a.metrics_csv().splitlines()
    assert lines[0] == "step,lr,task_loss,reg_loss,val_acc,active_pct" and len(lines) == 13


def test_timeline_fields_and_eval_cadence(trunk):
    res = finetune(tiny_run(steps=10, eval_every=4), trunk)
    assert [r["step"] for r in res.timeline if r["val_acc"] is not None] == [4, 8, 10]
    assert all(r["active_pct"] is not None and not math.isnan(r["active_pct"]) for r in res.timeline)
    assert {"target_top1", "source_knn", "active_count", "active_pct"} <= set(res.metrics)


def test_huge_lambda_switches_everything_off(trunk):
    res = finetune(tiny_run(steps=40, reg=RegularizerSpec(lam=1e3)), trunk, evaluate=False)
    assert min(r["active_pct"] for r in res.timeline) == 0.0


def test_off_gate_factors_frozen(trunk):
    run = tiny_run(adapter=AdapterSpec(rank=2, alpha=2.0, s_init=0.0), reg=RegularizerSpec(lam=0.0))
    res = finetune(run, trunk, evaluate=False)
    assert all(not np.any(blk.b.data) for blk in res.model.adapters())


def test_fixed_gates_freeze_scores(trunk):
    site = SiteId(0, "v")
    res = finetune(tiny_run(), trunk, fixed_gates=[site], evaluate=False)
    assert [str(g.site) for g in res.final_gates if g.active] == ["0.v"]
    assert res.gate_trajectory.min() == 0.0 and res.gate_trajectory.max() == 0.5


def test_non_finite_loss_aborts(trunk):
    bad = TinyViT(TINY)
    bad.load_arrays({n: t.data for n, t in trunk.params.items()})
    bad.params["head.weight"].data[0, 0] = np.nan
    with pytest.raises(NumericAbort, match="step 1"):
        finetune(tiny_run(), bad, evaluate=False)


def test_pretrain_deterministic_and_learns():
    run = pretrain_config(model=TINY, source=SRC, target=TGT, steps=20, eval_every=10,
                          schedule=ScheduleSpec(warmup_steps=4), batch_size=6, knn_k=3)
    a, b = pretrain(run), pretrain(run)
    assert a.metrics_csv() == b.metrics_csv()
    assert a.timeline[-1]["task_loss"] < a.timeline[0]["task_loss"]


def test_run_seeds_differ_by_seed(trunk):
    res = run_seeds(tiny_run(), [0, 1], trunk, evaluate=False)
    assert [r.config.seed for r in res] == [0, 1]
    assert res[0].metrics_csv() != res[1].metrics_csv()


def test_random_baseline_all_sites_is_plain_lora(trunk):
    run = tiny_run(reg=RegularizerSpec(lam=0.0))
    rand = random_selection_baseline(6, 0, run, trunk, evaluate=False)
    lora = finetune(run.replace(adapter=AdapterSpec(rank=2, alpha=2.0, gated=False)), trunk, evaluate=False)
    assert [r["task_loss"] for r in rand.timeline] == [r["task_loss"] for r in lora.timeline]


def test_random_baseline_zero_sites_trains_head_only(trunk):
    res = random_selection_baseline(0, 0, tiny_run(), trunk, evaluate=False)
    x = np.random.default_rng(0).normal(size=(4, 1, 8, 8))
    assert np.array_equal(res.model.embed(x).data, trunk.embed(x).data)
    assert res.final_active_pct == 0.0


def test_final_state_accuracy_recorded(trunk):
    last = finetune(tiny_run(selection="last", reg=RegularizerSpec("l1", 0.3)), trunk)
    assert last.metrics["final_target_top1"] == last.metrics["target_top1"]
    best = finetune(tiny_run(reg=RegularizerSpec("l1", 0.3)), trunk)
    assert best.metrics["final_target_top1"] == last.metrics["final_target_top1"]
