import math

import pytest
import torch
from conftest import tiny_config

from sltbench.errors import ConfigError, DivergenceAbort
from sltbench.model import GROUP_NAMES, load_checkpoint, read_checkpoint_meta
from sltbench.objectives import ObjectiveSpec
from sltbench.trainer import (
    CORE_PRESETS,
    METHOD_PRESETS,
    EpochLog,
    RunRecord,
    StagePlan,
    cosine_lr,
    emit_curves,
    evaluate_split,
    fresh_model,
    model_config_for,
    one_cycle_lr,
    read_curves,
    resolve_plans,
    run_seed,
    run_stage,
    select_best,
)


# --- schedules --------------------------------------------------------------

def test_cosine_hand_cases():
    assert cosine_lr(10, 100, 0.5, warmup_steps=10) == 0.5
    assert cosine_lr(5, 100, 0.5, warmup_steps=10) == pytest.approx(0.25)
    assert cosine_lr(0, 100, 0.5, warmup_steps=10) == 0.0
    assert abs(cosine_lr(100, 100, 0.5, warmup_steps=10)) < 1e-12
    assert cosine_lr(55, 100, 0.5, warmup_steps=10) == pytest.approx(0.25, abs=1e-9)
    assert cosine_lr(0, 100, 0.5) == 0.5


@pytest.mark.parametrize("total,warmup", [(1, 0), (10, 3), (97, 0), (500, 50)])
def test_cosine_monotone_after_warmup(total, warmup):
    lrs = [cosine_lr(s, total, 1e-2, warmup) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs[warmup:], lrs[warmup + 1:]))
    assert all(a <= b for a, b in zip(lrs[:warmup], lrs[1:warmup + 1]))
    assert max(lrs) == pytest.approx(1e-2)


def test_one_cycle_shape():
    total = 100
    lrs = [one_cycle_lr(s, total, 3e-4) for s in range(total + 1)]
    peak = lrs.index(max(lrs))
    assert peak == 30 and lrs[peak] == pytest.approx(3e-4)
    assert lrs[0] == pytest.approx(3e-4 / 25)
    assert lrs[-1] == pytest.approx(3e-4 / 1e4)
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))


# --- aggregation ------------------------------------------------------------

def rec(seed, bleu4):
    return RunRecord(seed=seed, stage="finetune",
                     final_test={"bleu1": 50.0, "bleu2": 40.0, "bleu3": 30.0, "bleu4": bleu4,
                                 "rouge_l": 45.0})


def test_select_best_sample_std():
    agg = select_best([rec(0, 21.7), rec(42, 22.0), rec(100, 22.2)])
    assert agg["bleu4"].mean == pytest.approx(21.966666666666665, abs=1e-12)
    assert agg["bleu4"].std == pytest.approx(0.2516611478423583, abs=1e-12)
    assert agg["bleu4"].n == 3 and not agg["bleu4"].single
    assert agg["bleu1"].std == 0.0


def test_select_best_single_record_is_flagged():
    agg = select_best([rec(0, 21.7)])
    assert agg["bleu4"].mean == 21.7 and agg["bleu4"].std == 0.0 and agg["bleu4"].single
    with pytest.raises(ValueError):
        select_best([])


# --- plans and presets ------------------------------------------------------

VISUAL3 = {"visual_backbone", "temporal_block", "visual_transformer"}


@pytest.mark.parametrize("preset,loaded,frozen,decoder", [
    ("gfslt_vlp", VISUAL3 | {"text_encoder", "decoder_shallow"}, set(), "shallow"),
    ("signcl", VISUAL3 | {"text_encoder", "decoder_shallow"}, set(), "shallow"),
    ("sign2gpt_pg", VISUAL3, set(), "shallow"),
    ("fla_llm", VISUAL3, VISUAL3, "deep"),
    ("c2rl", {"visual_backbone", "temporal_block"}, {"visual_backbone", "temporal_block"},
     "deep"),
])
def test_transfer_maps(preset, loaded, frozen, decoder):
    pre, fine = resolve_plans(preset)
    assert pre is not None and pre.stage == "pretrain" and fine.stage == "finetune"
    assert set(fine.load_groups) == loaded
    assert set(fine.freeze_groups) == frozen
    assert fine.decoder == decoder


def test_core_presets_and_extras():
    assert set(CORE_PRESETS) <= set(METHOD_PRESETS)
    pre, fine = resolve_plans("scratch")
    assert pre is None and fine.load_groups == []


@pytest.mark.parametrize("preset,pre_lr,fine_lr,pre_epochs,fine_epochs", [
    ("gfslt_vlp", 5e-3, 1e-2, 80, 200),
    ("fla_llm", 1e-2, 5e-3, 100, 75),
    ("c2rl", 1e-2, 1e-2, 200, 80),
])
def test_preset_schedules(preset, pre_lr, fine_lr, pre_epochs, fine_epochs):
    pre, fine = resolve_plans(preset)
    assert (pre.lr, fine.lr, pre.epochs, fine.epochs) == (pre_lr, fine_lr, pre_epochs,
                                                          fine_epochs)
    assert pre.optimizer == fine.optimizer == "sgd-momentum"
    assert fine.objective.label_smoothing == 0.2 and fine.batch_size == 8


def test_sign2gpt_uses_adam_one_cycle():
    pre, _ = resolve_plans("sign2gpt_pg")
    assert pre.optimizer == "adam" and pre.scheduler == "one-cycle-cosine"
    assert pre.objective.names == ["pseudo_gloss_align"]


def test_lr_scales_with_batch_unless_explicit():
    _, fine = resolve_plans("gfslt_vlp", {"finetune": {"batch_size": 4}})
    assert fine.lr == pytest.approx(5e-3)
    _, fine = resolve_plans("gfslt_vlp", {"finetune": {"batch_size": 4}},
                            scale_lr_with_batch=False)
    assert fine.lr == pytest.approx(1e-2)
    _, fine = resolve_plans("gfslt_vlp", {"finetune": {"batch_size": 4, "lr": 0.3}})
    assert fine.lr == 0.3


def test_dataset_overrides():
    pre, fine = resolve_plans("gfslt_vlp", dataset="csl-daily")
    assert pre.lr == 1e-3 and fine.lr == 1e-3 and fine.epochs == 80
    with pytest.raises(ConfigError):
        resolve_plans("gfslt_vlp", dataset="nope")


def test_objective_overrides_keep_terms():
    pre, _ = resolve_plans("signcl", {"pretrain": {"objective": {"gap": 2}}})
    assert pre.objective.gap == 2 and "adjacent_frame" in pre.objective.names


@pytest.mark.parametrize("overrides", [
    {"finetune": {"epochs": 0}},
    {"finetune": {"optimizer": "rmsprop"}},
    {"finetune": {"load_groups": ["nonexistent"]}},
    {"finetune": {"freeze_groups": ["visual"]}},
    {"finetune": {"learing_rate": 1.0}},
    {"finetuning": {}},
])
def test_invalid_plans(overrides):
    with pytest.raises(ConfigError):
        resolve_plans("gfslt_vlp", overrides)
    with pytest.raises(ConfigError):
        resolve_plans("no_such_method")


def test_plan_dict_round_trip():
    _, fine = resolve_plans("c2rl")
    assert StagePlan.from_dict(fine.to_dict()) == fine


# --- curves -----------------------------------------------------------------

def test_emit_curves_round_trip(tmp_path):
    record = RunRecord(seed=0, stage="finetune",
                       epochs=[EpochLog(e, 1 / (e + 3), math.pi / e, 10.0 * e / 7)
                               for e in range(1, 6)])
    path = emit_curves(record, tmp_path)
    lines = path.read_bytes().split(b"\n")
    assert lines[0] == b"epoch,train_loss,dev_loss,dev_bleu4"
    assert len([x for x in lines if x]) == 6 and b"\r" not in path.read_bytes()
    back = read_curves(path)
    assert [(e.epoch, e.train_loss, e.dev_loss, e.dev_bleu4) for e in back] == \
        [(e.epoch, e.train_loss, e.dev_loss, e.dev_bleu4) for e in record.epochs]
    assert (tmp_path / "plots" / "loss.png").exists()
    assert (tmp_path / "plots" / "bleu4.png").exists()


def test_emit_curves_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_curves(RunRecord(seed=0, stage="finetune"), tmp_path)


# --- training runs on the small corpus ---------------------------------------

def small_plan(stage="finetune", epochs=2, **kw):
    terms = kw.pop("terms", [("translation", 1.0)])
    kw.setdefault("optimizer", "adam")
    kw.setdefault("lr", 1e-3)
    return StagePlan(stage=stage, objective=ObjectiveSpec(terms), epochs=epochs,
                     batch_size=8, dropout=0.0, **kw)


def small_model(data, seed=0):
    return fresh_model(model_config_for(data, tiny_config()), seed, "stage2")


def test_two_stage_run_layout_and_curves(small_data, tmp_path):
    plans = resolve_plans("gfslt_vlp", {
        "pretrain": {"epochs": 5, "objective": {"gap": 1}},
        "finetune": {"epochs": 5}})
    record = run_seed("gfslt_vlp", small_data, 0, tiny_config(), plans, tmp_path,
                      resolved_config="x: 1\n")
    assert len(record.epochs) == 5 and len(record.pretrain.epochs) == 5
    for stage in ("stage1", "stage2"):
        d = tmp_path / "gfslt_vlp" / "0" / stage
        assert (d / "checkpoints" / "best.ckpt").exists()
        assert len(read_curves(d / "curves.csv")) == 5
        assert (d / "plots" / "loss.png").exists()
        assert (d / "config.resolved").read_text() == "x: 1\n"
    assert (tmp_path / "gfslt_vlp" / "0" / "record.json").exists()
    assert set(record.final_test) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l"}
    assert RunRecord.load(tmp_path / "gfslt_vlp" / "0" / "record.json") == record
    # contrastive-only pretraining has no decoder output to score, so it selects by dev loss
    assert record.pretrain.select_by == "dev_loss"
    assert record.pretrain.best_dev_loss == min(e.dev_loss for e in record.pretrain.epochs)


def test_best_checkpoint_reproduces_dev_bleu(small_data, tmp_path):
    model = small_model(small_data)
    res = run_stage(small_plan(epochs=4), small_data, model, 0, tmp_path)
    record = res.record
    assert record.best_dev_bleu4 == max(e.dev_bleu4 for e in record.epochs)
    reloaded = small_model(small_data, seed=7)
    load_checkpoint(reloaded, res.checkpoint)
    again = evaluate_split(reloaded, small_data, "dev", "word", beam=1)
    assert again.bleu[4] == record.best_dev_bleu4
    meta = read_checkpoint_meta(res.checkpoint)
    assert meta["epoch"] == record.best_epoch and meta["decoder"] == "shallow"


def test_frozen_groups_bit_identical(small_data, tmp_path):
    model = small_model(small_data)
    before = {k: v.clone() for k, v in model.visual_backbone.state_dict().items()}
    other = {k: v.clone() for k, v in model.decoder_shallow.state_dict().items()}
    run_stage(small_plan(freeze_groups=["visual_backbone"]), small_data, model, 0, tmp_path)
    after = model.visual_backbone.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)  # incl. BN running stats
    changed = model.decoder_shallow.state_dict()
    assert any(not torch.equal(other[k], changed[k]) for k in other)


def test_same_seed_same_first_epoch_loss(small_data, tmp_path):
    losses = []
    for i in range(2):
        model = small_model(small_data)
        res = run_stage(small_plan(epochs=1, optimizer="sgd-momentum", lr=1e-2),
                        small_data, model, 42, tmp_path / str(i))
        losses.append(res.record.epochs[0].train_loss)
    assert abs(losses[0] - losses[1]) <= 1e-6
    model = small_model(small_data)
    res = run_stage(small_plan(epochs=1, optimizer="sgd-momentum", lr=1e-2), small_data,
                    model, 100, tmp_path / "other")
    assert res.record.epochs[0].train_loss != losses[0]


def test_huge_lr_aborts(small_data, tmp_path):
    model = small_model(small_data)
    plan = small_plan(epochs=3, optimizer="sgd-momentum", lr=1e3, grad_clip=None)
    with pytest.raises(DivergenceAbort):
        run_stage(plan, small_data, model, 0, tmp_path)


def test_load_groups_need_a_source(small_data, tmp_path):
    with pytest.raises(ConfigError):
        run_stage(small_plan(load_groups=["visual_backbone"]), small_data,
                  small_model(small_data), 0, tmp_path)


def test_patience_stops_early(small_data, tmp_path):
    res = run_stage(small_plan(epochs=30, lr=1e-9, patience=2), small_data,
                    small_model(small_data), 0, tmp_path)
    assert len(res.record.epochs) < 30
    assert len(read_curves(tmp_path / "curves.csv")) == len(res.record.epochs)


def test_fla_llm_transfer_on_small_run(small_data, tmp_path):
    plans = resolve_plans("fla_llm", {"pretrain": {"epochs": 1, "lr": 1e-3},
                                      "finetune": {"epochs": 1, "lr": 1e-3}})
    record = run_seed("fla_llm", small_data, 0, tiny_config(), plans, tmp_path)
    assert set(record.load_report["loaded"]) == VISUAL3
    assert set(record.frozen) == VISUAL3
    ckpt = read_checkpoint_meta(record.checkpoint)
    assert ckpt["decoder"] == "deep"
    assert set(ckpt["groups"]) == set(GROUP_NAMES)
    assert ckpt["model_config"]["text"]["deep_layers"] == 2
