"""Two-stage training: pretraining, partial weight transfer, fine-tuning.

Randomness flows from the run seed through named sub-streams (``init``,
``dropout``, ``data-shuffle``, ``masking``, ``frames``), so a (config, seed)
pair fully determines a run on a single worker.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from torch import nn

from . import plotting
from .corpus import SLTData
from .errors import ConfigError, DivergenceAbort
from .metrics import ScoreReport, get_profile, score
from .model import (
    GROUP_NAMES,
    VISUAL_GROUPS,
    LoadReport,
    ModelConfig,
    SLTModel,
    build_model,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import ObjectiveSpec, compute_objective, preset_objective
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)

METRIC_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l")


# ---------------------------------------------------------------------------
# learning-rate schedules

def cosine_lr(step, total_steps, base_lr, warmup_steps=0) -> float:
    """Linear warmup to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def one_cycle_lr(step, total_steps, base_lr, pct_start=0.3, div=25.0, final_div=1e4) -> float:
    """Cosine ramp from base/div up to base, then cosine anneal to base/final_div."""
    peak = max(1, round(pct_start * total_steps))
    lo, end = base_lr / div, base_lr / final_div
    if step <= peak:
        return lo + (base_lr - lo) * 0.5 * (1 - math.cos(math.pi * step / peak))
    progress = min((step - peak) / max(total_steps - peak, 1), 1.0)
    return end + (base_lr - end) * 0.5 * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# plans

@dataclass
class StagePlan:
    stage: str
    objective: ObjectiveSpec
    epochs: int
    optimizer: str = "sgd-momentum"
    lr: float = 1e-2
    lr_groups: dict[str, float] = field(default_factory=dict)
    scheduler: str = "cosine"
    warmup_epochs: float = 0.0
    batch_size: int = 8
    dropout: float = 0.1
    load_groups: list[str] = field(default_factory=list)
    freeze_groups: list[str] = field(default_factory=list)
    decoder: str = "shallow"
    select_by: str = "dev_bleu4"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    patience: int | None = None

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveSpec.from_dict(self.objective)
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.scheduler not in ("cosine", "one-cycle-cosine"):
            raise ConfigError(f"unknown scheduler {self.scheduler!r}")
        if self.lr <= 0 or any(v <= 0 for v in self.lr_groups.values()):
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for what, groups in (("load_groups", self.load_groups),
                             ("freeze_groups", self.freeze_groups),
                             ("lr_groups", list(self.lr_groups))):
            unknown = sorted(set(groups) - set(GROUP_NAMES))
            if unknown:
                raise ConfigError(f"{what}: unknown groups {unknown}")
        if self.decoder not in ("shallow", "deep"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.select_by not in ("dev_bleu4", "dev_loss"):
            raise ConfigError(f"unknown selection metric {self.select_by!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.to_dict()
        return d

    @classmethod
    def from_dict(cls, data) -> "StagePlan":
        return cls(**data)


PRESET_BATCH_SIZE = 8
TEXT_AND_DECODER = ("text_encoder", "decoder_shallow")


def _pretrain(epochs, lr, **kw):
    return dict(stage="pretrain", epochs=epochs, lr=lr, **kw)


def _finetune(epochs, lr, **kw):
    return dict(stage="finetune", epochs=epochs, lr=lr, **kw)


# Standardised (Phoenix-2014T) two-stage settings per method; objectives are
# filled in from objectives.PRETRAIN_OBJECTIVES / FINETUNE_OBJECTIVES.
METHOD_PRESETS: dict[str, dict[str, dict | None]] = {
    "gfslt_vlp": {
        "pretrain": _pretrain(80, 5e-3, select_by="dev_loss"),
        "finetune": _finetune(200, 1e-2, load_groups=[*VISUAL_GROUPS, *TEXT_AND_DECODER]),
    },
    "signcl": {
        "pretrain": _pretrain(80, 5e-3, select_by="dev_loss"),
        "finetune": _finetune(200, 1e-2, load_groups=[*VISUAL_GROUPS, *TEXT_AND_DECODER]),
    },
    "sign2gpt_pg": {
        "pretrain": _pretrain(100, 3e-4, optimizer="adam", scheduler="one-cycle-cosine",
                              select_by="dev_loss"),
        "finetune": _finetune(200, 1e-2, load_groups=list(VISUAL_GROUPS)),
    },
    "fla_llm": {
        "pretrain": _pretrain(100, 1e-2),
        "finetune": _finetune(75, 5e-3, load_groups=list(VISUAL_GROUPS),
                              freeze_groups=list(VISUAL_GROUPS), decoder="deep"),
    },
    "c2rl": {
        "pretrain": _pretrain(200, 1e-2),
        "finetune": _finetune(80, 1e-2, load_groups=["visual_backbone", "temporal_block"],
                              freeze_groups=["visual_backbone", "temporal_block"],
                              decoder="deep"),
    },
    "c2rl_icl": {
        "pretrain": _pretrain(200, 1e-2, select_by="dev_loss"),
        "finetune": _finetune(80, 1e-2, load_groups=list(VISUAL_GROUPS)),
    },
    # no pretraining: the reference point for measuring what pretraining adds
    "scratch": {
        "pretrain": None,
        "finetune": _finetune(200, 1e-2),
    },
}
CORE_PRESETS = ("gfslt_vlp", "signcl", "sign2gpt_pg", "fla_llm", "c2rl")

# best-performing learning rates / epochs that differ on CSL-Daily
DATASET_OVERRIDES = {
    "phoenix-2014t": {},
    "csl-daily": {
        "gfslt_vlp": {"pretrain": {"lr": 1e-3}, "finetune": {"lr": 1e-3, "epochs": 80}},
        "signcl": {"pretrain": {"lr": 1e-3}, "finetune": {"lr": 1e-3, "epochs": 80}},
        "fla_llm": {"pretrain": {"lr": 5e-3}, "finetune": {"lr": 5e-3}},
        "c2rl": {"pretrain": {"lr": 5e-3, "epochs": 100}, "finetune": {"lr": 5e-3}},
        "c2rl_icl": {"pretrain": {"lr": 5e-3, "epochs": 100}, "finetune": {"lr": 5e-3}},
    },
}


def resolve_plans(preset: str, overrides: dict | None = None, dataset: str | None = None,
                  scale_lr_with_batch: bool = True) -> tuple[StagePlan | None, StagePlan]:
    """Expand a method preset into its (pretrain, finetune) plans.

    ``overrides`` maps "pretrain"/"finetune" to StagePlan fields, with
    ``objective`` holding ObjectiveSpec fields (terms excluded unless given).
    Preset learning rates are scaled linearly when the batch size differs
    from the preset's; explicitly overridden learning rates are used as-is.
    """
    if preset not in METHOD_PRESETS:
        raise ConfigError(f"unknown method preset {preset!r}; known: {', '.join(METHOD_PRESETS)}")
    if dataset is not None and dataset not in DATASET_OVERRIDES:
        raise ConfigError(f"unknown dataset {dataset!r}")
    overrides = overrides or {}
    unknown = set(overrides) - {"pretrain", "finetune"}
    if unknown:
        raise ConfigError(f"method overrides: unknown stage keys {sorted(unknown)}")
    plans = []
    for stage in ("pretrain", "finetune"):
        base = METHOD_PRESETS[preset][stage]
        if base is None:
            if overrides.get(stage):
                raise ConfigError(f"preset {preset!r} has no {stage} stage")
            plans.append(None)
            continue
        fields = dict(base)
        ds = DATASET_OVERRIDES.get(dataset or "", {}).get(preset, {}).get(stage, {})
        fields.update(ds)
        ov = dict(overrides.get(stage) or {})
        obj_kw = dict(ov.pop("objective", None) or {})
        terms = obj_kw.pop("terms", None)
        explicit_lr = "lr" in ov or "lr" in ds
        explicit_groups = "lr_groups" in ov
        fields.update(ov)
        if scale_lr_with_batch and fields.get("batch_size", PRESET_BATCH_SIZE) != PRESET_BATCH_SIZE:
            factor = fields["batch_size"] / PRESET_BATCH_SIZE
            if not explicit_lr:
                fields["lr"] = fields["lr"] * factor
            if not explicit_groups:
                fields["lr_groups"] = {k: v * factor
                                       for k, v in fields.get("lr_groups", {}).items()}
        objective = preset_objective(preset, stage, **obj_kw)
        if terms is not None:
            objective = replace(objective, terms=[tuple(t) for t in terms])
            objective.__post_init__()
        try:
            plans.append(StagePlan(objective=objective, **fields))
        except TypeError as exc:
            raise ConfigError(f"{stage} plan: {exc}") from None
    return plans[0], plans[1]


# ---------------------------------------------------------------------------
# records

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_bleu4: float
    lr: float = 0.0


@dataclass
class RunRecord:
    seed: int
    stage: str
    preset: str = ""
    epochs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_bleu4: float = 0.0
    best_dev_loss: float = math.inf
    select_by: str = "dev_bleu4"
    checkpoint: str = ""
    load_report: dict[str, list[str]] = field(default_factory=dict)
    frozen: list[str] = field(default_factory=list)
    final_test: dict[str, float] = field(default_factory=dict)
    pretrain: "RunRecord | None" = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pretrain"] = self.pretrain.to_dict() if self.pretrain else None
        return d

    @classmethod
    def from_dict(cls, data) -> "RunRecord":
        data = dict(data)
        data["epochs"] = [EpochLog(**e) for e in data.get("epochs", [])]
        if data.get("pretrain"):
            data["pretrain"] = cls.from_dict(data["pretrain"])
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class StageResult:
    record: RunRecord
    checkpoint: Path
    load_report: LoadReport | None


# ---------------------------------------------------------------------------
# evaluation

@torch.no_grad()
def translate(model: SLTModel, data: SLTData, split: str, beam: int = 1, max_len: int = 50,
              which: str = "shallow", batch_size: int = 32):
    """Decoded hypotheses and references for every sample of ``split``."""
    was_training = model.training
    model.eval()
    hyps, refs, ids = [], [], []
    for batch in data.batches(split, batch_size, seed=0):
        video = model.encode_video(batch.frames, batch.frame_mask)
        out = generate(model, video.features, video.mask, max_len, beam, which)
        hyps.extend(data.tokenizer.decode(seq) for seq in out)
        refs.extend(batch.sentences)
        ids.extend(batch.ids)
    model.train(was_training)
    return hyps, refs, ids


def evaluate_split(model, data, split, profile="word", beam=1, max_len=50,
                   which="shallow") -> ScoreReport:
    hyps, refs, _ = translate(model, data, split, beam, max_len, which)
    return score(hyps, refs, profile)


@torch.no_grad()
def _dev_loss(model, plan, data, seed, epoch) -> float:
    model.eval()
    gen = torch_generator(seed, "dev-masking")
    total, n = 0.0, 0
    with_glosses = "pseudo_gloss_align" in plan.objective.names
    for batch in data.batches("dev", plan.batch_size, seed, with_glosses=with_glosses):
        res = compute_objective(plan.objective, model, batch, gen, plan.decoder)
        total += float(res.total) * len(batch)
        n += len(batch)
    return total / n


def _set_dropout(model: nn.Module, p: float) -> None:
    for m in model.modules():
        if isinstance(m, nn.Dropout):
            m.p = p
        elif isinstance(m, nn.MultiheadAttention):
            m.dropout = p


def _snapshot(model: SLTModel, groups) -> dict[str, dict[str, torch.Tensor]]:
    return {g: {k: v.detach().clone() for k, v in model.group(g).state_dict().items()}
            for g in groups}


def frozen_groups_unchanged(model: SLTModel, snapshot) -> bool:
    for g, state in snapshot.items():
        now = model.group(g).state_dict()
        if any(not torch.equal(now[k], v) for k, v in state.items()):
            return False
    return True


def _optimizer(model: SLTModel, plan: StagePlan):
    groups = []
    for g in GROUP_NAMES:
        if g in plan.freeze_groups:
            continue
        params = [p for p in model.group(g).parameters() if p.requires_grad]
        if params:
            groups.append({"params": params, "lr": plan.lr_groups.get(g, plan.lr), "name": g})
    if plan.optimizer == "adam":
        return torch.optim.Adam(groups, weight_decay=plan.weight_decay)
    return torch.optim.SGD(groups, momentum=plan.momentum, weight_decay=plan.weight_decay)


def _better(plan: StagePlan, entry: EpochLog, record: RunRecord) -> bool:
    if record.best_epoch == 0:
        return True
    if plan.select_by == "dev_loss":
        return entry.dev_loss < record.best_dev_loss
    if entry.dev_bleu4 != record.best_dev_bleu4:
        return entry.dev_bleu4 > record.best_dev_bleu4
    return entry.dev_loss < record.best_dev_loss


def run_stage(plan: StagePlan, data: SLTData, model: SLTModel, seed: int, out_dir,
              source_checkpoint=None, preset: str = "", profile="word", max_len: int = 50,
              meta: dict | None = None, resolved_config: str | None = None,
              plots: bool = True) -> StageResult:
    """Train ``model`` for one stage; keeps the best checkpoint and the curves."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resolved_config is not None:
        (out_dir / "config.resolved").write_text(resolved_config, encoding="utf-8")
    profile = get_profile(profile)

    report = None
    if plan.load_groups:
        if source_checkpoint is None:
            raise ConfigError(f"{plan.stage}: load_groups given but no source checkpoint")
        report = load_checkpoint(model, source_checkpoint, plan.load_groups)
        log.info("loaded groups %s from %s", report.loaded, source_checkpoint)
    for g in plan.freeze_groups:
        for p in model.group(g).parameters():
            p.requires_grad_(False)
    frozen = _snapshot(model, plan.freeze_groups)
    _set_dropout(model, plan.dropout)

    torch.manual_seed(derive_seed(seed, "dropout", plan.stage))
    optimizer = _optimizer(model, plan)
    total_steps = plan.epochs * data.num_batches("train", plan.batch_size)
    warmup = round(plan.warmup_epochs * data.num_batches("train", plan.batch_size))
    if plan.scheduler == "cosine":
        factor = lambda s: cosine_lr(s, total_steps, 1.0, warmup)  # noqa: E731
    else:
        factor = lambda s: one_cycle_lr(s, total_steps, 1.0)  # noqa: E731
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    masking = torch_generator(seed, "masking", plan.stage)
    with_glosses = "pseudo_gloss_align" in plan.objective.names
    trainable = [p for grp in optimizer.param_groups for p in grp["params"]]

    record = RunRecord(seed=seed, stage=plan.stage, preset=preset, select_by=plan.select_by,
                       load_report={"loaded": report.loaded if report else [],
                                    "skipped": report.skipped if report else []},
                       frozen=list(plan.freeze_groups))
    best_path = out_dir / "checkpoints" / "best.ckpt"
    stale = 0
    for epoch in range(1, plan.epochs + 1):
        model.train()
        for g in plan.freeze_groups:
            model.group(g).eval()
        losses = []
        lr_now = optimizer.param_groups[0]["lr"]
        for step, batch in enumerate(data.batches("train", plan.batch_size, seed, epoch,
                                                  shuffle=True, with_glosses=with_glosses)):
            res = compute_objective(plan.objective, model, batch, masking, plan.decoder)
            loss = res.total
            if not torch.isfinite(loss):
                raise DivergenceAbort(f"{plan.stage} epoch {epoch} step {step}: "
                                      f"loss is {float(loss.detach())}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if plan.grad_clip:
                torch.nn.utils.clip_grad_norm_(trainable, plan.grad_clip)
            optimizer.step()
            scheduler.step()
            losses.append(float(loss.detach()))
        dev_loss = _dev_loss(model, plan, data, seed, epoch)
        dev = evaluate_split(model, data, "dev", profile, 1, max_len, plan.decoder)
        entry = EpochLog(epoch, sum(losses) / len(losses), dev_loss, dev.bleu[4], lr_now)
        record.epochs.append(entry)
        log.info("%s %s seed=%d epoch=%d train=%.4f dev=%.4f bleu4=%.2f", preset, plan.stage,
                 seed, epoch, entry.train_loss, dev_loss, entry.dev_bleu4)
        if _better(plan, entry, record):
            record.best_epoch = epoch
            record.best_dev_bleu4 = entry.dev_bleu4
            record.best_dev_loss = entry.dev_loss
            save_checkpoint(model, best_path, {
                "stage": plan.stage, "preset": preset, "seed": seed, "epoch": epoch,
                "dev_bleu4": entry.dev_bleu4, "dev_loss": entry.dev_loss,
                "tokenizer": data.tokenizer.to_dict(), "language": data.language,
                "metric_profile": profile.name, "decoder": plan.decoder, **(meta or {})})
            stale = 0
        else:
            stale += 1
            if plan.patience is not None and stale >= plan.patience:
                log.info("early stop after %d stale epochs", stale)
                break

    if not frozen_groups_unchanged(model, frozen):
        raise AssertionError(f"frozen groups changed during {plan.stage}")
    record.checkpoint = str(best_path)
    emit_curves(record, out_dir, plots=plots)
    return StageResult(record, best_path, report)


def emit_curves(record: RunRecord, out_dir, plots: bool = True) -> Path:
    """Write curves.csv (and line plots under plots/) for ``record``."""
    if not record.epochs:
        raise ValueError("record has no completed epochs")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "curves.csv"
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "dev_loss", "dev_bleu4"])
        for e in record.epochs:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.dev_loss), repr(e.dev_bleu4)])
    if plots:
        plotting.plot_curves(record, out_dir / "plots")
    return path


def read_curves(path) -> list[EpochLog]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["dev_loss"]),
                         float(r["dev_bleu4"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# methods

def model_config_for(data: SLTData, base: ModelConfig) -> ModelConfig:
    return replace(base, vocab_size=len(data.tokenizer), gloss_vocab_size=len(data.gloss_vocab))


def fresh_model(config: ModelConfig, seed: int, stage: str) -> SLTModel:
    torch.manual_seed(derive_seed(seed, "init", stage))
    return build_model(config)


def run_seed(preset: str, data: SLTData, seed: int, model_config: ModelConfig,
             plans: tuple[StagePlan | None, StagePlan], out_root, profile="word",
             eval_beam: int = 1, max_len: int = 50, resolved_config: str | None = None,
             plots: bool = True) -> RunRecord:
    pre_plan, fine_plan = plans
    seed_dir = Path(out_root) / preset / str(seed)
    config = model_config_for(data, model_config)
    pre_record, source = None, None
    if pre_plan is not None:
        model = fresh_model(config, seed, "stage1")
        res = run_stage(pre_plan, data, model, seed, seed_dir / "stage1", None, preset,
                        profile, max_len, resolved_config=resolved_config, plots=plots)
        pre_record, source = res.record, res.checkpoint
    elif fine_plan.load_groups:
        raise ConfigError(f"{preset}: fine-tuning loads groups but there is no pretraining")
    model = fresh_model(config, seed, "stage2")
    res = run_stage(fine_plan, data, model, seed, seed_dir / "stage2", source, preset,
                    profile, max_len, resolved_config=resolved_config, plots=plots)
    record = res.record
    record.pretrain = pre_record
    load_checkpoint(model, res.checkpoint)
    final = evaluate_split(model, data, "test", profile, eval_beam, max_len, fine_plan.decoder)
    record.final_test = final.as_row()
    record.final_test = {k: record.final_test[k] for k in METRIC_KEYS}
    record.save(seed_dir / "record.json")
    if plots and pre_record is not None:
        plotting.plot_progression(pre_record, record, seed_dir / "bleu4_progression.png")
    return record


def run_method(preset: str, data: SLTData, seeds, model_config: ModelConfig, out_root,
               overrides: dict | None = None, dataset: str | None = None, profile="word",
               eval_beam: int = 1, max_len: int = 50, resolved_config: str | None = None,
               scale_lr_with_batch: bool = True, plots: bool = True) -> list[RunRecord]:
    """Run both stages of ``preset`` for every seed."""
    plans = resolve_plans(preset, overrides, dataset, scale_lr_with_batch)
    return [run_seed(preset, data, seed, model_config, plans, out_root, profile, eval_beam,
                     max_len, resolved_config, plots)
            for seed in seeds]


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class Aggregate:
    mean: float
    std: float
    n: int

    @property
    def single(self) -> bool:
        return self.n == 1


def select_best(records) -> dict[str, Aggregate]:
    """Mean and sample (n-1) standard deviation of each final-test metric over seeds.

    A single record yields std 0 with ``Aggregate.single`` set.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    out = {}
    keys = [k for k in records[0].final_test if all(k in r.final_test for r in records)]
    for key in keys:
        values = [r.final_test[key] for r in records]
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        out[key] = Aggregate(statistics.fmean(values), std, len(values))
    return out
