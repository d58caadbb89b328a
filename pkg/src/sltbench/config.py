"""Experiment configuration: strict YAML loading and full resolution.

A config names a corpus, a model size, a method preset (plus overrides) and
seeds.  :func:`resolve` expands presets and materializes every default, and
:func:`dump_resolved` renders the result as the ``config.resolved`` record,
which can itself be fed back to ``slt run``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .corpus import SAMPLING_PRESETS, SamplingPolicy
from .errors import ConfigError
from .metrics import get_profile
from .model import VISUAL_PRESETS, ModelConfig, TextStackConfig, VisualEncoderConfig
from .objectives import ObjectiveSpec
from .trainer import DATASET_OVERRIDES, METHOD_PRESETS, StagePlan, resolve_plans

TEXT_PRESETS = {
    "mbart": {},
    "toy": dict(encoder_layers=1, shallow_layers=1, deep_layers=2, hidden_dim=64, ff_dim=128,
                heads=4),
}

RUNS_ENV = "SLT_RUNS_DIR"


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _reject_unknown(data: dict, allowed, path: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown config key '{where}'")


def _preset(table: dict, value, path: str) -> dict:
    """A mapping that may start from ``preset: <name>`` in ``table``."""
    value = dict(value or {})
    name = value.pop("preset", None)
    if name is None:
        return value
    if name not in table:
        raise ConfigError(f"{path}.preset: unknown preset {name!r}; known: {', '.join(table)}")
    base = copy.deepcopy(table[name])
    base = {k: ([vars(s) for s in v] if k == "temporal_block" else v) for k, v in base.items()}
    base.update(value)
    return base


@dataclass
class ExperimentConfig:
    manifest: Path
    dataset: str | None
    segmentation: str
    sampling: SamplingPolicy
    model: ModelConfig
    preset: str
    pretrain: StagePlan | None
    finetune: StagePlan
    seeds: list[int]
    profile: str
    eval_beam: int
    max_len: int
    output: Path
    plots: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def plans(self):
        return self.pretrain, self.finetune


TOP_KEYS = {"corpus", "model", "method", "seeds", "metrics", "output", "runtime"}
CORPUS_KEYS = {"manifest", "dataset", "segmentation", "sampling"}
SAMPLING_KEYS = {"preset", "strategy", "max_frames", "keep_ratio"}
MODEL_KEYS = {"visual", "text"} | (_names(ModelConfig) - {"visual", "text", "vocab_size",
                                                         "gloss_vocab_size"})
VISUAL_KEYS = _names(VisualEncoderConfig) | {"preset"}
STAGE_KEYS = {"kernel", "stride", "pool"}
TEXT_KEYS = _names(TextStackConfig) | {"preset"}
METHOD_KEYS = {"preset", "name", "scale_lr_with_batch", "pretrain", "finetune"}
PLAN_KEYS = _names(StagePlan) - {"stage"}
OBJECTIVE_KEYS = _names(ObjectiveSpec)
METRIC_KEYS = {"profile", "eval_beam", "max_len"}
RUNTIME_KEYS = {"plots"}


def _check_plan(data, path, full: bool) -> None:
    _reject_unknown(data, PLAN_KEYS, path)
    if "objective" in data and data["objective"] is not None:
        _reject_unknown(data["objective"], OBJECTIVE_KEYS, f"{path}.objective")
    if full:
        missing = {"objective", "epochs"} - set(data)
        if missing:
            raise ConfigError(f"{path}: missing keys {sorted(missing)}")


def _build(cls, kwargs, path):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        raise ConfigError(f"{path}: empty config")
    return data


def resolve(data: dict, base_dir=None, seed_list=None, env=None) -> ExperimentConfig:
    """Validate ``data`` and expand every preset; relative paths resolve against ``base_dir``."""
    env = os.environ if env is None else env
    base_dir = Path(base_dir or ".")
    _reject_unknown(data, TOP_KEYS, "")

    corpus = data.get("corpus") or {}
    _reject_unknown(corpus, CORPUS_KEYS, "corpus")
    if "manifest" not in corpus:
        raise ConfigError("missing config key 'corpus.manifest'")
    manifest = Path(corpus["manifest"])
    if not manifest.is_absolute():
        manifest = (base_dir / manifest).resolve()
    dataset = corpus.get("dataset")
    if dataset is not None and dataset not in DATASET_OVERRIDES:
        raise ConfigError(f"corpus.dataset: unknown dataset {dataset!r}")
    sampling_raw = corpus.get("sampling", {"preset": "random"})
    if isinstance(sampling_raw, str):
        sampling_raw = {"preset": sampling_raw}
    _reject_unknown(sampling_raw, SAMPLING_KEYS, "corpus.sampling")
    sampling_fields = _preset({k: vars(v) for k, v in SAMPLING_PRESETS.items()},
                              sampling_raw, "corpus.sampling")
    sampling = _build(SamplingPolicy, sampling_fields, "corpus.sampling")

    model_raw = data.get("model") or {}
    _reject_unknown(model_raw, MODEL_KEYS, "model")
    visual_raw = model_raw.get("visual") or {}
    _reject_unknown(visual_raw, VISUAL_KEYS, "model.visual")
    for i, stage in enumerate(visual_raw.get("temporal_block") or []):
        _reject_unknown(stage, STAGE_KEYS, f"model.visual.temporal_block[{i}]")
    text_raw = model_raw.get("text") or {}
    _reject_unknown(text_raw, TEXT_KEYS, "model.text")
    visual = _build(VisualEncoderConfig, _preset(VISUAL_PRESETS, visual_raw, "model.visual"),
                    "model.visual")
    text = _build(TextStackConfig, _preset(TEXT_PRESETS, text_raw, "model.text"), "model.text")
    if text.init_path and not Path(text.init_path).is_absolute():
        text.init_path = str((base_dir / text.init_path).resolve())
    extra = {k: v for k, v in model_raw.items() if k not in ("visual", "text")}
    model = _build(ModelConfig, dict(visual=visual, text=text, **extra), "model")

    method = data.get("method")
    if method is None:
        raise ConfigError("missing config key 'method'")
    if isinstance(method, str):
        method = {"preset": method}
    _reject_unknown(method, METHOD_KEYS, "method")
    preset = method.get("preset")
    scale = bool(method.get("scale_lr_with_batch", True))
    for stage in ("pretrain", "finetune"):
        if method.get(stage) is not None:
            _check_plan(method[stage], f"method.{stage}", full=preset is None)
    if preset is not None:
        if preset not in METHOD_PRESETS:
            raise ConfigError(f"method.preset: unknown preset {preset!r}; "
                              f"known: {', '.join(METHOD_PRESETS)}")
        overrides = {s: method[s] for s in ("pretrain", "finetune") if method.get(s)}
        pretrain, finetune = resolve_plans(preset, overrides, dataset, scale)
        name = method.get("name", preset)
    else:
        if "name" not in method or "finetune" not in method:
            raise ConfigError("method without a preset needs 'name' and 'finetune'")
        name = method["name"]
        pre_raw = method.get("pretrain")
        pretrain = _build(StagePlan, dict(stage="pretrain", **pre_raw),
                          "method.pretrain") if pre_raw else None
        finetune = _build(StagePlan, dict(stage="finetune", **method["finetune"]),
                          "method.finetune")

    seeds = data.get("seeds", [0, 42, 100])
    if seed_list is not None:
        seeds = seed_list
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")

    metrics = data.get("metrics") or {}
    _reject_unknown(metrics, METRIC_KEYS, "metrics")
    profile = get_profile(metrics.get("profile", "word")).name
    eval_beam = int(metrics.get("eval_beam", 4))
    max_len = int(metrics.get("max_len", 50))
    if eval_beam < 1 or max_len < 1:
        raise ConfigError("metrics.eval_beam and metrics.max_len must be >= 1")

    runtime = data.get("runtime") or {}
    _reject_unknown(runtime, RUNTIME_KEYS, "runtime")

    output = env.get(RUNS_ENV) or data.get("output", "runs")
    output = Path(output)
    if not output.is_absolute():
        output = (base_dir / output).resolve() if not env.get(RUNS_ENV) else output.resolve()

    cfg = ExperimentConfig(manifest, dataset, corpus.get("segmentation", "word"), sampling,
                           model, name, pretrain, finetune, list(seeds), profile, eval_beam,
                           max_len, output, bool(runtime.get("plots", True)))
    if cfg.segmentation not in ("word", "character"):
        raise ConfigError(f"corpus.segmentation: unknown segmentation {cfg.segmentation!r}")
    cfg.raw = to_resolved_dict(cfg)
    return cfg


def to_resolved_dict(cfg: ExperimentConfig) -> dict:
    model = cfg.model.to_dict()
    model.pop("vocab_size")
    model.pop("gloss_vocab_size")
    return {
        "corpus": {"manifest": str(cfg.manifest), "dataset": cfg.dataset,
                   "segmentation": cfg.segmentation, "sampling": vars(cfg.sampling)},
        "model": model,
        "method": {"name": cfg.preset,
                   "pretrain": _plan_dict(cfg.pretrain),
                   "finetune": _plan_dict(cfg.finetune)},
        "seeds": list(cfg.seeds),
        "metrics": {"profile": cfg.profile, "eval_beam": cfg.eval_beam, "max_len": cfg.max_len},
        "output": str(cfg.output),
        "runtime": {"plots": cfg.plots},
    }


def _plan_dict(plan: StagePlan | None):
    if plan is None:
        return None
    d = plan.to_dict()
    d.pop("stage")
    return d


def dump_resolved(cfg: ExperimentConfig) -> str:
    """Canonical YAML text of the resolved config (stable key order)."""
    return yaml.safe_dump(cfg.raw, sort_keys=True, default_flow_style=False,
                          allow_unicode=True, width=100)


def load_experiment(path, seed_list=None, env=None) -> ExperimentConfig:
    path = Path(path)
    return resolve(load_config(path), path.parent, seed_list, env)
