"""Experiment configuration: one JSON document with a section per stage.

Every section maps onto a dataclass; missing keys take the dataclass
default, unknown keys are rejected. ``effective`` returns the fully
resolved document, which is what run directories store.
"""

from __future__ import annotations

import json
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from . import model as M
from . import synthcorpus as sc
from . import trainer as tr


class ConfigFieldError(ValueError):
    """Invalid configuration; ``problems`` lists (location, message) pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.problems))


@dataclass
class TrainingSection:
    variant: str = "AV/MFCC->AV"
    iterations: int = 5
    K: list = field(default_factory=lambda: [20, 20, 30, 40, 50])
    cluster_layers: list | None = None
    placement: list | None = None
    steps: int = 1000
    steps_per_iteration: list | None = None
    peak_lr: float = 0.002
    warmup_fraction: float = 0.08
    frame_budget: int = 512
    val_every: int = 100
    kmeans_iter: int = 50
    kmeans_restarts: int = 3
    cluster_cap: int = 200_000


@dataclass
class FinetuneSection:
    mode: str = "visual-only"
    checkpoint_iteration: int | None = None  # None: last iteration of the pretrain run
    steps: int = 1000
    peak_lr: float = 0.001
    warmup_fraction: float = 0.08
    frame_budget: int = 512
    freeze_fraction: float = 0.0
    val_every: int = 100
    beam: int = 0
    self_train: bool = False
    label_mode: str | None = "audio-only"


@dataclass
class PathsSection:
    corpus: str | None = None
    pretrain: str | None = None
    finetune: str | None = None
    labeler: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: sc.CorpusConfig = field(default_factory=sc.CorpusConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    masking: tr.MaskConfig = field(default_factory=tr.MaskConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- stage objects

    def plan(self) -> tr.IterationPlan:
        t = self.training
        return tr.IterationPlan(
            variant=t.variant, n_iterations=t.iterations, K=list(t.K), layers=t.cluster_layers,
            placement=t.placement, steps=t.steps_per_iteration, model=self.model,
            train=tr.TrainConfig(t.steps, t.peak_lr, t.warmup_fraction, t.frame_budget, t.val_every),
            mask=self.masking, kmeans_iter=t.kmeans_iter, kmeans_restarts=t.kmeans_restarts,
            cluster_cap=t.cluster_cap)

    def finetune_config(self) -> tr.FinetuneConfig:
        f = self.finetune
        return tr.FinetuneConfig(f.steps, f.peak_lr, f.warmup_fraction, f.frame_budget,
                                 f.freeze_fraction, f.val_every, f.beam)


def _build(cls, raw, loc: str, problems: list):
    if not isinstance(raw, dict):
        problems.append((loc or "<root>", f"expected an object, got {type(raw).__name__}"))
        return None
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            problems.append((f"{loc}.{k}" if loc else k, "unknown key"))
    kw = {}
    for name, f in known.items():
        if name not in raw:
            continue
        sub = f"{loc}.{name}" if loc else name
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            val = _build(type(default), raw[name], sub, problems)
            if val is not None:
                kw[name] = val
        else:
            kw[name] = raw[name]
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        problems.append((loc or "<root>", str(e)))
        return None


def _cross_check(cfg: ExperimentConfig, problems: list) -> None:
    t = cfg.training
    if t.iterations < 1:
        problems.append(("training.iterations", "must be >= 1"))
    if len(t.K) < t.iterations:
        problems.append(("training.K", f"{len(t.K)} entries for {t.iterations} iterations"))
    # each utterance has at least one 25 Hz frame per phone, so this bounds the
    # number of frames available to any clustering stage from below
    n_pre = cfg.corpus.splits.get("pretrain", 0) * cfg.corpus.min_words
    if t.K and max(t.K) > n_pre:
        problems.append(("training.K", f"K={max(t.K)} exceeds the {n_pre} frames guaranteed "
                                       "by the pretrain split"))
    if t.cluster_layers is not None and any(not 1 <= l <= cfg.model.layers for l in t.cluster_layers):
        problems.append(("training.cluster_layers", f"layer indices must be in [1, {cfg.model.layers}]"))
    if cfg.finetune.mode not in tr.INPUT_MODES:
        problems.append(("finetune.mode", f"must be one of {list(tr.INPUT_MODES)}"))
    if cfg.finetune.label_mode not in (None,) + tr.INPUT_MODES:
        problems.append(("finetune.label_mode", f"must be null or one of {list(tr.INPUT_MODES)}"))
    try:
        tr.parse_variant(t.variant)
    except tr.ConfigError as e:
        problems.append(("training.variant", str(e)))
    if not problems:
        try:
            cfg.plan()
            cfg.finetune_config()
        except ValueError as e:
            problems.append(("training", str(e)))


def from_dict(raw: dict) -> ExperimentConfig:
    problems: list = []
    cfg = _build(ExperimentConfig, raw, "", problems)
    if cfg is not None:
        _cross_check(cfg, problems)
    if problems:
        raise ConfigFieldError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigFieldError([(f"{path}:{e.lineno}:{e.colno}", e.msg)]) from None
    return from_dict(raw)


def effective(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(effective(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- presets

PRESET_DIR = Path(__file__).parent / "presets"


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.json"))


def preset_file(variant: str) -> Path:
    """Preset file for a variant label such as ``AV/MFCC→AV``."""
    key = tr._arrow(variant)
    if key == "A/MFCC->A":
        key = "audio-only"
    name = key.replace("/", "_").replace("->", "-to-")
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigFieldError([("--variant", f"no preset {variant!r}; known: {preset_names()}")])
    return path


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
