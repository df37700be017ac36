"""Experiment configuration: one INI file, every field defaulted, flags override.

Sections and keys mirror the dataclasses they fill::

    [experiment]  seed, output_dir, tasks, num_train, num_test, pretrain_epochs,
                  tune_epochs, threads, use_itm, ablation_*
    [scene]       SceneConfig fields
    [model]       ModelConfig fields (vocabulary sizes are derived, not set)
    [train]       TrainConfig fields
    [masking]     MaskingConfig fields

The single ``experiment.seed`` is the root of all randomness; stages derive
their generators from it by name (data, init, pretrain, tune, eval).
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .codec import DomainError
from .masking import MaskingConfig
from .model import ModelConfig
from .pipeline import TUNE_TASKS, model_config_for
from .scenes import SceneConfig, default_vocab
from .train import TrainConfig

OUTPUT_ENV = "POSMLM_OUTPUT"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    tasks: tuple[str, ...] = ("rec",)
    num_train: int = 5000
    num_test: int = 500
    test_offset: int = 1_000_000  # scene indices of the held-out split start here
    pretrain_epochs: int = 8
    tune_epochs: int = 30
    threads: int = 1
    use_itm: bool = True  # VCR scoring through the matching head (else yes/no slot)
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    ablation_train: int = 5000
    ablation_test: int = 300
    ablation_pretrain_epochs: int = 3
    ablation_epochs: int = 15
    ablation_variants: tuple[str, ...] = ("oao", "one-hot", "indep-20", "indep-40", "indep-60")
    ablation_threshold: float = 0.6
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.ablation_seeds = tuple(self.ablation_seeds)
        self.ablation_variants = tuple(self.ablation_variants)
        bad = [t for t in self.tasks if t not in TUNE_TASKS]
        if bad:
            raise DomainError(f"unknown tasks {bad}; expected a subset of {TUNE_TASKS}")
        if self.num_train < 1 or self.num_test < 1 or self.threads < 1:
            raise DomainError("num_train, num_test and threads must be positive")
        self.scene.seed = self.seed
        self.train.seed = self.seed
        self.train.masking.seed = self.seed

    @property
    def vocab(self):
        return default_vocab(self.model.get("num_bins", 16))

    def model_config(self) -> ModelConfig:
        overrides = {k: v for k, v in self.model.items() if k not in ("vocab_size", "pos_start", "num_bins")}
        return model_config_for(self.vocab, image_size=self.scene.image_size, channels=self.scene.channels,
                                seed=self.seed, **overrides)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model_config().to_dict()
        return d

    def digest(self) -> str:
        """Hash of everything that can change results (the output location cannot)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise DomainError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if default and isinstance(default[0], (int, float)):
            return tuple(type(default[0])(p) for p in parts)
        return tuple(parts)
    return raw


def _apply(obj, section: dict, where: str) -> dict:
    """Typed values for ``section`` keyed by field names of the dataclass ``obj``."""
    fields = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    out = {}
    for key, raw in section.items():
        if key not in fields or dataclasses.is_dataclass(fields[key]):
            raise DomainError(f"[{where}] unknown key {key!r}")
        try:
            out[key] = _convert(raw, fields[key])
        except ValueError as e:
            raise DomainError(f"[{where}] {key}: {e}") from None
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.partition(".")
        if not key:
            raise DomainError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, value)
    known = {"experiment", "scene", "model", "train", "masking"}
    extra = set(parser.sections()) - known
    if extra:
        raise DomainError(f"unknown config sections {sorted(extra)}")

    def sec(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    scene = SceneConfig(**_apply(SceneConfig(), sec("scene"), "scene"))
    masking = MaskingConfig(**_apply(MaskingConfig(), sec("masking"), "masking"))
    probe = ModelConfig(vocab_size=default_vocab().size, pos_start=default_vocab().pos_start)
    model = _apply(probe, sec("model"), "model")
    train_vals = _apply(TrainConfig(), {k: v for k, v in sec("train").items()}, "train")
    train = TrainConfig(masking=masking, **train_vals)
    exp = _apply(ExperimentConfig(), sec("experiment"), "experiment")
    return ExperimentConfig(scene=scene, model=model, train=train, **exp)


def dump_config(cfg: ExperimentConfig) -> str:
    """INI text that reloads to an equal configuration."""
    parser = configparser.ConfigParser()

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    top = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in ("scene", "model", "train")}
    parser["experiment"] = {k: fmt(v) for k, v in top.items()}
    parser["scene"] = {f.name: fmt(getattr(cfg.scene, f.name)) for f in dataclasses.fields(cfg.scene)}
    parser["model"] = {k: fmt(v) for k, v in cfg.model.items()}
    parser["train"] = {f.name: fmt(getattr(cfg.train, f.name)) for f in dataclasses.fields(cfg.train)
                       if f.name != "masking"}
    parser["masking"] = {f.name: fmt(getattr(cfg.train.masking, f.name))
                         for f in dataclasses.fields(cfg.train.masking)}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
