"""Run configuration: one INI file, four sections, no unknown keys.

Example (every key optional; these are the defaults)::

    [run]
    seed = 0

    [corpus]
    train_bonafide = 400
    ...

    [teacher]
    num_layers = 12
    ...

    [student]
    num_layers = 4
    lambda = 1e-5
    ...

    [eval]
    splits = eval_seen, eval_unseen
    trim = false
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import SPLITS, CorpusConfig
from .distill import LR_SCHEDULES, OBJECTIVES, STUDENT_INITS, TrainSettings
from .models import ConfigError, EncoderConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


@dataclass(frozen=True)
class CorpusSection:
    train_bonafide: int = 400
    train_spoof_per_family: int = 100
    dev_bonafide: int = 100
    dev_spoof_per_family: int = 25
    eval_seen_bonafide: int = 200
    eval_seen_spoof_per_family: int = 50
    eval_unseen_bonafide: int = 200
    eval_unseen_spoof_per_family: int = 50

    def corpus_config(self):
        return CorpusConfig(**{f.name: getattr(self, f.name) for f in fields(self)})


@dataclass(frozen=True)
class TeacherSection:
    num_layers: int = 12
    d_model: int = 32
    n_heads: int = 2
    ff_dim: int = 64
    frontend_frame: int = 400
    frontend_stride: int = 320
    epochs: int = 25
    batch_size: int = 32
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    crop_samples: int = 16000
    augment: bool = False
    lr_schedule: str = "cosine"
    class_weight: tuple = (0.1, 0.9)  # spoof, bonafide

    def encoder_config(self):
        return EncoderConfig(
            num_layers=self.num_layers,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ff_dim=self.ff_dim,
            frontend_frame=self.frontend_frame,
            frontend_stride=self.frontend_stride,
            num_classes=2,
        )

    def settings(self, seed):
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            crop_samples=self.crop_samples,
            augment=self.augment,
            lr_schedule=self.lr_schedule,
            seed=seed,
        )


@dataclass(frozen=True)
class StudentSection:
    num_layers: int = 4
    lam: float = 1e-5
    objective: str = "total"
    init: str = "frontend"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    crop_samples: int = 16000
    lr_schedule: str = "cosine"
    train_list: str = ""  # empty: bonafide entries of the train protocol

    def settings(self, seed):
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            crop_samples=self.crop_samples,
            lr_schedule=self.lr_schedule,
            seed=seed,
        )


@dataclass(frozen=True)
class EvalSection:
    splits: tuple = ("eval_seen", "eval_unseen")
    trim: bool = False
    trim_threshold_db: float = -30.0


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def seed(self):
        return self.run.seed

    def with_overrides(self, seed=None, trim=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=seed))
        if trim:
            cfg = replace(cfg, eval=replace(cfg.eval, trim=True))
        return cfg

    def to_ini(self):
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                key = _KEY_ALIASES.get(f.name, f.name)
                lines.append(f"{key} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


# ``lambda`` is a Python keyword, so the dataclass field is ``lam``
_KEY_ALIASES = {"lam": "lambda"}
_FIELD_FOR_KEY = {v: k for k, v in _KEY_ALIASES.items()}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _convert(raw, default, where):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = tuple(s.strip() for s in raw.split(",") if s.strip())
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return items
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check(cfg):
    t, s, e = cfg.teacher, cfg.student, cfg.eval
    if t.lr_schedule not in LR_SCHEDULES or s.lr_schedule not in LR_SCHEDULES:
        raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
    if s.objective not in OBJECTIVES:
        raise ConfigError(f"student.objective must be one of {OBJECTIVES}, got {s.objective!r}")
    if s.init not in STUDENT_INITS:
        raise ConfigError(f"student.init must be one of {STUDENT_INITS}, got {s.init!r}")
    if s.lam < 0:
        raise ConfigError(f"student.lambda must be >= 0, got {s.lam}")
    if len(t.class_weight) != 2 or min(t.class_weight) < 0:
        raise ConfigError(f"teacher.class_weight needs two non-negative values, got {t.class_weight}")
    for split in e.splits:
        if split not in SPLITS:
            raise ConfigError(f"eval.splits: unknown split {split!r}; expected {SPLITS}")
    for name in ("epochs", "batch_size", "crop_samples"):
        for sec_name, sec in (("teacher", t), ("student", s)):
            if getattr(sec, name) < 1:
                raise ConfigError(f"{sec_name}.{name} must be >= 1")
    # raises ConfigError on a bad architecture or layer map
    from .models import layer_map

    layer_map(t.num_layers, s.num_layers)
    t.encoder_config()
    return cfg


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    base = RunConfig()
    sections = {f.name: getattr(base, f.name) for f in fields(base)}
    unknown = [s for s in parser.sections() if s not in sections]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}; expected {sorted(sections)}")
    built = {}
    for name, default in sections.items():
        known = {f.name: f for f in fields(default)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                attr = _FIELD_FOR_KEY.get(key, key)
                if attr not in known or key in _KEY_ALIASES:
                    raise ConfigError(f"{source}: unknown key {name}.{key}")
                values[attr] = _convert(raw, getattr(default, attr), f"{source}: {name}.{key}")
        try:
            built[name] = replace(default, **values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    return _check(RunConfig(**built))


def load_config(path=None):
    """Defaults when ``path`` is None; otherwise parse the file strictly."""
    if path is None:
        return _check(RunConfig())
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))
