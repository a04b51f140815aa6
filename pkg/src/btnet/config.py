"""Run configuration: INI-style ``key = value`` sections plus command-line overrides.

Sections map onto the dataclasses that consume them::

    [run]    seed, out, data_dir, n_train, n_val, n_test
    [gen]    GenConfig fields
    [model]  ModelConfig fields
    [train]  TrainConfig fields (seed comes from [run])
    [ablate] n_seeds, configs, efficiencies
"""
from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .datagen import GenConfig
from .models import ConfigError, ModelConfig
from .training import TrainConfig

# The seven rows of the ablation ladder: (model_class, bilinear, so2).
LADDER = (
    ("baseline_pfn", False, False),
    ("vector", False, False),
    ("vector", True, False),
    ("vector", True, True),
    ("tensor", False, False),
    ("tensor", True, False),
    ("tensor", True, True),
)


def ladder_label(model_class: str, bilinear: bool, so2: bool) -> str:
    return ModelConfig(model_class=model_class, enable_bilinear=bilinear, enable_so2=so2,
                       rep_width=2).label


@dataclass
class AblateConfig:
    n_seeds: int = 5
    configs: tuple = tuple(ladder_label(*row) for row in LADDER)
    efficiencies: tuple = (0.7, 0.85)

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        known = {ladder_label(*row): row for row in LADDER}
        bad = [c for c in self.configs if c not in known]
        if bad:
            raise ConfigError(f"unknown ablation config(s) {bad}; choose from {sorted(known)}")
        if not all(0 < e < 1 for e in self.efficiencies):
            raise ConfigError("efficiencies must lie strictly between 0 and 1")

    def rows(self):
        known = {ladder_label(*row): row for row in LADDER}
        return [known[c] for c in self.configs]


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "runs/default"
    data_dir: str = "data"
    n_train: int = 50_000
    n_val: int = 10_000
    n_test: int = 10_000
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required: set [run] seed or pass --seed")
        return int(self.seed)

    def seeded(self) -> "RunConfig":
        """Propagate the run seed into the generator, model and trainer."""
        s = self.require_seed()
        return replace(self, gen=replace(self.gen, seed=s), model=replace(self.model, seed=s),
                       train=replace(self.train, seed=s))

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in RUN_KEYS}
        d.update(gen=asdict(self.gen), model=self.model.to_dict(), train=asdict(self.train),
                 ablate=asdict(self.ablate))
        return json.loads(json.dumps(d))     # tuples -> lists, plain JSON types

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = self.to_dict()
        cp["run"] = {k: _fmt(d[k]) for k in RUN_KEYS if d[k] is not None}
        for sec in SECTIONS:
            cp[sec] = {k: _fmt(v) for k, v in d[sec].items() if not (sec == "train" and k == "seed")}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)


RUN_KEYS = ("seed", "out", "data_dir", "n_train", "n_val", "n_test")
SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig, "ablate": AblateConfig}


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _convert(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], (int, float)):
                return tuple(float(x) for x in items)
            return tuple(items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _section_values(cp: configparser.ConfigParser, name: str, cls) -> dict:
    if not cp.has_section(name):
        return {}
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    out = {}
    for key, raw in cp[name].items():
        if key not in defaults:
            raise ConfigError(f"unknown key [{name}] {key}")
        out[key] = _convert(raw, defaults[key], f"[{name}] {key}")
    return out


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a config file; missing sections and keys keep their defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    unknown = set(cp.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)} in {path}")
    run = {}
    if cp.has_section("run"):
        defaults = {k: getattr(cfg, k) for k in RUN_KEYS}
        defaults["seed"] = 0
        for key, raw in cp["run"].items():
            if key not in defaults:
                raise ConfigError(f"unknown key [run] {key}")
            run[key] = _convert(raw, defaults[key], f"[run] {key}")
    try:
        parts = {sec: cls(**{**asdict(getattr(cfg, sec)), **_section_values(cp, sec, cls)})
                 for sec, cls in SECTIONS.items()}
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return replace(cfg, **run, **parts)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict` (used to re-read embedded configs)."""
    run = {k: d[k] for k in RUN_KEYS if k in d}
    parts = {}
    for sec, cls in SECTIONS.items():
        vals = dict(d.get(sec, {}))
        for k, v in vals.items():
            if isinstance(v, list):
                vals[k] = tuple(v)
        parts[sec] = cls(**vals)
    return RunConfig(**run, **parts)


def apply_overrides(cfg: RunConfig, *, seed=None, out=None, model=None, bilinear=None, so2=None,
                    epochs=None, batch_size=None, lr=None) -> RunConfig:
    """Command-line flags win over the file; ``None`` means "not given"."""
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if out is not None:
        cfg = replace(cfg, out=str(out))
    m = {}
    if model is not None:
        m["model_class"] = model
    if bilinear is not None:
        m["enable_bilinear"] = bool(bilinear)
    if so2 is not None:
        m["enable_so2"] = bool(so2)
    if m:
        cfg = replace(cfg, model=replace(cfg.model, **m))
    t = {}
    if epochs is not None:
        t["epochs"] = int(epochs)
    if batch_size is not None:
        t["batch_size"] = int(batch_size)
    if lr is not None:
        t["lr"] = float(lr)
    if t:
        cfg = replace(cfg, train=replace(cfg.train, **t))
    return cfg
