"""Experiment configuration: flat ``key = value`` text files.

Lines starting with ``#`` (and trailing ``# ...``) are comments. Unknown
keys are rejected so that typos fail loudly. Lists are comma separated.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from ..errors import ConfigError

MODES = ("scratch", "warm", "precond")


@dataclass
class ExperimentConfig:
    problem: str = "gaussian"
    # problem definition and data (seeded by problem_seed)
    problem_seed: int = 0
    nx: int = 12
    ny: int = 6
    n_pairs: int = 4000
    image_side: int = 16
    n_images: int = 20000
    sensing_rate: float = 0.3
    # architecture shared by T and the per-observation samplers
    n_layers: int = 8
    hidden_widths: tuple = (64,)
    clamp: float = 2.0
    # supervised (forward KL) phase
    sup_iterations: int = 5000
    sup_batch: int = 64
    sup_lr: float = 1e-3
    sup_schedule: str = "cosine"
    sup_final_lr_fraction: float = 0.0
    sup_weight_decay: float = 1.0
    # unsupervised (reverse KL) phase
    unsup_iterations: int = 3000
    unsup_batch: int = 32
    unsup_lr: float = 1e-3
    unsup_schedule: str = "constant"
    unsup_final_lr_fraction: float = 0.0
    unsup_weight_decay: float = 0.0
    modes: tuple = MODES
    seeds: tuple = (0, 1, 2, 3, 4)
    n_samples: int = 10000
    window: int = 100
    # base seed for training streams, and output directory
    seed: int = 0
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        if self.problem not in ("gaussian", "image"):
            raise ConfigError(f"problem must be 'gaussian' or 'image', got {self.problem!r}")
        positive = ["nx", "ny", "n_pairs", "image_side", "n_images", "sup_batch", "unsup_batch",
                    "n_samples", "window"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("sup_iterations", "unsup_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_layers < 2 or self.n_layers % 2:
            raise ConfigError("n_layers must be even and >= 2")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ConfigError("hidden_widths must list positive widths")
        if self.clamp <= 0:
            raise ConfigError("clamp must be positive")
        if self.problem == "image" and self.image_side < 8:
            raise ConfigError("image_side must be at least 8")
        if not 0.0 < self.sensing_rate <= 1.0:
            raise ConfigError("sensing_rate must lie in (0, 1]")
        for phase in ("sup", "unsup"):
            if getattr(self, f"{phase}_lr") <= 0:
                raise ConfigError(f"{phase}_lr must be positive")
            if getattr(self, f"{phase}_schedule") not in ("constant", "cosine"):
                raise ConfigError(f"{phase}_schedule must be 'constant' or 'cosine'")
            if getattr(self, f"{phase}_weight_decay") < 0:
                raise ConfigError(f"{phase}_weight_decay must be >= 0")
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ConfigError(f"modes must be a non-empty subset of {MODES}")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("modes listed twice")
        if not self.seeds or min(self.seeds) < 0 or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct non-negative indices")
        if not 0 <= self.seed < 2 ** 64 or not 0 <= self.problem_seed < 2 ** 64:
            raise ConfigError("seeds must fit in an unsigned 64-bit integer")
        if self.n_samples < 2:
            raise ConfigError("n_samples must be >= 2")
        if self.problem == "gaussian" and self.sup_batch > self.n_pairs:
            raise ConfigError("sup_batch exceeds n_pairs")
        if self.problem == "image" and self.sup_batch > self.n_images:
            raise ConfigError("sup_batch exceeds n_images")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TUPLE_TYPES = {"hidden_widths": int, "modes": str, "seeds": int}


def _convert(key: str, raw: str):
    default = _FIELDS[key].default
    try:
        if key in _TUPLE_TYPES:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_TUPLE_TYPES[key](s) for s in items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r}") from err
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except UnicodeDecodeError as err:
        raise ConfigError(f"{path}: config must be UTF-8") from err


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    lines = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def image_preset(**kw) -> ExperimentConfig:
    """Desk-scale image experiment defaults."""
    base = ExperimentConfig(problem="image", n_layers=6, hidden_widths=(128,), sup_iterations=2000,
                            unsup_iterations=2000, modes=("scratch", "warm"), seeds=(0, 1, 2),
                            n_samples=256)
    return base.with_overrides(**kw)
