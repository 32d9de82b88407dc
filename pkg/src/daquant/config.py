"""Flat ``key = value`` experiment configs with dotted section names.

Example::

    # logistic regression, two schemes
    task.kind = logistic
    task.d = 10
    schemes = daqu_full, unquantized
    train.n = 20000
    selection.kind = adaptive
    selection.alpha = 0.2

Blank lines and ``#`` comments are ignored.  Every key must be known, and
values are type-checked on load; errors name the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from daquant.problems import TaskKind, TaskSpec
from daquant.quant.dataq import ScaleMode
from daquant.selection import SelectionKind
from daquant.sim.simulator import ExperimentConfig, Sampling, Scheme


class ConfigError(ValueError):
    """A config file or override could not be parsed or validated."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(text: str):
        return None if text.lower() in ("none", "") else parse(text)
    return inner


def _enum(cls) -> Callable[[str], object]:
    def inner(text: str):
        try:
            return cls(text.lower())
        except ValueError:
            choices = ", ".join(e.value for e in cls)
            raise ValueError(f"expected one of {choices}, got {text!r}") from None
    return inner


def _list(parse: Callable[[str], object]) -> Callable[[str], tuple]:
    def inner(text: str) -> tuple:
        return tuple(parse(p.strip()) for p in text.split(",") if p.strip())
    return inner


# key -> (parser, default)
FIELDS: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "schemes": (_list(_enum(Scheme)), (Scheme.DAQU_FULL,)),
    "task.kind": (_enum(TaskKind), TaskKind.LEAST_SQUARES),
    "task.d": (int, 10),
    "task.N": (int, 1000),
    "task.B": (float, 1.0),
    "task.hidden": (int, 16),
    "task.degree": (int, 3),
    "task.activation": (str, "tanh"),
    "task.noise": (float, 0.1),
    "task.seed": (int, 0),
    "task.data_path": (_optional(str), None),
    "task.C_z": (_optional(float), None),
    "task.C_w": (_optional(float), None),
    "quant.m": (_optional(int), None),
    "quant.m_factor": (float, 1.0),
    "quant.mode": (_enum(ScaleMode), ScaleMode.ABSOLUTE),
    "selection.kind": (_enum(SelectionKind), SelectionKind.DISABLED),
    "selection.alpha": (float, 0.2),
    "selection.c": (float, 0.25),
    "selection.horizon": (_optional(int), None),
    "train.n": (int, 1000),
    "train.lr": (float, 0.1),
    "train.lr_decay": (float, 1.0),
    "train.lr_boundaries": (_list(int), ()),
    "train.momentum": (float, 0.0),
    "train.batch_size": (int, 1),
    "train.nodes": (int, 1),
    "train.shared_randomness": (_bool, False),
    "train.D_radius": (_optional(float), None),
    "train.sampling": (_enum(Sampling), Sampling.EPOCH),
    "train.record_every": (int, 100),
    "train.Cz_trials": (int, 2000),
    "compare.target_loss": (_optional(float), None),
}

# config key -> ExperimentConfig field
_EXPERIMENT_KEYS = {
    "quant.m": "m", "quant.m_factor": "m_factor", "quant.mode": "quant_mode",
    "selection.kind": "selection", "selection.alpha": "selection_alpha",
    "selection.c": "selection_c", "selection.horizon": "selection_horizon",
    "train.n": "n", "train.lr": "lr", "train.lr_decay": "lr_decay",
    "train.lr_boundaries": "lr_boundaries", "train.momentum": "momentum",
    "train.batch_size": "batch_size", "train.nodes": "nodes",
    "train.shared_randomness": "shared_randomness", "train.D_radius": "D_radius",
    "train.sampling": "sampling", "train.record_every": "record_every",
    "train.Cz_trials": "Cz_trials",
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in FIELDS.items()})

    def set(self, key: str, text: str, where: str = "") -> None:
        prefix = f"{where}: " if where else ""
        if key not in FIELDS:
            raise ConfigError(f"{prefix}{key}: unknown key")
        parse, _ = FIELDS[key]
        try:
            self.values[key] = parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{prefix}{key}: {exc}") from None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def schemes(self) -> tuple[Scheme, ...]:
        return self.values["schemes"]

    def task_spec(self) -> TaskSpec:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("task.")}
        return TaskSpec(**kw)

    def experiment(self, scheme: Scheme) -> ExperimentConfig:
        kw = {attr: self.values[key] for key, attr in _EXPERIMENT_KEYS.items()}
        try:
            return ExperimentConfig(task=self.task_spec(), scheme=scheme, seed=self.values["seed"], **kw)
        except ValueError as exc:
            # ExperimentConfig reports "field: msg"; map the field back to its key
            name, _, msg = str(exc).partition(": ")
            keys = [k for k, a in _EXPERIMENT_KEYS.items() if a == name]
            raise ConfigError(f"{keys[0] if keys else name}: {msg or exc}") from None

    def validate(self) -> None:
        if not self.schemes:
            raise ConfigError("schemes: at least one scheme is required")
        spec = self.values
        for key in ("task.d", "task.N", "task.hidden", "task.degree"):
            if spec[key] < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if not spec["task.B"] > 0:
            raise ConfigError("task.B: must be > 0")
        if not 0 < spec["selection.alpha"] <= 1:
            raise ConfigError("selection.alpha: must lie in (0, 1]")
        if not 0 <= spec["selection.c"] <= 0.25:
            raise ConfigError("selection.c: must lie in [0, 0.25]")
        for scheme in self.schemes:
            self.experiment(scheme)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values.items())


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        cfg.set(key.strip(), value, f"{source}:{lineno}")
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    """Parse ``path`` (or start from defaults), then apply overrides in order."""
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
        cfg = parse_config(text, str(path))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        cfg.set(key.strip(), value, "--set")
    if seed is not None:
        cfg.values["seed"] = seed
    cfg.validate()
    return cfg
