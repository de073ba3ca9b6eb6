"""Experiment configuration: a flat YAML mapping of documented keys.

Every problem found while loading is collected and raised together as a
:class:`ConfigError`, each message naming the key and its line.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

EXPERIMENTS = ("simulate", "spectrum", "nonreplicable", "divergence", "replicate", "sign-switching",
               "counterexample")
VOLATILITIES = ("constant", "sine", "sign-switching")


@dataclass
class ExperimentConfig:
    experiment: str
    horizon: float = 1.0
    steps: int = 100
    factors: int = 8
    maturity_refine: int = 1
    volatility: str = "sine"
    sigma0: float = 0.2
    gamma_scale: float = 1.0
    gamma_power: float = 1.0
    switch_source: str = "switched"
    initial_rate: float = 0.03
    initial_curve: str | None = None
    paths: int = 1000
    seed: int = 0
    out: str = "out"
    workers: int = 1
    psi_mode: str = "pointwise"
    spectrum_step: int = 0
    k_max: int = 10
    claim: str = "expmart"
    claim_a: float = 0.5
    steps_list: list = field(default_factory=lambda: [50, 100, 200])
    counterexample_eps: float = 1e-6
    coarse_steps: int = 1000
    figures: bool = False

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# values differing from the dataclass defaults per experiment
EXPERIMENT_DEFAULTS = {
    "simulate": {"paths": 1},
    "spectrum": {"paths": 1, "steps": 50, "factors": 16, "maturity_refine": 4},
    "nonreplicable": {"paths": 1000, "steps": 50, "factors": 8},
    "divergence": {"paths": 1, "steps": 200, "factors": 64},
    "replicate": {"paths": 200, "steps": 50, "factors": 4, "maturity_refine": 4},
    "sign-switching": {"paths": 200, "steps": 50, "factors": 20, "volatility": "sign-switching"},
    "counterexample": {"paths": 1000, "steps": 10_000},
}

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT = {"steps", "factors", "maturity_refine", "paths", "seed", "workers", "spectrum_step", "k_max",
        "coarse_steps"}
_FLOAT = {"horizon", "sigma0", "gamma_scale", "gamma_power", "initial_rate", "claim_a", "counterexample_eps"}
_CHOICES = {"experiment": EXPERIMENTS, "volatility": VOLATILITIES, "switch_source": ("switched", "base"),
            "psi_mode": ("pointwise", "frozen")}


def _check_value(key, value):
    """Return an error string or ``None``."""
    if key in _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            return f"`{key}` must be an integer, got {value!r}"
    elif key in _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            return f"`{key}` must be a finite number, got {value!r}"
    elif key in _CHOICES:
        if value not in _CHOICES[key]:
            return f"`{key}` must be one of {', '.join(_CHOICES[key])}, got {value!r}"
    elif key == "figures":
        if not isinstance(value, bool):
            return f"`figures` must be true or false, got {value!r}"
    elif key == "steps_list":
        if (not isinstance(value, list) or not value
                or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 2 for v in value)):
            return f"`steps_list` must be a non-empty list of integers >= 2, got {value!r}"
    elif key in ("out", "initial_curve"):
        if value is not None and not isinstance(value, str):
            return f"`{key}` must be a string, got {value!r}"
    return None


_RANGES = {
    "horizon": (lambda v: v > 0, "> 0"),
    "steps": (lambda v: v >= 2, ">= 2"),
    "factors": (lambda v: v >= 1, ">= 1"),
    "maturity_refine": (lambda v: v >= 1, ">= 1"),
    "paths": (lambda v: v >= 1, ">= 1"),
    "seed": (lambda v: v >= 0, ">= 0"),
    "workers": (lambda v: v >= 1, ">= 1"),
    "spectrum_step": (lambda v: v >= 0, ">= 0"),
    "k_max": (lambda v: v >= 1, ">= 1"),
    "coarse_steps": (lambda v: v >= 2, ">= 2"),
    "counterexample_eps": (lambda v: 0 < v < 1, "in (0, 1)"),
    "gamma_scale": (lambda v: v > 0, "> 0"),
}


def validate(values: dict, lines: dict | None = None) -> list[str]:
    lines = lines or {}
    where = lambda k: f" (line {lines[k]})" if k in lines else ""
    issues = []
    for key, value in values.items():
        if key not in _FIELDS:
            issues.append(f"unknown key `{key}`{where(key)}")
            continue
        err = _check_value(key, value)
        if err:
            issues.append(err + where(key))
        elif key in _RANGES and not _RANGES[key][0](value):
            issues.append(f"`{key}` = {value!r} out of range, must be {_RANGES[key][1]}{where(key)}")
    if "experiment" not in values:
        issues.append("missing required key `experiment`")
    elif not issues and values.get("spectrum_step", 0) > values.get("steps", 0):
        issues.append(f"`spectrum_step` must not exceed `steps`{where('spectrum_step')}")
    return issues


def build_config(values: dict, lines: dict | None = None) -> ExperimentConfig:
    issues = validate(values, lines)
    if issues:
        raise ConfigError(issues)
    merged = dict(EXPERIMENT_DEFAULTS.get(values["experiment"], {}))
    merged.update(values)
    cfg = ExperimentConfig(**merged)
    issues = validate(cfg.as_dict())
    if issues:
        raise ConfigError(issues)
    return cfg


def _read_mapping(path) -> tuple[dict, dict]:
    with open(path) as fh:
        text = fh.read()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    if data is None:
        return {}, {}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping of keys to values"])
    lines = {k.value: k.start_mark.line + 1 for k, _ in node.value}
    return data, lines


def load_config(path=None, experiment: str | None = None, overrides: dict | None = None,
                env: dict | None = None) -> ExperimentConfig:
    """Read ``path`` (optional), apply ``experiment`` and ``overrides``.

    Seed precedence: ``overrides`` (command line), then ``LAB_SEED``, then the
    file.
    """
    values, lines = _read_mapping(path) if path else ({}, {})
    if experiment is not None:
        if "experiment" in values and values["experiment"] != experiment:
            raise ConfigError([f"config experiment `{values['experiment']}` (line {lines.get('experiment')}) "
                               f"differs from requested `{experiment}`"])
        values["experiment"] = experiment
    env = os.environ if env is None else env
    if "LAB_SEED" in env:
        try:
            values["seed"] = int(env["LAB_SEED"])
        except ValueError:
            raise ConfigError([f"LAB_SEED must be an integer, got {env['LAB_SEED']!r}"]) from None
        lines.pop("seed", None)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
            lines.pop(key, None)
    return build_config(values, lines)
