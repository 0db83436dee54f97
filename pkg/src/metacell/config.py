"""Run configuration: sectioned key-value text with a strict schema.

Unknown sections or keys are rejected outright so a typo cannot silently
fall back to a default, and the top-level rng seed is mandatory because
every stage derives its randomness from it.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .errors import ValidationError

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _BOOL_TRUE:
        return True
    if t in _BOOL_FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default); None default means optional-absent
_SCHEMA = {
    "run": {
        "rng_seed": (int, None),
        "threads": (int, 1),
    },
    "paths": {
        "database": (str, None),
        "model": (str, None),
        "problem": (str, None),
        "field": (str, None),
        "labeling": (str, None),
    },
    "growth": {
        "iterations": (int, 200),
        "batch": (int, 10),
        "neighbor_radius": (float, 0.1),
        "sdf_resolution": (int, 9),
        "retries": (int, 8),
    },
    "training": {
        "epochs": (int, 100),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "optimizer": (str, "rmsprop"),
        "regression_weight": (float, 1.0),
        "mc_samples": (int, 1),
        "validation_fraction": (float, 0.1),
        "latent_dim": (int, 16),
    },
    "analyze": {
        "steps": (int, 4),
        "step_size": (float, 1.0),
        "quantile": (float, 0.3),
        "ratio_threshold": (float, 2.0),
        "starts": (int, 10),
    },
    "family": {
        "delta": (float, 0.05),
        "k": (int, 5),
        "n_links": (int, 50),
        "count": (int, 5),
        "samples_per_edge": (int, 3),
    },
    "design": {
        "beta": (float, 10.0),
        "max_iters": (int, 500),
        "move_tol": (float, 1e-3),
        "mode": (str, "database"),
        "beta_continuation": (_parse_bool, False),
        "resolution": (int, 12),
        "r_occ": (float, 1.5),
    },
    "assembly": {
        "n_candidates": (int, 10),
        "max_iters": (int, 5000),
        "geo_weight": (float, 1.0),
        "mech_weight": (float, 1.0),
    },
}


@dataclass
class RunConfig:
    """Validated configuration; sections fall back to schema defaults."""

    sections: dict

    @property
    def rng_seed(self) -> int:
        return self.sections["run"]["rng_seed"]

    @property
    def threads(self) -> int:
        return self.sections["run"]["threads"]

    def section(self, name: str) -> dict:
        if name not in _SCHEMA:
            raise ValidationError(f"unknown config section {name!r}")
        return self.sections[name]

    def path(self, key: str, required: bool = True):
        value = self.sections["paths"].get(key)
        if value is None and required:
            raise ValidationError(f"config is missing [paths] {key}")
        return value

    def override_seed(self, seed: int) -> None:
        self.sections["run"]["rng_seed"] = int(seed)


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ValidationError(f"cannot read config file {path}")

    sections = {}
    for name, keys in _SCHEMA.items():
        sections[name] = {k: default for k, (_, default) in keys.items()}

    for name in parser.sections():
        if name not in _SCHEMA:
            raise ValidationError(f"unknown config section [{name}]")
        schema = _SCHEMA[name]
        for key, raw in parser.items(name):
            if key not in schema:
                raise ValidationError(f"unknown key {key!r} in section [{name}]")
            kind, _ = schema[key]
            try:
                sections[name][key] = kind(raw)
            except ValueError as exc:
                raise ValidationError(f"bad value for [{name}] {key}: {exc}") from None

    if sections["run"]["rng_seed"] is None:
        raise ValidationError("config must set [run] rng_seed")
    return RunConfig(sections=sections)


def default_config(rng_seed: int = 0) -> RunConfig:
    sections = {
        name: {k: default for k, (_, default) in keys.items()} for name, keys in _SCHEMA.items()
    }
    sections["run"]["rng_seed"] = int(rng_seed)
    return RunConfig(sections=sections)
