"""Experiment configuration: loading, schema validation and presets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema

from .core import ModelSpec
from .env import EnvironmentLaw, check_compatible, law_from_dict

PRESETS = ("m1", "m1_fair", "m2", "sites")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit status 2."""


def schema() -> dict:
    return json.loads(resources.files("rwdre").joinpath("schema/config.schema.json").read_text())


def preset_path(name: str):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return resources.files("rwdre").joinpath(f"presets/{name}.json")


@dataclass
class ExperimentConfig:
    model: ModelSpec
    environment: EnvironmentLaw
    experiment: dict
    document: dict

    @property
    def seed(self) -> int:
        return int(self.experiment["seed"])

    def get(self, key, default=None):
        return self.experiment.get(key, default)


def parse(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    return from_document(doc, source)


def from_document(doc: dict, source: str = "<config>") -> ExperimentConfig:
    validator = jsonschema.Draft202012Validator(schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{source}: schema violation at {where}: {e.message}")
    try:
        spec = ModelSpec.from_dict(doc["model"])
        law = law_from_dict(doc["environment"])
        check_compatible(law, spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return ExperimentConfig(spec, law, dict(doc["experiment"]), doc)


def load(path_or_preset: str) -> ExperimentConfig:
    """Read a config file, or a shipped preset given as ``preset:NAME``."""
    if path_or_preset.startswith("preset:"):
        p = preset_path(path_or_preset.split(":", 1)[1])
        return parse(p.read_text(), path_or_preset)
    path = Path(path_or_preset)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse(text, str(path))
