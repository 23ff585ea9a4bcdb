"""Lookup of the configs shipped with the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from ..errors import ConfigError
from .config import ExperimentConfig, parse_config, parse_text

PREFIX = "figures/"


def _configs_dir():
    return resources.files("dsgdlab.harness") / "configs"


def list_experiments() -> list[tuple[str, str]]:
    """``(name, description)`` of every shipped config, sorted by name."""
    out = []
    for entry in sorted(_configs_dir().iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".toml"):
            cfg = parse_text(entry.read_text(), entry.name)
            out.append((entry.name[:-5], cfg.description))
    return out


def load_experiment(ref: str) -> ExperimentConfig:
    """Resolve ``ref`` as a path to a TOML file, else as a shipped config name."""
    path = Path(ref)
    if path.suffix == ".toml" or path.exists():
        return parse_config(path)
    name = ref[len(PREFIX):] if ref.startswith(PREFIX) else ref
    entry = _configs_dir() / f"{name}.toml"
    if not entry.is_file():
        known = ", ".join(n for n, _ in list_experiments())
        raise ConfigError(f"unknown experiment {ref!r}; shipped: {known}")
    return parse_text(entry.read_text(), f"{name}.toml")
