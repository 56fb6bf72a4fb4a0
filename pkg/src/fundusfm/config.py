"""Experiment configuration: YAML loading, grid expansion, canonical hashing.

One YAML file describes either a single experiment cell or, via a ``grid:``
section, a cross-product of cells (regimes x resolutions x protocols x
fractions x tasks). Every artifact a run produces is keyed by the config's
canonical hash, which covers all semantically relevant fields and is
invariant to field ordering.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import TASK_KINDS
from .errors import ConfigError
from .models import REGIMES
from .preprocess import PreprocessConfig
from .training import PROTOCOLS, TrainSpec

#: fields that do not change what a run computes, only where it lands
_UNHASHED_FIELDS = ("output_dir",)

#: default stress-test fractions
DEFAULT_FRACTIONS = (0.01, 0.10, 0.50, 1.00)


@dataclass(frozen=True)
class ExperimentConfig:
    task_kind: str
    regime: str
    resolution: int
    protocol: str
    manifest_path: str
    fraction: float = 1.0
    n_folds: int = 5
    seed: int = 0
    base_width: int = 64
    spec: TrainSpec = field(default_factory=TrainSpec)
    preprocess: PreprocessConfig | None = None
    upstream_checkpoint: str | None = None
    reference: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind: {self.task_kind!r} not one of "
                              f"{TASK_KINDS}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: {self.regime!r} not one of {REGIMES}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol: {self.protocol!r} not one of "
                              f"{PROTOCOLS}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"fraction: {self.fraction} outside (0, 1]")
        if self.n_folds < 2:
            raise ConfigError(f"n_folds: {self.n_folds} must be >= 2")
        if self.base_width < 1:
            raise ConfigError(f"base_width: {self.base_width} must be >= 1")
        if self.spec.protocol != self.protocol:
            raise ConfigError(f"protocol: {self.protocol!r} disagrees with "
                              f"spec.protocol {self.spec.protocol!r}")
        if self.preprocess is None:
            object.__setattr__(
                self, "preprocess",
                PreprocessConfig(resolution=self.resolution, augmentations=(),
                                 strict_resolution=False))
        if self.preprocess.resolution != self.resolution:
            raise ConfigError(f"preprocess.resolution: "
                              f"{self.preprocess.resolution} disagrees with "
                              f"resolution {self.resolution}")

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "regime": self.regime,
            "resolution": self.resolution,
            "protocol": self.protocol,
            "manifest_path": self.manifest_path,
            "fraction": self.fraction,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "base_width": self.base_width,
            "spec": self.spec.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "upstream_checkpoint": self.upstream_checkpoint,
            "reference": self.reference,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_mapping(cls, mapping: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        """Build a config from a plain mapping (parsed YAML).

        Relative ``manifest_path``/``output_dir`` are resolved against
        ``base_dir`` (normally the YAML file's directory). Unknown keys and
        sub-section failures raise ConfigError naming the offending field.
        """
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        values = dict(mapping)
        for required in ("task_kind", "regime", "resolution", "protocol",
                         "manifest_path"):
            if required not in values:
                raise ConfigError(f"{required}: required field missing")

        spec_map = dict(values.get("spec") or {})
        if "protocol" not in spec_map:
            spec_map["protocol"] = values["protocol"]
        try:
            values["spec"] = TrainSpec.from_dict(spec_map)
        except ConfigError as exc:
            raise ConfigError(f"spec: {exc}") from exc

        pp_map = dict(values.get("preprocess") or {})
        pp_map.setdefault("resolution", values["resolution"])
        pp_map.setdefault("augmentations", ())
        pp_map.setdefault("strict_resolution", False)
        try:
            values["preprocess"] = PreprocessConfig.from_dict(pp_map)
        except ConfigError as exc:
            raise ConfigError(f"preprocess: {exc}") from exc

        if base_dir is not None:
            for key in ("manifest_path", "output_dir"):
                if values.get(key):
                    values[key] = str((Path(base_dir) / values[key]).resolve())
        return cls(**values)


def config_hash(config: ExperimentConfig) -> str:
    """Canonical hash covering every semantically relevant field.

    Equal configs hash identically regardless of construction order;
    ``output_dir`` is excluded because it affects only artifact placement.
    """
    payload = {k: v for k, v in config.to_dict().items()
               if k not in _UNHASHED_FIELDS}
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def run_name(config: ExperimentConfig) -> str:
    """Readable, collision-safe directory name for one cell."""
    return (f"{config.task_kind}_{config.regime}_{config.protocol}"
            f"_r{config.resolution}_f{config.fraction:g}"
            f"_{config_hash(config)[:12]}")


def _apply_override(mapping: dict, dotted_key: str, value) -> None:
    parts = dotted_key.split(".")
    target = mapping
    for part in parts[:-1]:
        node = target.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"grid: cannot descend into {dotted_key!r}")
        target = node
    target[parts[-1]] = value


def expand_grid(mapping: dict) -> list[dict]:
    """Expand a mapping with an optional ``grid:`` section into cell mappings.

    ``grid`` maps field names (dotted for nested, e.g. ``spec.max_epochs``)
    to value lists; the result is their cross product overlaid on the base
    mapping, in deterministic sorted-key order.
    """
    base = {k: v for k, v in mapping.items() if k != "grid"}
    grid = mapping.get("grid") or {}
    if not grid:
        return [base]
    if not isinstance(grid, dict):
        raise ConfigError("grid: must map field names to value lists")
    keys = sorted(grid)
    for key in keys:
        if not isinstance(grid[key], (list, tuple)) or not grid[key]:
            raise ConfigError(f"grid.{key}: must be a non-empty list")
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = copy.deepcopy(base)
        for key, value in zip(keys, combo):
            _apply_override(cell, key, value)
        cells.append(cell)
    return cells


def load_experiment_configs(path: str | Path) -> list[ExperimentConfig]:
    """Parse one YAML file into its (possibly grid-expanded) config cells."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return [ExperimentConfig.from_mapping(cell, base_dir=path.parent)
            for cell in expand_grid(raw)]


def load_yaml_mapping(path: str | Path) -> dict:
    """Parse a small non-experiment config (report/external/explain)."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return raw
