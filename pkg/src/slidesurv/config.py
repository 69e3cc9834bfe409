"""Pipeline configuration: one YAML file drives every stage.

Schema (all sections optional except paths; defaults shown):

    seed: 0
    jobs: 1
    paths:
      data_root: data          # clinical.csv, images.csv, images/
      output_root: out         # stage artifacts and manifests
    synth:                     # present -> the synth stage may run
      n_patients: 60           # required when the section is present
      images_per_patient: 1
      image_side: 512
      signal_strength: 2.0
      censor_rate: 0.25
    sampler:
      side: 64
      ratio: 0.05
      bg_gray_threshold: 200
      bg_area_threshold: 0.5
      max_retries_per_patch: 50
    cluster:
      p: 4
      thumb_side: 16
      pca_dim: 16
    network:
      input_side: 64
      channels: 32
      cbam_reduce: 4
      nam_reduce: 32
      feature_dim: 32
      epochs: 30
      batch_size: 32
      lr0: 0.01
      lr_half_every: 20
    selection:
      threshold: 0.55
      holdout_fraction: 0.2
    survival:
      folds: 5
      lambda_count: 50
      lambda_min_ratio: 0.001
      horizons_years: [1, 3, 5]

Relative paths resolve against the config file's directory. Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError
from .network import NetConfig
from .sampling import SamplerConfig
from .synthetic import SynthSpec


@dataclass(frozen=True)
class ClusterConfig:
    p: int = 4
    thumb_side: int = 16
    pca_dim: int = 16

    def validate(self) -> None:
        if self.p < 1:
            raise ConfigError(f"cluster.p must be >= 1, got {self.p}")
        if self.thumb_side < 2:
            raise ConfigError(f"cluster.thumb_side must be >= 2, got {self.thumb_side}")
        if not 1 <= self.pca_dim <= self.thumb_side * self.thumb_side:
            raise ConfigError(
                f"cluster.pca_dim must be in [1, thumb_side^2], got {self.pca_dim}")


@dataclass(frozen=True)
class SelectionConfig:
    threshold: float = 0.55
    holdout_fraction: float = 0.2

    def validate(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"selection.threshold must be in [0, 1], "
                              f"got {self.threshold}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"selection.holdout_fraction must be in (0, 1), "
                              f"got {self.holdout_fraction}")


@dataclass(frozen=True)
class SurvivalConfig:
    folds: int = 5
    lambda_count: int = 50
    lambda_min_ratio: float = 1e-3
    horizons_years: tuple = (1.0, 3.0, 5.0)

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError(f"survival.folds must be >= 2, got {self.folds}")
        if self.lambda_count < 1:
            raise ConfigError("survival.lambda_count must be >= 1")
        if not 0.0 < self.lambda_min_ratio <= 1.0:
            raise ConfigError("survival.lambda_min_ratio must be in (0, 1]")
        if not self.horizons_years or any(h <= 0 for h in self.horizons_years):
            raise ConfigError("survival.horizons_years must be positive")


@dataclass(frozen=True)
class PipelineConfig:
    data_root: Path
    output_root: Path
    seed: int = 0
    jobs: int = 1
    synth: SynthSpec | None = None
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    cluster: ClusterConfig = dataclasses.field(default_factory=ClusterConfig)
    network: NetConfig = dataclasses.field(default_factory=NetConfig)
    selection: SelectionConfig = dataclasses.field(default_factory=SelectionConfig)
    survival: SurvivalConfig = dataclasses.field(default_factory=SurvivalConfig)

    def validate(self) -> None:
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.synth is not None:
            self.synth.validate()
            if self.synth.image_side < self.sampler.side:
                raise ConfigError(
                    f"synth.image_side {self.synth.image_side} is smaller than "
                    f"sampler.side {self.sampler.side}")
        self.sampler.validate()
        self.cluster.validate()
        self.network.validate()
        self.selection.validate()
        self.survival.validate()
        if self.network.input_side != self.sampler.side:
            raise ConfigError(
                f"network.input_side {self.network.input_side} must equal "
                f"sampler.side {self.sampler.side}")


_SECTION_TYPES = {
    "synth": (SynthSpec, {"n_patients", "images_per_patient", "image_side",
                          "signal_strength", "censor_rate"}),
    "sampler": (SamplerConfig, None),
    "cluster": (ClusterConfig, None),
    "network": (NetConfig, None),
    "selection": (SelectionConfig, None),
    "survival": (SurvivalConfig, None),
}


def _build_section(name: str, raw) -> object:
    cls, allowed = _SECTION_TYPES[name]
    if allowed is None:
        allowed = {f.name for f in dataclasses.fields(cls)}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"section '{name}': unknown keys {sorted(unknown)}")
    kwargs = dict(raw)
    if name == "survival" and "horizons_years" in kwargs:
        hs = kwargs["horizons_years"]
        if not isinstance(hs, (list, tuple)):
            raise ConfigError("survival.horizons_years must be a list")
        kwargs["horizons_years"] = tuple(float(h) for h in hs)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    allowed_top = {"seed", "jobs", "paths"} | set(_SECTION_TYPES)
    unknown = set(raw) - allowed_top
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")

    paths = raw.get("paths")
    if not isinstance(paths, dict) or set(paths) - {"data_root", "output_root"}:
        raise ConfigError(f"{path}: 'paths' must map data_root and output_root")
    if "data_root" not in paths or "output_root" not in paths:
        raise ConfigError(f"{path}: paths.data_root and paths.output_root are required")
    base = path.resolve().parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    sections = {}
    for name in _SECTION_TYPES:
        if name in raw:
            sections[name] = _build_section(name, raw[name])
    seed = raw.get("seed", 0)
    jobs = raw.get("jobs", 1)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"{path}: seed must be a non-negative integer")
    if not isinstance(jobs, int) or isinstance(jobs, bool):
        raise ConfigError(f"{path}: jobs must be an integer")

    config = PipelineConfig(
        data_root=resolve(paths["data_root"]),
        output_root=resolve(paths["output_root"]),
        seed=seed, jobs=jobs,
        synth=sections.get("synth"),
        sampler=sections.get("sampler", SamplerConfig()),
        cluster=sections.get("cluster", ClusterConfig()),
        network=sections.get("network", NetConfig()),
        selection=sections.get("selection", SelectionConfig()),
        survival=sections.get("survival", SurvivalConfig()),
    )
    try:
        config.validate()
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return config


def section_params(config: PipelineConfig, name: str) -> dict:
    """Plain-dict view of one section for manifest hashing (no paths)."""
    obj = getattr(config, name)
    if obj is None:
        return {}
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
