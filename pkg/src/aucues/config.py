"""Pipeline configuration: one JSON file drives every CLI command.

Unknown keys are rejected so typos fail loudly. Paths are resolved
relative to the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .swin import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    prediction: float = 0.5
    f1_min: float = 0.5
    acc_min: float = 0.8
    alpha: float = 0.05

    def __post_init__(self):
        for name in ("prediction", "f1_min", "alpha"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"threshold {name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class PhenotypeSettings:
    pain_half_window: float = 3600.0
    acuity_width: float = 4 * 3600.0
    abd_width: float = 12 * 3600.0
    coma_rass_max: int = -4
    coma_gcs_max: int = 8


@dataclass(frozen=True)
class Paths:
    dataset_manifests: tuple[str, ...] = ()
    coverage: str | None = None
    frame_manifest: str | None = None
    frames_dir: str | None = None
    landmark_manifest: str | None = None
    images_dir: str | None = None
    stays: str | None = None
    pain_events: str | None = None
    therapies: str | None = None
    assessments: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "out"
    seed: int = 0
    test_fraction: float = 0.3
    align_out_size: int = 32
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    phenotype: PhenotypeSettings = field(default_factory=PhenotypeSettings)


def _build(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc

    base = path.parent

    def resolve(p):
        return str(base / p) if p is not None else None

    paths_raw = _build(Paths, raw.pop("paths", {}), "paths")
    paths = Paths(
        dataset_manifests=tuple(resolve(p) for p in paths_raw.pop("dataset_manifests", [])),
        **{k: resolve(v) for k, v in paths_raw.items()},
    )
    model = ModelConfig(**_build(ModelConfig, raw.pop("model", {}), "model"))
    train = TrainConfig(**_build(TrainConfig, raw.pop("train", {}), "train"))
    thresholds = Thresholds(**_build(Thresholds, raw.pop("thresholds", {}), "thresholds"))
    pheno = PhenotypeSettings(**_build(PhenotypeSettings, raw.pop("phenotype", {}), "phenotype"))
    top = _build(PipelineConfig, raw, "config")
    out_dir = top.pop("out_dir", "out")
    return PipelineConfig(out_dir=str(base / out_dir), paths=paths, model=model,
                          train=train, thresholds=thresholds, phenotype=pheno, **top)
