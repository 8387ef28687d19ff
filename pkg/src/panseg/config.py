"""Pipeline configuration: one JSON document drives every stage.

``PipelineConfig()`` carries the full-scale defaults used for clinical-size
volumes; :func:`phantom_profile` returns the scaled-down profile suited to
the synthetic phantom suite. Every field is range-checked at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .dss import DSSParams
from .forest import ForestParams
from .registration import RegistrationParams

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable configuration document."""


@dataclass(frozen=True)
class VOIConfig:
    size: int = 256                  # VOI edge, voxels
    spacing: float = 1.0             # nominal VOI voxel size, mm
    margin_mm: float = 20.0          # box expansion per face before cropping
    db_boxes: str = "estimated"      # "estimated" | "ground_truth"

    def validate(self):
        if self.size < 2:
            raise ConfigError("voi.size must be >= 2")
        if self.spacing <= 0:
            raise ConfigError("voi.spacing must be > 0")
        if self.margin_mm < 0:
            raise ConfigError("voi.margin_mm must be >= 0")
        if self.db_boxes not in ("estimated", "ground_truth"):
            raise ConfigError("voi.db_boxes must be 'estimated' or 'ground_truth'")


@dataclass(frozen=True)
class SegmentationConfig:
    fg_components: int = 1
    bg_components: int = 2
    lambda_smooth: float = 1.0
    sigma_edge: float = 30.0         # HU
    em_max_iter: int = 100
    em_tol: float = 1e-6
    var_floor: float = 1.0           # HU^2
    largest_component: bool = True

    def validate(self):
        if self.fg_components < 1 or self.bg_components < 1:
            raise ConfigError("component counts must be >= 1")
        if self.lambda_smooth < 0:
            raise ConfigError("segmentation.lambda_smooth must be >= 0")
        if self.sigma_edge <= 0:
            raise ConfigError("segmentation.sigma_edge must be > 0")
        if self.em_max_iter < 1:
            raise ConfigError("segmentation.em_max_iter must be >= 1")
        if self.em_tol <= 0 or self.var_floor <= 0:
            raise ConfigError("segmentation.em_tol and var_floor must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 1234
    jobs: int = 1
    n_select: int = 20               # atlas candidates kept
    localizer: ForestParams = field(default_factory=ForestParams)
    dss: DSSParams = field(default_factory=DSSParams)
    voi: VOIConfig = field(default_factory=VOIConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)

    def validate(self) -> "PipelineConfig":
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.n_select < 1:
            raise ConfigError("n_select must be >= 1")
        try:
            self.localizer.validate()
            self.dss.validate()
            self.registration.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.voi.validate()
        self.segmentation.validate()
        return self

    def to_dict(self) -> dict:
        doc = {"schema_version": CONFIG_SCHEMA_VERSION,
               "seed": self.seed, "jobs": self.jobs, "n_select": self.n_select,
               "localizer": asdict(self.localizer),
               "dss": asdict(self.dss),
               "voi": asdict(self.voi),
               "registration": asdict(self.registration),
               "segmentation": asdict(self.segmentation)}
        doc["registration"]["levels"] = [list(l) for l in self.registration.levels]
        if self.localizer.hu_window is not None:
            doc["localizer"]["hu_window"] = list(self.localizer.hu_window)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version!r} not supported")
        known = {"schema_version", "seed", "jobs", "n_select", "localizer",
                 "dss", "voi", "registration", "segmentation"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def build(cls_, sub: dict, name: str):
            try:
                return cls_(**sub)
            except TypeError as e:
                raise ConfigError(f"bad {name} section: {e}") from e

        loc = dict(doc.get("localizer", {}))
        if loc.get("hu_window") is not None:
            loc["hu_window"] = tuple(loc["hu_window"])
        reg = dict(doc.get("registration", {}))
        if "levels" in reg:
            reg["levels"] = tuple(tuple(int(x) for x in lv) for lv in reg["levels"])
        cfg = cls(seed=int(doc.get("seed", 1234)),
                  jobs=int(doc.get("jobs", 1)),
                  n_select=int(doc.get("n_select", 20)),
                  localizer=build(ForestParams, loc, "localizer"),
                  dss=build(DSSParams, doc.get("dss", {}), "dss"),
                  voi=build(VOIConfig, doc.get("voi", {}), "voi"),
                  registration=build(RegistrationParams, reg, "registration"),
                  segmentation=build(SegmentationConfig,
                                     doc.get("segmentation", {}), "segmentation"))
        return cfg.validate()


def load_config(path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return PipelineConfig.from_dict(doc)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def phantom_profile(seed: int = 1234, jobs: int = 1) -> PipelineConfig:
    """Desk-scale profile matched to the default 64x64x48 phantom datasets."""
    return PipelineConfig(
        seed=seed,
        jobs=jobs,
        n_select=20,
        localizer=ForestParams(patch_size=9, stride=4, n_features=6,
                               n_thresholds=40, min_samples=10, max_depth=7,
                               trees=4, patch_min_mean_hu=-95.0),
        dss=DSSParams(sigma_base=1.2, n_scales=5),
        voi=VOIConfig(size=64, spacing=2.0, margin_mm=20.0),
        registration=RegistrationParams(levels=((16, 4), (8, 2)),
                                        cap_voxels=12.0),
        segmentation=SegmentationConfig(),
    ).validate()
