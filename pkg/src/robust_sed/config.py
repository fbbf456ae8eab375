"""Pipeline configuration: one JSON document per run, with dotted overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .augment import AugmentationSpec
from .features import FrontendConfig
from .frontend import DESK_SPECTROGRAM, SpectrogramConfig
from .network.model import GEOMETRIES, Formulation, Geometry
from .network.training import TrainConfig


@dataclass
class DetectionConfig:
    tau: float = 0.5
    min_lag: float = 0.15
    batch: int = 512


@dataclass
class EvalConfig:
    tolerance: float = 0.5
    n_thresholds: int = 100
    segment: float = 1800.0
    band_split: float = 5000.0


@dataclass
class SynthConfig:
    duration: float = 1200.0
    n_sensors: int = 6
    n_calls: int = 200
    negatives_per_positive: int = 1


@dataclass
class PipelineConfig:
    frontend: FrontendConfig = field(
        default_factory=lambda: FrontendConfig(kind="pcen", spectrogram=DESK_SPECTROGRAM))
    geometry: str = "desk"
    formulation: str = "at"
    train: TrainConfig = field(default_factory=TrainConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augmentation: str = "none"
    augment_spec: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0

    def __post_init__(self):
        Formulation.parse(self.formulation)
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.geometry!r}; expected {sorted(GEOMETRIES)}")
        if self.augmentation not in ("none", "gda", "ada"):
            raise ValueError("augmentation must be none, gda or ada")
        if self.augmentation == "ada" and Formulation.parse(self.formulation) != Formulation.STATIC:
            # background mixing would contradict the context slices paired with each clip
            raise ValueError("adaptive noise augmentation requires the static formulation")
        g = self.geometry_spec
        if self.frontend.spectrogram.n_mels != g.n_bands:
            raise ValueError(
                f"dimension mismatch: frontend has {self.frontend.spectrogram.n_mels} mel bands, "
                f"geometry {self.geometry!r} expects {g.n_bands}"
            )

    @property
    def geometry_spec(self) -> Geometry:
        return GEOMETRIES[self.geometry]

    def to_dict(self) -> dict:
        return {
            "frontend": self.frontend.to_dict(),
            "geometry": self.geometry,
            "formulation": Formulation.parse(self.formulation).value,
            "train": self.train.to_dict(),
            "detection": asdict(self.detection),
            "evaluation": asdict(self.evaluation),
            "synth": asdict(self.synth),
            "augmentation": self.augmentation,
            "augment_spec": self.augment_spec.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        kw = {}
        if "frontend" in d:
            kw["frontend"] = FrontendConfig.from_dict(d["frontend"])
        for key, typ in (("train", TrainConfig), ("detection", DetectionConfig),
                         ("evaluation", EvalConfig), ("synth", SynthConfig)):
            if key in d:
                kw[key] = _build(typ, d[key], key)
        if "augment_spec" in d:
            spec = dict(d["augment_spec"])
            for r in ("pitch_range", "stretch_range", "snr_range"):
                if r in spec:
                    spec[r] = tuple(spec[r])
            kw["augment_spec"] = _build(AugmentationSpec, spec, "augment_spec")
        for key in ("geometry", "formulation", "augmentation", "seed"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, assignments) -> "PipelineConfig":
        """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
        d = copy.deepcopy(self.to_dict())
        for item in assignments or ():
            if "=" not in item:
                raise ValueError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ValueError(f"unknown configuration key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown configuration key {key!r}")
            node[parts[-1]] = value
            if key == "geometry" and value in GEOMETRIES:
                # keep the mel resolution consistent with the chosen geometry
                spec = d["frontend"]["spectrogram"]
                if value == "full":
                    spec.update(SpectrogramConfig().to_dict())
                else:
                    spec.update(DESK_SPECTROGRAM.to_dict())
        return PipelineConfig.from_dict(d)


def _build(typ, values: dict, where: str):
    allowed = set(typ.__dataclass_fields__)
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return typ(**values)


def load_config(path=None, overrides=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        with open(path) as f:
            cfg = PipelineConfig.from_json(f.read())
    return cfg.with_overrides(overrides)
