"""
scene.py
Gaussian-mixture scene model for paired visible/infrared samples
"""
import math
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from utils.errors import ConfigError

NUM_MODALITIES = 2
BLOB_CELL = 8

# profile name -> (texture_fraction, unique components per modality, noise std)
PROFILES = {
    "homogeneous": (0.0, 0, 0.0),
    "default": (0.5, 2, 0.1),
    "high_freq": (1.0, 2, 0.1),
}


class PatternKind(Enum):
    """Spatial pattern a component's Gaussian field is rendered with"""
    BLOB = "blob"
    TEXTURE = "high_freq_texture"


@dataclass(frozen=True)
class InfoComponent:
    """
    One Gaussian information term C * N(mean, std^2) over a region.

    region is (y0, x0, y1, x1) in [0, 1] image fractions.
    """
    intensity: float
    mean: float
    std: float
    pattern: PatternKind
    region: Tuple[float, float, float, float]
    shared: bool

    def problems(self) -> List[str]:
        issues = []
        if not self.std > 0:
            issues.append(f"component std must be > 0, got {self.std}")
        if self.intensity < 0:
            issues.append(f"component intensity must be >= 0, got {self.intensity}")
        y0, x0, y1, x1 = self.region
        if not (0.0 <= y0 <= y1 <= 1.0 and 0.0 <= x0 <= x1 <= 1.0):
            issues.append(f"region {self.region} must lie inside [0, 1]^2 with y0<=y1, x0<=x1")
        return issues


@dataclass
class SceneSpec:
    """Homogeneous (shared, class-defining) and per-modality unique components of one sample"""
    label: int
    homogeneous: List[InfoComponent]
    unique: List[List[InfoComponent]]
    noise_std: float
    gains: Tuple[float, ...] = (1.0, 1.0)
    channels: int = 4
    height: int = 32
    width: int = 32
    fusion_mean: float = 0.0

    def __post_init__(self):
        problems = []
        for c in self.homogeneous + [c for per in self.unique for c in per]:
            problems.extend(c.problems())
        if len(self.unique) != NUM_MODALITIES or len(self.gains) != NUM_MODALITIES:
            problems.append(f"scene needs unique lists and gains for {NUM_MODALITIES} modalities")
        if self.noise_std < 0:
            problems.append(f"noise_std must be >= 0, got {self.noise_std}")
        if problems:
            raise ConfigError(problems)

    def constraint_residual(self) -> float:
        """|mean of unique-component means - fusion mean|; 0 without unique components"""
        means = [c.mean for per in self.unique for c in per]
        if not means:
            return 0.0
        return abs(float(np.mean(means)) - self.fusion_mean)


@dataclass
class DatasetConfig:
    """Generator settings; (config, seed) fully determines the written files"""
    height: int = 32
    width: int = 32
    channels: int = 4
    num_classes: int = 4
    samples: Dict[str, int] = field(default_factory=lambda: {"train": 256, "val": 128})
    seed: int = 0
    profile: str = "default"
    texture_fraction: Optional[float] = None
    unique_components: Optional[int] = None
    noise_std: Optional[float] = None
    unique_intensity: float = 1.0
    homogeneous_mean: float = 1.0
    homogeneous_std: float = 0.5
    fusion_mean: float = 0.0
    gains: List[float] = field(default_factory=lambda: [1.0, 1.0])

    def resolved(self) -> Tuple[float, int, float]:
        """(texture_fraction, unique components, noise std) after the profile's defaults"""
        fraction, count, noise = PROFILES[self.profile]
        return (
            fraction if self.texture_fraction is None else self.texture_fraction,
            count if self.unique_components is None else self.unique_components,
            noise if self.noise_std is None else self.noise_std,
        )

    def validate(self) -> List[str]:
        problems = []
        if self.profile not in PROFILES:
            problems.append(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
            return problems
        fraction, count, noise = self.resolved()
        if self.height < 1 or self.width < 1 or self.channels < 1:
            problems.append(f"image shape must be positive, got {self.channels}x{self.height}x{self.width}")
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.samples or any(n < 0 for n in self.samples.values()):
            problems.append(f"samples must map split names to counts >= 0, got {self.samples}")
        if not 0.0 <= fraction <= 1.0:
            problems.append(f"texture_fraction must lie in [0, 1], got {fraction}")
        if count < 0:
            problems.append(f"unique_components must be >= 0, got {count}")
        if noise < 0:
            problems.append(f"noise_std must be >= 0, got {noise}")
        if self.unique_intensity < 0:
            problems.append(f"unique_intensity must be >= 0, got {self.unique_intensity}")
        if not self.homogeneous_std > 0:
            problems.append(f"homogeneous_std must be > 0, got {self.homogeneous_std}")
        if len(self.gains) != NUM_MODALITIES:
            problems.append(f"gains must list {NUM_MODALITIES} values, got {self.gains}")
        return problems

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], source: Optional[str] = None) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        problems = [f"{key}: unknown field" for key in data if key not in known]
        try:
            config = cls(**{k: v for k, v in data.items() if k in known})
        except TypeError as e:
            raise ConfigError([str(e)], source=source) from e
        try:
            problems.extend(config.validate())
        except TypeError as e:
            problems.append(f"ill-typed field: {e}")
        if problems:
            raise ConfigError(problems, source=source)
        return config


def class_region(label: int, num_classes: int) -> Tuple[float, float, float, float]:
    """Cell `label` of the smallest square grid holding every class"""
    grid = max(1, math.ceil(math.sqrt(num_classes)))
    row, col = divmod(label, grid)
    return (row / grid, col / grid, (row + 1) / grid, (col + 1) / grid)


def build_scene(config: DatasetConfig, label: int, rng: np.random.Generator) -> SceneSpec:
    """
    Draw the scene of one sample.

    The class decides where the homogeneous component sits. Unique
    components get random regions and patterns; their means are shifted
    so that they average to the fusion mean.
    """
    fraction, count, noise = config.resolved()
    homogeneous = [InfoComponent(
        intensity=1.0,
        mean=config.homogeneous_mean,
        std=config.homogeneous_std,
        pattern=PatternKind.BLOB,
        region=class_region(label, config.num_classes),
        shared=True,
    )]

    drafts = []
    for m in range(NUM_MODALITIES):
        for _ in range(count):
            y0, x0 = rng.uniform(0.0, 0.5, size=2)
            h, w = rng.uniform(0.25, 0.5, size=2)
            pattern = PatternKind.TEXTURE if rng.random() < fraction else PatternKind.BLOB
            drafts.append((m, float(rng.uniform(-1.0, 1.0)), float(rng.uniform(0.3, 1.0)),
                           pattern, (float(y0), float(x0), float(y0 + h), float(x0 + w))))

    unique: List[List[InfoComponent]] = [[] for _ in range(NUM_MODALITIES)]
    if drafts:
        shift = config.fusion_mean - float(np.mean([d[1] for d in drafts]))
        for m, mean, std, pattern, region in drafts:
            unique[m].append(InfoComponent(
                intensity=config.unique_intensity / count,
                mean=mean + shift,
                std=std,
                pattern=pattern,
                region=region,
                shared=False,
            ))

    return SceneSpec(
        label=label,
        homogeneous=homogeneous,
        unique=unique,
        noise_std=noise,
        gains=tuple(config.gains),
        channels=config.channels,
        height=config.height,
        width=config.width,
        fusion_mean=config.fusion_mean,
    )


def pixel_box(region: Tuple[float, float, float, float], height: int, width: int) -> Tuple[int, int, int, int]:
    y0, x0, y1, x1 = region
    box = (int(round(y0 * height)), int(round(x0 * width)),
           int(round(y1 * height)), int(round(x1 * width)))
    if box[2] <= box[0] or box[3] <= box[1]:
        raise ConfigError([f"region {region} has zero area on a {height}x{width} image"])
    return box


def standard_field(pattern: PatternKind, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """
    Zero-mean unit-variance field with the pattern's spatial structure.

    Blobs repeat one N(0, 1) draw over BLOB_CELL x BLOB_CELL cells;
    textures draw every pixel independently. Both have N(0, 1) marginals.
    """
    *lead, h, w = shape
    if pattern == PatternKind.TEXTURE:
        return rng.standard_normal(shape)
    coarse = rng.standard_normal((*lead, -(-h // BLOB_CELL), -(-w // BLOB_CELL)))
    fine = np.repeat(np.repeat(coarse, BLOB_CELL, axis=-2), BLOB_CELL, axis=-1)
    return fine[..., :h, :w]


def render_pair(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    Render one paired sample as two [C, H, W] float64 arrays.

    Homogeneous components use one field for both modalities, scaled by the
    modality gain; unique components and background noise are drawn per modality.
    """
    shape = (spec.channels, spec.height, spec.width)
    boxes = [pixel_box(c.region, spec.height, spec.width)
             for c in spec.homogeneous + [c for per in spec.unique for c in per]]
    images = [np.zeros(shape) for _ in range(NUM_MODALITIES)]

    for component, (y0, x0, y1, x1) in zip(spec.homogeneous, boxes):
        z = standard_field(component.pattern, (spec.channels, y1 - y0, x1 - x0), rng)
        values = component.intensity * (component.mean + component.std * z)
        for m, image in enumerate(images):
            image[:, y0:y1, x0:x1] += spec.gains[m] * values

    unique_boxes = iter(boxes[len(spec.homogeneous):])
    for m, per_modality in enumerate(spec.unique):
        for component in per_modality:
            y0, x0, y1, x1 = next(unique_boxes)
            z = standard_field(component.pattern, (spec.channels, y1 - y0, x1 - x0), rng)
            images[m][:, y0:y1, x0:x1] += component.intensity * (component.mean + component.std * z)

    if spec.noise_std > 0:
        for image in images:
            image += rng.normal(0.0, spec.noise_std, size=shape)
    return images[0], images[1], spec.label
