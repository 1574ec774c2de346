"""Parallel-beam scan geometries and synthetic phantoms."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

MIN_SIZE = 16


class GeometryKind(str, enum.Enum):
    FULL = "full"
    SPARSE = "sparse"
    LIMITED = "limited"


class ExperimentSetting(str, enum.Enum):
    """The six acquisition scenarios: angular coverage crossed with dose."""

    FULL_CLINICAL = "full_clinical"
    FULL_EXTREME = "full_extreme"
    SPARSE_CLINICAL = "sparse_clinical"
    SPARSE_EXTREME = "sparse_extreme"
    LIMITED_CLINICAL = "limited_clinical"
    LIMITED_EXTREME = "limited_extreme"

    @classmethod
    def parse(cls, value: "str | ExperimentSetting") -> "ExperimentSetting":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigurationError(f"unknown setting {value!r}; expected one of {names}") from None

    @property
    def kind(self) -> GeometryKind:
        return GeometryKind(self.value.split("_")[0])

    @property
    def dose_label(self) -> str:
        return self.value.split("_")[1]

    @property
    def label(self) -> str:
        return _SETTING_LABELS[self]


_SETTING_LABELS = {
    ExperimentSetting.FULL_CLINICAL: "1.) Full angle, clinical dose",
    ExperimentSetting.FULL_EXTREME: "2.a) Full angle, extremely low dose",
    ExperimentSetting.SPARSE_CLINICAL: "2.b) Sparse angle, clinical dose",
    ExperimentSetting.SPARSE_EXTREME: "2.c) Sparse angle, extremely low dose",
    ExperimentSetting.LIMITED_CLINICAL: "3.a) Limited angle, clinical dose",
    ExperimentSetting.LIMITED_EXTREME: "3.b) Limited angle, extremely low dose",
}

# (num_angles, angle_start, angle_end) per coverage kind
ANGULAR_DEFAULTS = {
    GeometryKind.FULL: (180, 0.0, math.pi),
    GeometryKind.SPARSE: (45, 0.0, math.pi),
    GeometryKind.LIMITED: (60, 0.0, math.pi / 3),
}


@dataclass(frozen=True)
class ScanGeometry:
    """2D parallel-beam acquisition over an ``image_size`` x ``image_size`` grid.

    The image occupies ``[-n*pixel_size/2, n*pixel_size/2]`` on both axes,
    centred on the rotation axis. Detector bins are centred on the same
    axis with spacing ``detector_spacing``.
    """

    num_angles: int
    angle_start: float
    angle_end: float
    num_detectors: int
    detector_spacing: float
    image_size: int
    pixel_size: float

    def __post_init__(self):
        if self.num_angles < 1 or self.num_detectors < 1 or self.image_size < 1:
            raise ConfigurationError("angle, detector and image counts must be positive")
        if not self.angle_start < self.angle_end <= self.angle_start + math.pi + 1e-12:
            raise ConfigurationError(
                f"angular range [{self.angle_start}, {self.angle_end}) must be nonempty and at most pi"
            )
        if self.pixel_size <= 0 or self.detector_spacing <= 0:
            raise ConfigurationError("pixel and detector spacings must be positive")
        span = self.num_detectors * self.detector_spacing
        if span < self.image_size * self.pixel_size * math.sqrt(2) * (1 - 1e-12):
            raise ConfigurationError(
                f"detector span {span:g} does not cover the image diagonal "
                f"{self.image_size * self.pixel_size * math.sqrt(2):g}"
            )

    @property
    def angles(self) -> np.ndarray:
        step = (self.angle_end - self.angle_start) / self.num_angles
        return self.angle_start + step * np.arange(self.num_angles)

    @property
    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.num_detectors) - (self.num_detectors - 1) / 2) * self.detector_spacing

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.num_angles, self.num_detectors)

    @property
    def angular_range(self) -> float:
        return self.angle_end - self.angle_start

    def to_dict(self) -> dict:
        return {
            "num_angles": self.num_angles,
            "angle_start": self.angle_start,
            "angle_end": self.angle_end,
            "num_detectors": self.num_detectors,
            "detector_spacing": self.detector_spacing,
            "image_size": self.image_size,
            "pixel_size": self.pixel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def default_pixel_size(image_size: int) -> float:
    # field of view fixed to [-1, 1]^2 regardless of resolution
    return 2.0 / image_size


def make_geometry(
    setting: "ExperimentSetting | str",
    image_size: int,
    num_angles: int | None = None,
    angle_end: float | None = None,
) -> ScanGeometry:
    """Geometry for ``setting`` at ``image_size``; angle count/arc can be overridden."""
    setting = ExperimentSetting.parse(setting)
    if image_size < MIN_SIZE:
        raise ConfigurationError(f"image_size must be >= {MIN_SIZE}, got {image_size}")
    n_ang, start, end = ANGULAR_DEFAULTS[setting.kind]
    pixel = default_pixel_size(image_size)
    return ScanGeometry(
        num_angles=n_ang if num_angles is None else int(num_angles),
        angle_start=start,
        angle_end=end if angle_end is None else float(angle_end),
        num_detectors=math.ceil(image_size * math.sqrt(2)),
        detector_spacing=pixel,
        image_size=image_size,
        pixel_size=pixel,
    )


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipseSpec:
    """Ellipse in normalized coordinates where the image spans [-1, 1]."""

    center_x: float
    center_y: float
    semi_axis_a: float
    semi_axis_b: float
    rotation: float
    intensity: float

    def __post_init__(self):
        if not (-1 <= self.center_x <= 1 and -1 <= self.center_y <= 1):
            raise ValueError("ellipse centre must lie in [-1, 1]^2")
        if not (0 < self.semi_axis_a <= 1 and 0 < self.semi_axis_b <= 1):
            raise ValueError("semi-axes must lie in (0, 1]")

    def farthest_extent(self) -> float:
        """Largest distance from the origin reached by the ellipse boundary."""
        t = np.linspace(0, 2 * np.pi, 721)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        px = self.semi_axis_a * np.cos(t)
        py = self.semi_axis_b * np.sin(t)
        x = self.center_x + c * px - s * py
        y = self.center_y + s * px + c * py
        return float(np.hypot(x, y).max())

    def mask(self, n: int) -> np.ndarray:
        x, y = _normalized_grid(n)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        dx, dy = x - self.center_x, y - self.center_y
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.semi_axis_a) ** 2 + (v / self.semi_axis_b) ** 2 <= 1.0


def _normalized_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel centres; row 0 is the top of the image (largest y)
    coords = (np.arange(n) - (n - 1) / 2) / (n / 2)
    return coords[None, :], -coords[:, None]


def rasterize(ellipses: Sequence[EllipseSpec], n: int) -> np.ndarray:
    img = np.zeros((n, n), dtype=np.float64)
    for e in ellipses:
        img[e.mask(n)] += e.intensity
    return img


# Toft's modified Shepp-Logan table:
# intensity, semi-axis a, semi-axis b, centre x, centre y, rotation (deg)
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0),
)


def shepp_logan_ellipses() -> list[EllipseSpec]:
    return [
        EllipseSpec(x0, y0, a, b, math.radians(deg), value)
        for value, a, b, x0, y0, deg in _SHEPP_LOGAN
    ]


def shepp_logan(n: int) -> np.ndarray:
    """Modified (high-contrast) Shepp-Logan head phantom, values in [0, 1]."""
    if n < MIN_SIZE:
        raise ValueError(f"phantom size must be >= {MIN_SIZE}, got {n}")
    # overlapping +1.0/-0.8/-0.2 regions can land a hair below zero
    return np.clip(rasterize(shepp_logan_ellipses(), n), 0.0, 1.0)


def sample_ellipse(rng: np.random.Generator) -> EllipseSpec:
    """Draw one ellipse guaranteed to lie inside the unit disk."""
    a = rng.uniform(0.05, 0.6)
    b = rng.uniform(0.05, 0.6)
    room = 1.0 - max(a, b)
    r = room * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * math.pi)
    return EllipseSpec(
        center_x=r * math.cos(phi),
        center_y=r * math.sin(phi),
        semi_axis_a=a,
        semi_axis_b=b,
        rotation=rng.uniform(0, math.pi),
        intensity=rng.uniform(-0.3, 0.7),
    )


def random_ellipse_phantom(
    seed: int, n: int, num_ellipses_range: tuple[int, int] = (3, 8)
) -> np.ndarray:
    """Sum of randomly placed ellipses, clipped to [0, 1]; deterministic in ``seed``."""
    if n < MIN_SIZE:
        raise ValueError(f"phantom size must be >= {MIN_SIZE}, got {n}")
    lo, hi = num_ellipses_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid ellipse count range {num_ellipses_range}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(lo, hi + 1))
    ellipses = [sample_ellipse(rng) for _ in range(k)]
    return np.clip(rasterize(ellipses, n), 0.0, 1.0)
