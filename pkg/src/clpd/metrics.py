"""PSNR and SSIM for reconstructions against ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass(frozen=True)
class MetricConfig:
    data_range: float = 1.0
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if not self.data_range > 0:
            raise ValueError("data_range must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("SSIM window must be a positive odd integer")

    @classmethod
    def for_reference(cls, ref: np.ndarray, **kw) -> "MetricConfig":
        """Range set to ``ref.max() - ref.min()`` (1.0 for a constant image)."""
        span = float(np.max(ref) - np.min(ref))
        return cls(data_range=span if span > 0 else 1.0, **kw)


DEFAULT = MetricConfig()


def psnr(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = DEFAULT) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(cfg.data_range**2 / mse)


def _box_mean(a: np.ndarray, k: int) -> np.ndarray:
    return sliding_window_view(a, (k, k)).mean(axis=(-2, -1))


def ssim_map(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = DEFAULT) -> np.ndarray:
    """Local SSIM over every fully contained ``window`` x ``window`` patch."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    k = cfg.window
    if x.ndim != 2 or min(x.shape) < k:
        raise ShapeError(f"SSIM needs a 2D image of at least {k}x{k}, got {x.shape}")
    L = cfg.data_range
    c1 = (cfg.k1 * L) ** 2
    c2 = (cfg.k2 * L) ** 2
    mx, my = _box_mean(x, k), _box_mean(ref, k)
    vx = _box_mean(x * x, k) - mx * mx
    vy = _box_mean(ref * ref, k) - my * my
    cxy = _box_mean(x * ref, k) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim(x: np.ndarray, ref: np.ndarray, cfg: MetricConfig = DEFAULT) -> float:
    return float(ssim_map(x, ref, cfg).mean())
