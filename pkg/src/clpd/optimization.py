"""Proximal operators and the primal-dual hybrid gradient (PDHG) solver.

The instantiated problem is

    min_x  1/2 ||A x - y||^2 + lambda/2 ||x||^2

with the data term handled through its convex conjugate on the dual side.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .geometry import ScanGeometry
from .operators import back_project, fbp, forward_project, operator_norm

PROX_TAGS = ("l2_data_dual", "tikhonov", "nonneg_indicator")


@dataclass(frozen=True)
class ProxKind:
    tag: str
    reference: np.ndarray | None = field(default=None, compare=False)
    weight: float = 0.0

    @classmethod
    def l2_data_dual(cls, y: np.ndarray) -> "ProxKind":
        return cls("l2_data_dual", reference=np.asarray(y))

    @classmethod
    def tikhonov(cls, weight: float) -> "ProxKind":
        if weight < 0:
            raise ConfigurationError("Tikhonov weight must be nonnegative")
        return cls("tikhonov", weight=float(weight))

    @classmethod
    def nonneg(cls) -> "ProxKind":
        return cls("nonneg_indicator")


def prox_eval(kind: ProxKind, step: float, v: np.ndarray) -> np.ndarray:
    """Closed-form ``argmin_u step*F(u) + 1/2 ||u - v||^2`` for the shipped ``F``.

    ``l2_data_dual`` is the prox of the conjugate of ``1/2 ||. - y||^2``.
    """
    if step <= 0:
        raise ValueError("prox step must be positive")
    v = np.asarray(v)
    if kind.tag == "l2_data_dual":
        y = 0.0 if kind.reference is None else kind.reference
        return (v - step * y) / (1.0 + step)
    if kind.tag == "tikhonov":
        return v / (1.0 + step * kind.weight)
    if kind.tag == "nonneg_indicator":
        return np.maximum(v, 0)
    raise ConfigurationError(f"unknown prox kind {kind.tag!r}; expected one of {PROX_TAGS}")


@dataclass(frozen=True)
class PdhgConfig:
    sigma: float
    tau: float
    rho: float = 1.0
    num_iterations: int = 200
    regularization_weight: float = 0.0
    op_norm: float | None = None

    def __post_init__(self):
        if self.sigma <= 0 or self.tau <= 0:
            raise ConfigurationError("sigma and tau must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError("rho must lie in [0, 1]")
        if self.num_iterations < 0:
            raise ConfigurationError("num_iterations must be nonnegative")
        if self.regularization_weight < 0:
            raise ConfigurationError("regularization weight must be nonnegative")
        if self.op_norm is not None and self.sigma * self.tau * self.op_norm**2 > 1.0 + 1e-12:
            raise ConfigurationError(
                f"step sizes violate sigma*tau*||A||^2 <= 1 "
                f"({self.sigma * self.tau * self.op_norm**2:.4g})"
            )

    @classmethod
    def for_geometry(
        cls,
        g: ScanGeometry,
        num_iterations: int = 200,
        regularization_weight: float = 0.0,
        rho: float = 1.0,
        safety: float = 0.95,
        norm_iterations: int = 100,
    ) -> "PdhgConfig":
        """Balanced steps ``sigma = tau = safety / ||A||``."""
        norm = operator_norm(g, iterations=norm_iterations)
        step = safety / norm
        return cls(step, step, rho, num_iterations, regularization_weight, op_norm=norm)


@dataclass
class PdhgResult:
    x: np.ndarray
    z: np.ndarray
    objective: list[float]
    time_ms: list[float]

    def write_trace(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "time_ms"])
            for i, (obj, ms) in enumerate(zip(self.objective, self.time_ms), start=1):
                w.writerow([i, repr(float(obj)), f"{ms:.3f}"])
        return path


def objective(x: np.ndarray, y: np.ndarray, g: ScanGeometry, weight: float) -> float:
    r = forward_project(x, g) - y
    return 0.5 * float(np.vdot(r, r)) + 0.5 * weight * float(np.vdot(x, x))


def pdhg_solve(
    y: np.ndarray,
    g: ScanGeometry,
    cfg: PdhgConfig,
    data_prox: ProxKind | None = None,
    reg_prox: ProxKind | None = None,
    x0: np.ndarray | None = None,
    z0: np.ndarray | None = None,
) -> PdhgResult:
    """Run ``cfg.num_iterations`` PDHG steps and record the objective per step.

    Defaults: squared-l2 data term on ``y``, Tikhonov regularizer with
    ``cfg.regularization_weight``, ``x0 = fbp(y)`` and ``z0 = 0``.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != g.sinogram_shape:
        raise ShapeError(f"sinogram shape {y.shape} does not match geometry {g.sinogram_shape}")
    data_prox = data_prox or ProxKind.l2_data_dual(y)
    reg_prox = reg_prox or ProxKind.tikhonov(cfg.regularization_weight)
    x = fbp(y, g) if x0 is None else np.array(x0, dtype=np.float64)
    z = np.zeros(g.sinogram_shape) if z0 is None else np.array(z0, dtype=np.float64)
    if x.shape != g.image_shape or z.shape != g.sinogram_shape:
        raise ShapeError("initial iterates do not match the geometry")

    x_bar = x.copy()
    objectives: list[float] = []
    times: list[float] = []
    start = time.perf_counter()
    for i in range(1, cfg.num_iterations + 1):
        z = prox_eval(data_prox, cfg.sigma, z + cfg.sigma * forward_project(x_bar, g))
        x_new = prox_eval(reg_prox, cfg.tau, x - cfg.tau * back_project(z, g))
        x_bar = x_new + cfg.rho * (x_new - x)
        x = x_new
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"PDHG diverged at iteration {i}", index=i)
        objectives.append(objective(x, y, g, cfg.regularization_weight))
        times.append((time.perf_counter() - start) * 1e3)
    return PdhgResult(x=x, z=z, objective=objectives, time_ms=times)
