"""Gradient and solver self-checks shared by the test-suite and ``clpd gradcheck``.

Each check returns a worst-case error (or, for the solver order, the
smallest observed order); ``run_all`` pairs them with their limits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import ScanGeometry
from .models import LearnedPrimalDual, UnrolledConfig
from .neural_ode import OdeDynamics, SolverConfig, ode_backward_adjoint, ode_backward_direct, ode_forward
from .nn_core import Conv2d, GroupNorm, ParamStore, PReLU, Sequential, finite_diff_check, resolve_dtype
from .operators import forward_project


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    limit: float
    at_least: bool = False  # True when value must reach the limit rather than stay under it

    @property
    def passed(self) -> bool:
        return self.value >= self.limit if self.at_least else self.value < self.limit

    def line(self) -> str:
        rel = ">=" if self.at_least else "<"
        return f"{self.name:<24} {self.value:.3e}  (need {rel} {self.limit:g})  {'ok' if self.passed else 'FAIL'}"


def _layer(kind: str, channels: int):
    if kind == "conv2d":
        return Conv2d("layer", channels, channels + 1, 3)
    if kind == "prelu":
        return PReLU("layer", channels)
    if kind == "groupnorm":
        return GroupNorm("layer", channels, num_groups=2)
    raise ValueError(f"unknown layer kind {kind!r}")


def layer_gradient_error(kind: str, seed: int, precision: str = "f64") -> float:
    """Worst relative error of a layer's input and parameter gradients.

    The scalar probed is ``<r, layer(x)>`` for a random ``r``; every input
    and parameter coordinate is checked by central differences.
    """
    dtype = resolve_dtype(precision)
    rng = np.random.default_rng(seed)
    layer = _layer(kind, 4)
    params = ParamStore()
    layer.init(params, rng, dtype)
    for name in layer.param_keys:  # move away from the deterministic init values
        params[name] = params[name] + 0.3 * rng.standard_normal(params[name].shape).astype(dtype)
    x = rng.standard_normal((2, 4, 5, 6)).astype(dtype)
    y, _ = layer.forward(params, x)
    r = rng.standard_normal(y.shape).astype(dtype)

    def wrt_input(v):
        out, cache = layer.forward(params, v.astype(dtype))
        gx, _ = layer.backward(params, cache, r)
        return float(np.vdot(r, out)), gx

    worst = finite_diff_check(wrt_input, x)
    for name in layer.param_keys:

        def wrt_param(v, name=name):
            trial = params.copy()
            trial[name] = v.astype(dtype)
            out, cache = layer.forward(trial, x)
            _, grads = layer.backward(trial, cache, r)
            return float(np.vdot(r, out)), grads[name]

        worst = max(worst, finite_diff_check(wrt_param, params[name]))
    return worst


def random_conv_dynamics(channels: int, seed: int, dtype=np.float64, scale: float = 0.5):
    """Conv-PReLU-conv right-hand side with nonzero weights everywhere."""
    rng = np.random.default_rng(seed)
    layers = Sequential(
        [Conv2d("f.conv1", channels, channels, 3), PReLU("f.act", channels), Conv2d("f.conv2", channels, channels, 3)]
    )
    dyn = OdeDynamics(layers, channels)
    params = ParamStore()
    dyn.init(params, rng, dtype)
    for name in layers.param_keys:
        params[name] = (scale * params[name] + 0.05 * rng.standard_normal(params[name].shape)).astype(dtype)
    return dyn, params


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def adjoint_vs_direct_error(seed: int = 0, channels: int = 4, size: int = 8, num_steps: int = 8) -> float:
    """Relative l2 gap between adjoint-method and unrolled-backprop gradients (RK4)."""
    dyn, params = random_conv_dynamics(channels, seed)
    rng = np.random.default_rng(seed + 1)
    x0 = rng.standard_normal((1, channels, size, size))
    grad_out = rng.standard_normal(x0.shape)
    cfg = SolverConfig("rk4", num_steps)
    sol = ode_forward(dyn, params, x0, cfg, store=True)
    ga, pa = ode_backward_adjoint(dyn, params, sol.x1, grad_out, cfg)
    gd, pd = ode_backward_direct(dyn, params, sol, grad_out, cfg)
    flat_a = np.concatenate([ga.ravel()] + [pa[k].ravel() for k in sorted(pa)])
    flat_d = np.concatenate([gd.ravel()] + [pd[k].ravel() for k in sorted(pd)])
    return _rel(flat_a, flat_d)


class _Linear:
    """``f(x) = x`` with the dynamics interface, for solver-order checks."""

    channels = 1
    time_conditioning = False

    def __call__(self, params, x, t):
        return x, None


def rk4_order(steps: tuple[int, ...] = (2, 4, 8, 16)) -> tuple[float, float]:
    """Smallest observed order over successive halvings, and the 16-step error.

    Integrates ``x' = x`` from ``x(0) = 1`` to ``t = 1`` and compares to ``e``.
    """
    errors = []
    for k in steps:
        sol = ode_forward(_Linear(), None, np.ones((1, 1, 1, 1)), SolverConfig("rk4", k))
        errors.append(abs(float(sol.x1.ravel()[0]) - math.e))
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    return min(orders), errors[steps.index(16)] if 16 in steps else errors[-1]


def tiny_geometry(n: int = 8, num_angles: int = 6) -> ScanGeometry:
    pixel = 2.0 / n
    return ScanGeometry(
        num_angles=num_angles,
        angle_start=0.0,
        angle_end=math.pi,
        num_detectors=math.ceil(n * math.sqrt(2)),
        detector_spacing=pixel,
        image_size=n,
        pixel_size=pixel,
    )


def tiny_model(variant: str, seed: int = 0) -> LearnedPrimalDual:
    """Two-iteration model on an 8x8 / 6-angle problem with every weight nonzero."""
    cfg = UnrolledConfig(
        num_iterations=2,
        num_primal_channels=2,
        num_dual_channels=2,
        hidden_channels=4,
        variant=variant,
        num_groups=2,
        ode=SolverConfig("rk4", 2),
    )
    model = LearnedPrimalDual(tiny_geometry(), cfg, seed=seed, precision="f64")
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        model.params[name] = p + 0.1 * rng.standard_normal(p.shape)
    return model


def unrolled_gradient_error(variant: str, seed: int = 0, num_directions: int = 3, h: float = 1e-6) -> float:
    """Directional finite differences of the full training loss over all parameters.

    ``h`` stays small so the probes rarely straddle a PReLU kink.
    """
    model = tiny_model(variant, seed)
    g = model.geometry
    rng = np.random.default_rng(seed + 7)
    target = rng.uniform(0, 1, (2, *g.image_shape))
    y = forward_project(target, g) + 0.05 * rng.standard_normal((2, *g.sinogram_shape))
    _, grads = model.loss_and_grad(y, target)
    base = model.params.copy()
    worst = 0.0
    for _ in range(num_directions):
        direction = {k: rng.standard_normal(v.shape) for k, v in base.items()}
        analytic = sum(float(np.vdot(grads[k], direction[k])) for k in direction)
        values = []
        for sign in (1, -1):
            for k, v in base.items():
                model.params[k] = v + sign * h * direction[k]
            values.append(model.loss_and_grad(y, target)[0])
        for k, v in base.items():
            model.params[k] = v
        numeric = (values[0] - values[1]) / (2 * h)
        worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-300))
    return worst


def run_all(seeds: range = range(3), precision: str = "f64") -> list[Check]:
    """All nn_core, neural_ode and unrolled-model checks with their limits."""
    checks = [
        Check(kind, max(layer_gradient_error(kind, s, precision) for s in seeds), 1e-4)
        for kind in ("conv2d", "prelu", "groupnorm")
    ]
    checks.append(Check("ode_adjoint_vs_direct", max(adjoint_vs_direct_error(s) for s in seeds), 1e-3))
    order, err16 = rk4_order()
    checks.append(Check("rk4_order", order, 3.5, at_least=True))
    checks.append(Check("rk4_16_step_error", err16, 1e-6))
    checks.append(Check("lpd_unrolled", unrolled_gradient_error("discrete"), 1e-3))
    checks.append(Check("clpd_unrolled", unrolled_gradient_error("continuous"), 1e-3))
    return checks
