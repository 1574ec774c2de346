"""Fixed-step Neural-ODE solver with two gradient paths.

``ode_backward_direct`` differentiates the unrolled solver steps exactly
(needs every step state). ``ode_backward_adjoint`` integrates the augmented
adjoint system backward in time, recomputing the state as it goes, so its
storage does not grow with the number of steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .nn_core import ParamStore, Sequential, accumulate

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    num_steps: int = 4
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown ODE method {self.method!r}; expected one of {METHODS}")
        if self.num_steps < 1:
            raise ConfigurationError("num_steps must be positive")
        if not self.t0 < self.t1:
            raise ConfigurationError("integration interval must satisfy t0 < t1")

    @property
    def step_size(self) -> float:
        return (self.t1 - self.t0) / self.num_steps

    def to_dict(self) -> dict:
        return {"method": self.method, "num_steps": self.num_steps, "t0": self.t0, "t1": self.t1}


@dataclass
class OdeDynamics:
    """Right-hand side ``f(x, t)`` given by a channel-preserving layer stack.

    With ``time_conditioning`` a constant channel holding ``t`` is appended
    to the input, so the first layer must accept ``channels + 1`` inputs.
    """

    layers: Sequential
    channels: int
    time_conditioning: bool = False

    def num_params(self) -> int:
        return self.layers.num_params()

    def init(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32) -> None:
        self.layers.init(store, rng, dtype)

    def __call__(self, params: ParamStore, x: np.ndarray, t: float):
        if x.shape[1] != self.channels:
            raise ShapeError(f"dynamics expects {self.channels} channels, got {x.shape[1]}")
        inp = x
        if self.time_conditioning:
            tch = np.full((x.shape[0], 1) + x.shape[2:], t, dtype=x.dtype)
            inp = np.concatenate([x, tch], axis=1)
        out, caches = self.layers.forward(params, inp)
        if out.shape != x.shape:
            raise ShapeError(f"dynamics output {out.shape} does not match state {x.shape}")
        return out, caches

    def vjp(self, params: ParamStore, caches, a: np.ndarray):
        """``(a^T df/dx, a^T df/dtheta)`` at the point where ``caches`` were taken."""
        gx, grads = self.layers.backward(params, caches, a)
        if self.time_conditioning:
            gx = gx[:, : self.channels]
        return gx, grads


@dataclass
class OdeSolution:
    x1: np.ndarray
    states: list[np.ndarray] | None = None
    # per-step layer caches of every solver stage, reused by the direct backward
    stage_caches: list[list] | None = None

    @property
    def num_stored(self) -> int:
        return 0 if self.states is None else len(self.states)


def _check(x: np.ndarray, step: int, what: str = "ODE state") -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{what} became non-finite at step {step}", index=step)


def _step(dyn, params, x, t, h, method):
    """One solver step; returns the new state and the caches of each stage."""
    if method == "euler":
        k1, c1 = dyn(params, x, t)
        return x + h * k1, [c1]
    k1, c1 = dyn(params, x, t)
    k2, c2 = dyn(params, x + (h / 2) * k1, t + h / 2)
    k3, c3 = dyn(params, x + (h / 2) * k2, t + h / 2)
    k4, c4 = dyn(params, x + h * k3, t + h)
    return x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4), [c1, c2, c3, c4]


def ode_forward(
    dyn: OdeDynamics, params: ParamStore, x0: np.ndarray, cfg: SolverConfig, store: bool = False
) -> OdeSolution:
    """Integrate from ``cfg.t0`` to ``cfg.t1``; keep step states only if ``store``."""
    h = cfg.step_size
    x = x0
    states = [x0] if store else None
    stage_caches = [] if store else None
    for k in range(cfg.num_steps):
        x, caches = _step(dyn, params, x, cfg.t0 + k * h, h, cfg.method)
        _check(x, k + 1)
        if store:
            states.append(x)
            stage_caches.append(caches)
    return OdeSolution(x1=x, states=states, stage_caches=stage_caches)


def _step_backward(dyn, params, caches, h, method, a, grads):
    """Reverse-mode through one solver step given its stage caches; returns dL/dx."""
    if method == "euler":
        gx, g = dyn.vjp(params, caches[0], h * a)
        accumulate(grads, g)
        return a + gx
    c1, c2, c3, c4 = caches
    gx = a.copy()
    g4, g = dyn.vjp(params, c4, (h / 6) * a)
    accumulate(grads, g)
    gx += g4
    g3, g = dyn.vjp(params, c3, (h / 3) * a + h * g4)
    accumulate(grads, g)
    gx += g3
    g2, g = dyn.vjp(params, c2, (h / 3) * a + (h / 2) * g3)
    accumulate(grads, g)
    gx += g2
    g1, g = dyn.vjp(params, c1, (h / 6) * a + (h / 2) * g2)
    accumulate(grads, g)
    gx += g1
    return gx


def ode_backward_direct(
    dyn: OdeDynamics,
    params: ParamStore,
    solution: OdeSolution,
    grad_out: np.ndarray,
    cfg: SolverConfig,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact gradients of the discrete solver map, from stored step states."""
    if solution.states is None or len(solution.states) != cfg.num_steps + 1:
        raise RuntimeError("direct backprop needs the step states; run ode_forward(..., store=True)")
    if grad_out.shape != solution.x1.shape:
        raise ShapeError("gradient shape does not match the ODE state")
    h = cfg.step_size
    a = grad_out
    grads: dict[str, np.ndarray] = {}
    for k in range(cfg.num_steps - 1, -1, -1):
        if solution.stage_caches is not None:
            caches = solution.stage_caches[k]
        else:
            caches = _step(dyn, params, solution.states[k], cfg.t0 + k * h, h, cfg.method)[1]
        a = _step_backward(dyn, params, caches, h, cfg.method, a, grads)
        _check(a, k, "adjoint state")
    return a, _complete(grads, dyn, params)


def _complete(grads, dyn, params):
    # parameters that never received a gradient (e.g. zero dynamics) get zeros
    return {k: grads[k] if k in grads else np.zeros_like(params[k]) for k in dyn.layers.param_keys}


def _augmented(dyn, params, x, a, t):
    f, caches = dyn(params, x, t)
    gx, gp = dyn.vjp(params, caches, a)
    return f, gx, gp


def ode_backward_adjoint(
    dyn: OdeDynamics,
    params: ParamStore,
    x1: np.ndarray,
    grad_out: np.ndarray,
    cfg: SolverConfig,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients by solving the adjoint ODE from ``t1`` back to ``t0``.

    Augmented system, integrated with step ``-h``::

        dx/dt = f(x, t)
        da/dt = -a^T df/dx
        dg/dt = -a^T df/dtheta,   g(t1) = 0
    """
    if grad_out.shape != x1.shape:
        raise ShapeError("gradient shape does not match the ODE state")
    dt = -cfg.step_size
    x, a = x1, grad_out
    g: dict[str, np.ndarray] = {}
    for j in range(cfg.num_steps):
        t = cfg.t1 + j * dt
        if cfg.method == "euler":
            f, gx, gp = _augmented(dyn, params, x, a, t)
            x = x + dt * f
            a = a - dt * gx
            accumulate(g, {k: -dt * v for k, v in gp.items()})
        else:
            f1, gx1, gp1 = _augmented(dyn, params, x, a, t)
            f2, gx2, gp2 = _augmented(dyn, params, x + (dt / 2) * f1, a - (dt / 2) * gx1, t + dt / 2)
            f3, gx3, gp3 = _augmented(dyn, params, x + (dt / 2) * f2, a - (dt / 2) * gx2, t + dt / 2)
            f4, gx4, gp4 = _augmented(dyn, params, x + dt * f3, a - dt * gx3, t + dt)
            x = x + (dt / 6) * (f1 + 2 * f2 + 2 * f3 + f4)
            a = a - (dt / 6) * (gx1 + 2 * gx2 + 2 * gx3 + gx4)
            accumulate(
                g,
                {k: -(dt / 6) * (gp1[k] + 2 * gp2[k] + 2 * gp3[k] + gp4[k]) for k in gp1},
            )
        _check(a, cfg.num_steps - j - 1, "adjoint state")
        _check(x, cfg.num_steps - j - 1)
    return a, _complete(g, dyn, params)
