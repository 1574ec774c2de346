"""Unrolled learned primal-dual reconstruction networks.

Both variants run ``num_iterations`` alternating updates::

    z <- z + Dual_i([z, A x[0], y])
    x <- x + Primal_i([x, A^T z[0]])

starting from ``x = FBP(y)`` (copied into every primal channel) and
``z = 0``; the reconstruction is primal channel 0. In the discrete variant
each block is five 3x3 convolutions with PReLU in between. In the
continuous variant the three channel-preserving middle convolutions become
the right-hand side of a Neural ODE integrated over ``[t0, t1]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .geometry import ScanGeometry
from .neural_ode import (
    OdeDynamics,
    SolverConfig,
    ode_backward_adjoint,
    ode_backward_direct,
    ode_forward,
)
from .nn_core import Conv2d, GroupNorm, ParamStore, PReLU, Sequential, resolve_dtype
from .operators import back_project, fbp, forward_project

VARIANTS = ("discrete", "continuous")


@dataclass(frozen=True)
class UnrolledConfig:
    num_iterations: int = 10
    num_primal_channels: int = 5
    num_dual_channels: int = 5
    hidden_channels: int = 32
    kernel_size: int = 3
    variant: str = "discrete"
    normalize: bool | None = None  # None: on for continuous, off for discrete
    num_groups: int = 8
    ode: SolverConfig = field(default_factory=SolverConfig)
    time_conditioning: bool = False
    adjoint: bool = False  # continuous only: train through the adjoint ODE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_iterations < 1:
            raise ConfigurationError("an unrolled model needs at least one iteration")
        if min(self.num_primal_channels, self.num_dual_channels, self.hidden_channels) < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel size must be a positive odd integer")
        if self.use_normalization and self.hidden_channels % self.num_groups:
            raise ConfigurationError(
                f"hidden_channels={self.hidden_channels} not divisible by num_groups={self.num_groups}"
            )
        if isinstance(self.ode, dict):
            object.__setattr__(self, "ode", SolverConfig(**self.ode))

    @property
    def use_normalization(self) -> bool:
        return self.variant == "continuous" if self.normalize is None else bool(self.normalize)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ode"] = self.ode.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UnrolledConfig":
        d = dict(d)
        if "ode" in d and isinstance(d["ode"], dict):
            d["ode"] = SolverConfig(**d["ode"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class DiscreteBlock:
    """Five convolutions with PReLU between them; last conv starts at zero."""

    def __init__(self, name: str, c_in: int, c_out: int, cfg: UnrolledConfig):
        h, k = cfg.hidden_channels, cfg.kernel_size
        self.c_in, self.c_out = c_in, c_out
        self.net = Sequential(
            [
                Conv2d(f"{name}.conv0", c_in, h, k),
                PReLU(f"{name}.act0", h),
                Conv2d(f"{name}.conv1", h, h, k),
                PReLU(f"{name}.act1", h),
                Conv2d(f"{name}.conv2", h, h, k),
                PReLU(f"{name}.act2", h),
                Conv2d(f"{name}.conv3", h, h, k),
                PReLU(f"{name}.act3", h),
                Conv2d(f"{name}.conv4", h, c_out, k, zero_init=True),
            ]
        )

    @property
    def param_keys(self):
        return self.net.param_keys

    def num_params(self) -> int:
        return self.net.num_params()

    def init(self, store, rng, dtype):
        self.net.init(store, rng, dtype)

    def forward(self, params, x, keep=True):
        return self.net.forward(params, x)

    def backward(self, params, cache, grad_out):
        return self.net.backward(params, cache, grad_out)


class ContinuousBlock:
    """Entry conv, Neural ODE over the hidden channels, exit conv.

    The ODE right-hand side is conv-[norm]-PReLU-conv-[norm]-PReLU-conv-[norm],
    shared across all integration steps.
    """

    def __init__(self, name: str, c_in: int, c_out: int, cfg: UnrolledConfig):
        h, k = cfg.hidden_channels, cfg.kernel_size
        self.c_in, self.c_out = c_in, c_out
        self.solver = cfg.ode
        self.adjoint = cfg.adjoint
        self.head = Sequential([Conv2d(f"{name}.conv0", c_in, h, k), PReLU(f"{name}.act0", h)])
        dyn_layers = []
        first_in = h + 1 if cfg.time_conditioning else h
        for j in range(3):
            dyn_layers.append(Conv2d(f"{name}.ode.conv{j + 1}", first_in if j == 0 else h, h, k))
            if cfg.use_normalization:
                dyn_layers.append(GroupNorm(f"{name}.ode.norm{j + 1}", h, cfg.num_groups))
            if j < 2:
                dyn_layers.append(PReLU(f"{name}.ode.act{j + 1}", h))
        self.dynamics = OdeDynamics(Sequential(dyn_layers), h, cfg.time_conditioning)
        self.tail = Sequential(
            [PReLU(f"{name}.act3", h), Conv2d(f"{name}.conv4", h, c_out, k, zero_init=True)]
        )

    @property
    def param_keys(self):
        return self.head.param_keys + self.dynamics.layers.param_keys + self.tail.param_keys

    def num_params(self) -> int:
        return self.head.num_params() + self.dynamics.num_params() + self.tail.num_params()

    def init(self, store, rng, dtype):
        self.head.init(store, rng, dtype)
        self.dynamics.init(store, rng, dtype)
        self.tail.init(store, rng, dtype)

    def forward(self, params, x, keep=True):
        h0, c_head = self.head.forward(params, x)
        sol = ode_forward(self.dynamics, params, h0, self.solver, store=keep and not self.adjoint)
        out, c_tail = self.tail.forward(params, sol.x1)
        return out, (c_head, sol, c_tail)

    def backward(self, params, cache, grad_out):
        c_head, sol, c_tail = cache
        g, grads = self.tail.backward(params, c_tail, grad_out)
        if self.adjoint:
            g, g_ode = ode_backward_adjoint(self.dynamics, params, sol.x1, g, self.solver)
        else:
            g, g_ode = ode_backward_direct(self.dynamics, params, sol, g, self.solver)
        grads.update(g_ode)
        g, g_head = self.head.backward(params, c_head, g)
        grads.update(g_head)
        return g, grads


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-iteration primal channel 0 (``images``) and block caches for backprop."""

    images: list[np.ndarray] = field(default_factory=list)
    dual_caches: list = field(default_factory=list)
    primal_caches: list = field(default_factory=list)


class LearnedPrimalDual:
    """LPD (``variant="discrete"``) or cLPD (``variant="continuous"``) for one geometry."""

    def __init__(
        self,
        geometry: ScanGeometry,
        config: UnrolledConfig | None = None,
        seed: int = 0,
        precision: str = "f32",
        params: ParamStore | None = None,
    ):
        self.geometry = geometry
        self.config = config or UnrolledConfig()
        self.dtype = resolve_dtype(precision)
        cfg = self.config
        block = ContinuousBlock if cfg.variant == "continuous" else DiscreteBlock
        self.dual_blocks = [
            block(f"it{i}.dual", cfg.num_dual_channels + 2, cfg.num_dual_channels, cfg)
            for i in range(cfg.num_iterations)
        ]
        self.primal_blocks = [
            block(f"it{i}.primal", cfg.num_primal_channels + 1, cfg.num_primal_channels, cfg)
            for i in range(cfg.num_iterations)
        ]
        if params is None:
            params = ParamStore()
            rng = np.random.default_rng(seed)
            for d, p in zip(self.dual_blocks, self.primal_blocks):
                d.init(params, rng, self.dtype)
                p.init(params, rng, self.dtype)
        else:
            expected = [k for d, p in zip(self.dual_blocks, self.primal_blocks) for k in d.param_keys + p.param_keys]
            if sorted(expected) != sorted(params.names()):
                raise ConfigurationError("parameter names do not match the model architecture")
            params = params.astype(self.dtype)
        self.params = params

    @property
    def variant(self) -> str:
        return self.config.variant

    def num_params(self) -> int:
        return self.params.num_scalars()

    def _prepare(self, y: np.ndarray) -> np.ndarray:
        g = self.geometry
        y = np.asarray(y, dtype=self.dtype)
        if y.ndim == 2:
            y = y[None]
        if y.ndim != 3 or y.shape[1:] != g.sinogram_shape:
            raise ShapeError(f"expected sinograms of shape (batch, {g.num_angles}, {g.num_detectors}), got {y.shape}")
        return y

    def forward(self, y: np.ndarray, keep_caches: bool = False) -> tuple[np.ndarray, ForwardTrace]:
        """Reconstruct a batch of sinograms; returns ``(images, trace)``."""
        cfg, g, params = self.config, self.geometry, self.params
        y = self._prepare(y)
        b = y.shape[0]
        x0 = fbp(y, g).astype(self.dtype)
        x = np.repeat(x0[:, None], cfg.num_primal_channels, axis=1)
        z = np.zeros((b, cfg.num_dual_channels, *g.sinogram_shape), dtype=self.dtype)
        trace = ForwardTrace()
        for i, (dual, primal) in enumerate(zip(self.dual_blocks, self.primal_blocks)):
            ax = forward_project(x[:, 0], g)
            dz, c_d = dual.forward(params, np.concatenate([z, ax[:, None], y[:, None]], axis=1), keep_caches)
            z = z + dz
            atz = back_project(z[:, 0], g)
            dx, c_p = primal.forward(params, np.concatenate([x, atz[:, None]], axis=1), keep_caches)
            x = x + dx
            if z.shape[2:] != g.sinogram_shape or x.shape[2:] != g.image_shape:
                raise ShapeError(f"state left its space at iteration {i + 1}")
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
                raise DivergenceError(f"non-finite state at iteration {i + 1}", index=i + 1)
            trace.images.append(x[:, 0].copy())
            if keep_caches:
                trace.dual_caches.append(c_d)
                trace.primal_caches.append(c_p)
        return x[:, 0], trace

    def reconstruct(self, y: np.ndarray) -> np.ndarray:
        out, _ = self.forward(y)
        return out

    def backward(self, trace: ForwardTrace, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given ``dL/d(output)``, from a ``keep_caches`` trace."""
        cfg, g, params = self.config, self.geometry, self.params
        if not trace.dual_caches:
            raise RuntimeError("forward must be run with keep_caches=True before backward")
        b = grad_out.shape[0]
        gx = np.zeros((b, cfg.num_primal_channels, *g.image_shape), dtype=self.dtype)
        gx[:, 0] = grad_out
        gz = np.zeros((b, cfg.num_dual_channels, *g.sinogram_shape), dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        for i in range(cfg.num_iterations - 1, -1, -1):
            g_in, gp = self.primal_blocks[i].backward(params, trace.primal_caches[i], gx)
            grads.update(gp)
            gx = gx + g_in[:, : cfg.num_primal_channels]
            gz[:, 0] += forward_project(g_in[:, cfg.num_primal_channels], g)
            g_in, gd = self.dual_blocks[i].backward(params, trace.dual_caches[i], gz)
            grads.update(gd)
            gz = gz + g_in[:, : cfg.num_dual_channels]
            gx[:, 0] += back_project(g_in[:, cfg.num_dual_channels], g)
        return grads

    def loss_and_grad(self, y: np.ndarray, target: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error over batch and pixels, with exact parameter gradients."""
        target = np.asarray(target, dtype=self.dtype)
        out, trace = self.forward(y, keep_caches=True)
        if target.shape != out.shape:
            raise ShapeError(f"target shape {target.shape} != output shape {out.shape}")
        diff = out - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        grads = self.backward(trace, (2.0 / diff.size) * diff)
        return loss, grads

    def with_precision(self, precision: str) -> "LearnedPrimalDual":
        return LearnedPrimalDual(self.geometry, self.config, precision=precision, params=self.params)

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": "learned_primal_dual",
            "unrolled_config": self.config.to_dict(),
            "geometry": self.geometry.to_dict(),
            "precision": "f64" if self.dtype == np.float64 else "f32",
        }

    def save(self, path: str | Path, extra_arrays: dict | None = None, extra_header: dict | None = None) -> Path:
        from .io import write_checkpoint

        arrays = dict(self.params.items())
        arrays.update(extra_arrays or {})
        header = self.header()
        header.update(extra_header or {})
        return write_checkpoint(path, arrays, header)

    @classmethod
    def load(cls, path: str | Path, precision: str | None = None) -> "LearnedPrimalDual":
        from .io import read_checkpoint

        arrays, header = read_checkpoint(path)
        cfg = UnrolledConfig.from_dict(header["unrolled_config"])
        geometry = ScanGeometry.from_dict(header["geometry"])
        keys = [k for k in arrays if not k.startswith("adam.")]
        params = ParamStore({k: arrays[k] for k in keys})
        return cls(geometry, cfg, precision=precision or header.get("precision", "f32"), params=params)


def lpd_forward(model: LearnedPrimalDual, y: np.ndarray, g: ScanGeometry | None = None):
    if g is not None and g != model.geometry:
        raise ShapeError("model was built for a different geometry")
    return model.forward(y)


def lpd_backward(model: LearnedPrimalDual, y: np.ndarray, target: np.ndarray, g: ScanGeometry | None = None):
    if g is not None and g != model.geometry:
        raise ShapeError("model was built for a different geometry")
    return model.loss_and_grad(y, target)


def count_parameters(model: LearnedPrimalDual) -> int:
    return model.num_params()
