"""Small differentiable compute core on numpy arrays.

Tensors are plain ``numpy.ndarray`` objects laid out as
``(batch, channels, height, width)``. Every layer exposes an explicit
``forward`` returning ``(output, cache)`` and a ``backward`` consuming that
cache; models compose these by hand instead of recording a tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision: str | np.dtype | type) -> np.dtype:
    if isinstance(precision, str) and precision in DTYPES:
        return np.dtype(DTYPES[precision])
    dtype = np.dtype(precision)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {precision!r}")
    return dtype


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Parameter storage
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered, named collection of learnable arrays."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} already registered")
        self._arrays[name] = np.ascontiguousarray(value)
        return self._arrays[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if value.shape != self._arrays[name].shape:
            raise ShapeError(f"{name}: expected {self._arrays[name].shape}, got {value.shape}")
        self._arrays[name][...] = value

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def num_scalars(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self._arrays.items()})

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self._arrays.values())).dtype


def accumulate(into: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Add ``grads`` into ``into`` key by key (in place)."""
    for k, g in grads.items():
        if k in into:
            into[k] += g
        else:
            into[k] = g.copy()
    return into


# ---------------------------------------------------------------------------
# Functional kernels
# ---------------------------------------------------------------------------


def _pad_flat(x: np.ndarray, p: int) -> tuple[np.ndarray, int, int, int]:
    """Zero-pad ``x`` (B, C, H, W) and lay it out as (C, B*Hp*Wp + slack).

    In this layout a spatial shift by ``(i, j)`` is a column offset of
    ``i*Wp + j``, so every kernel tap reads one contiguous slice. Outputs are
    computed on the padded grid and the rows/columns past ``H``/``W`` are
    discarded.
    """
    b, c, h, w = x.shape
    hp, wp = h + 2 * p, w + 2 * p
    n = b * hp * wp
    flat = np.zeros((c, n + 2 * p * wp + 2 * p), dtype=x.dtype)
    flat[:, :n].reshape(c, b, hp, wp)[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
    return flat, n, hp, wp


def _check_conv(weight: np.ndarray, x: np.ndarray) -> None:
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {weight.shape}")
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got shape {x.shape}")


def conv2d_forward(weight: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding, plus bias."""
    _check_conv(weight, x)
    c_out, c_in, k, _ = weight.shape
    b, _, h, w = x.shape
    flat, n, hp, wp = _pad_flat(x, (k - 1) // 2)
    # one GEMM for all taps, then sum the taps at their shifted offsets
    taps = (weight.transpose(2, 3, 0, 1).reshape(k * k * c_out, c_in) @ flat).reshape(k, k, c_out, -1)
    out = taps[0, 0, :, :n].copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                off = i * wp + j
                out += taps[i, j, :, off : off + n]
    out = out.reshape(c_out, b, hp, wp)[:, :, :h, :w].transpose(1, 0, 2, 3)
    return out + bias[None, :, None, None]


def conv2d_backward(
    weight: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    The input gradient is the transposed convolution of ``grad_out``: a
    same-padded correlation with the spatially flipped kernel whose in/out
    channel axes are swapped.
    """
    _check_conv(weight, x)
    c_out, c_in, k, _ = weight.shape
    b, _, h, w = x.shape
    if grad_out.shape != (b, c_out, h, w):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != {(b, c_out, h, w)}")
    flat, n, hp, wp = _pad_flat(x, (k - 1) // 2)
    cols = np.empty((c_in, k * k, n), dtype=flat.dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[:, i * k + j] = flat[:, off : off + n]
    # upstream gradient on the padded grid; the discarded positions stay zero
    gy = np.zeros((c_out, b, hp, wp), dtype=grad_out.dtype)
    gy[:, :, :h, :w] = grad_out.transpose(1, 0, 2, 3)
    gy = gy.reshape(c_out, n)
    grad_w = (gy @ cols.reshape(c_in * k * k, n).T).reshape(weight.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_forward(flipped, np.zeros(c_in, dtype=weight.dtype), grad_out)
    return grad_x, grad_w, grad_b


def prelu_forward(slope: np.ndarray, x: np.ndarray) -> np.ndarray:
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"PReLU slope shape {slope.shape} does not match {x.shape[1]} channels")
    a = slope[None, :, None, None]
    return np.where(x > 0, x, a * x)


def prelu_backward(
    slope: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    if grad_out.shape != x.shape:
        raise ShapeError("PReLU upstream gradient must match the input shape")
    pos = x > 0
    a = slope[None, :, None, None]
    grad_x = np.where(pos, grad_out, a * grad_out)
    grad_a = np.where(pos, 0, grad_out * x).sum(axis=(0, 2, 3))
    return grad_x, grad_a.astype(slope.dtype)


def groupnorm_forward(
    gain: np.ndarray, shift: np.ndarray, x: np.ndarray, num_groups: int, eps: float = 1e-5
) -> tuple[np.ndarray, tuple]:
    """Normalize each (sample, channel group) over its channels and pixels."""
    b, c, h, w = x.shape
    if c % num_groups:
        raise ShapeError(f"{c} channels not divisible into {num_groups} groups")
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError("group-norm gain/shift must have one entry per channel")
    xg = x.reshape(b, num_groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(b, c, h, w)
    y = xhat * gain[None, :, None, None] + shift[None, :, None, None]
    return y, (xhat, inv_std, num_groups)


def groupnorm_backward(
    gain: np.ndarray, cache: tuple, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, num_groups = cache
    b, c, h, w = xhat.shape
    grad_gain = np.sum(grad_out * xhat, axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    gxhat = (grad_out * gain[None, :, None, None]).reshape(b, num_groups, -1)
    xh = xhat.reshape(b, num_groups, -1)
    grad_x = inv_std * (
        gxhat - gxhat.mean(axis=2, keepdims=True) - xh * np.mean(gxhat * xh, axis=2, keepdims=True)
    )
    return grad_x.reshape(b, c, h, w), grad_gain, grad_shift


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass
class Conv2d:
    name: str
    c_in: int
    c_out: int
    kernel_size: int = 3
    zero_init: bool = False

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")

    @property
    def keys(self) -> tuple[str, str]:
        return f"{self.name}.weight", f"{self.name}.bias"

    @property
    def param_keys(self) -> tuple[str, ...]:
        return self.keys

    def num_params(self) -> int:
        return self.kernel_size**2 * self.c_in * self.c_out + self.c_out

    def init(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32) -> None:
        kw, kb = self.keys
        shape = (self.c_out, self.c_in, self.kernel_size, self.kernel_size)
        if self.zero_init:
            store.add(kw, np.zeros(shape, dtype=dtype))
            store.add(kb, np.zeros(self.c_out, dtype=dtype))
            return
        # Kaiming-uniform fan-in scaling (gain for leaky slope 0.25)
        fan_in = self.c_in * self.kernel_size**2
        bound = math.sqrt(6.0 / ((1 + 0.25**2) * fan_in))
        store.add(kw, rng.uniform(-bound, bound, size=shape).astype(dtype))
        bb = 1.0 / math.sqrt(fan_in)
        store.add(kb, rng.uniform(-bb, bb, size=self.c_out).astype(dtype))

    def forward(self, params: ParamStore, x: np.ndarray):
        kw, kb = self.keys
        return conv2d_forward(params[kw], params[kb], x), x

    def backward(self, params: ParamStore, cache, grad_out: np.ndarray):
        kw, kb = self.keys
        gx, gw, gb = conv2d_backward(params[kw], cache, grad_out)
        return gx, {kw: gw, kb: gb}


@dataclass
class PReLU:
    name: str
    channels: int
    init_slope: float = 0.25

    @property
    def key(self) -> str:
        return f"{self.name}.slope"

    @property
    def param_keys(self) -> tuple[str, ...]:
        return (self.key,)

    def num_params(self) -> int:
        return self.channels

    def init(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32) -> None:
        store.add(self.key, np.full(self.channels, self.init_slope, dtype=dtype))

    def forward(self, params: ParamStore, x: np.ndarray):
        return prelu_forward(params[self.key], x), x

    def backward(self, params: ParamStore, cache, grad_out: np.ndarray):
        gx, ga = prelu_backward(params[self.key], cache, grad_out)
        return gx, {self.key: ga}


@dataclass
class GroupNorm:
    name: str
    channels: int
    num_groups: int = 8
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels % self.num_groups:
            raise ValueError(f"{self.channels} channels not divisible by {self.num_groups} groups")
        if self.eps <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def keys(self) -> tuple[str, str]:
        return f"{self.name}.gain", f"{self.name}.shift"

    @property
    def param_keys(self) -> tuple[str, ...]:
        return self.keys

    def num_params(self) -> int:
        return 2 * self.channels

    def init(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32) -> None:
        kg, ks = self.keys
        store.add(kg, np.ones(self.channels, dtype=dtype))
        store.add(ks, np.zeros(self.channels, dtype=dtype))

    def forward(self, params: ParamStore, x: np.ndarray):
        kg, ks = self.keys
        return groupnorm_forward(params[kg], params[ks], x, self.num_groups, self.eps)

    def backward(self, params: ParamStore, cache, grad_out: np.ndarray):
        kg, ks = self.keys
        gx, gg, gs = groupnorm_backward(params[kg], cache, grad_out)
        return gx, {kg: gg, ks: gs}


@dataclass
class Sequential:
    """A chain of layers run front to back."""

    layers: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.layers)

    @property
    def param_keys(self) -> tuple[str, ...]:
        return tuple(k for layer in self.layers for k in layer.param_keys)

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def init(self, store: ParamStore, rng: np.random.Generator, dtype=np.float32) -> None:
        for layer in self.layers:
            layer.init(store, rng, dtype)

    def forward(self, params: ParamStore, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params: ParamStore, caches, grad_out: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            g, lg = layer.backward(params, cache, g)
            grads.update(lg)
        return g, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, **hyper) -> "AdamState":
        return cls(m=store.zeros_like(), v=store.zeros_like(), **hyper)


def adam_step(store: ParamStore, state: AdamState, grads: dict[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, applied in place to ``store`` and ``state``."""
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {store[name].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in store.items():
        m, v = state.m[name], state.v[name]
        g = grads.get(name)
        m *= state.beta1
        v *= state.beta2
        if g is None:
            continue
        m += (1.0 - state.beta1) * g
        v += (1.0 - state.beta2) * (g * g)
        if state.lr:
            p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Verification helper
# ---------------------------------------------------------------------------


def finite_diff_check(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-6,
    coords: Iterable[int] | None = None,
    floor: float = 1e-5,
) -> float:
    """Maximum relative error between ``fun``'s analytic gradient and central differences.

    ``fun(x)`` returns ``(value, gradient)``. Coordinates whose gradient is
    tiny compared with the largest one are measured against
    ``floor * max|gradient|`` instead of their own magnitude.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    _, analytic = fun(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    scale = max(float(np.abs(analytic).max(initial=0.0)), 1e-300)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    flat = x.ravel()
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp, _ = fun(flat.reshape(x.shape).copy())
        flat[i] = old - h
        fm, _ = fun(flat.reshape(x.shape).copy())
        flat[i] = old
        numeric = (fp - fm) / (2 * h)
        denom = max(abs(analytic[i]), abs(numeric), floor * scale)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
