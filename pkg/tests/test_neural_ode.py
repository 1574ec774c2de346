import math
import tracemalloc

import numpy as np
import pytest

from clpd.errors import ConfigurationError, DivergenceError, ShapeError
from clpd.neural_ode import (
    OdeDynamics,
    SolverConfig,
    ode_backward_adjoint,
    ode_backward_direct,
    ode_forward,
)
from clpd.nn_core import Conv2d, ParamStore, PReLU, Sequential, finite_diff_check
from clpd.verification import adjoint_vs_direct_error, random_conv_dynamics


def conv_field(channels, weight, bias):
    layers = Sequential([Conv2d("f", channels, channels, 1)])
    params = ParamStore({"f.weight": np.asarray(weight, float).reshape(channels, channels, 1, 1), "f.bias": np.asarray(bias, float)})
    return OdeDynamics(layers, channels), params


class ZeroField:
    """f = 0 with no parameters at all."""

    layers = Sequential([])
    channels = 1
    time_conditioning = False

    def __call__(self, params, x, t):
        return np.zeros_like(x), None

    def vjp(self, params, caches, a):
        return np.zeros_like(a), {}


class Scalar:
    """f(x) = x on a (1, 1, 1, 1) state."""

    layers = Sequential([])
    channels = 1
    time_conditioning = False

    def __call__(self, params, x, t):
        return x, None


class BlowUp:
    """Finite until t passes 0.5, then infinite."""

    layers = Sequential([])
    channels = 1
    time_conditioning = False

    def __call__(self, params, x, t):
        return (np.full_like(x, np.inf) if t > 0.5 else x), None


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_zero_dynamics(method, rng):
    x0 = rng.standard_normal((2, 1, 4, 4))
    cfg = SolverConfig(method, 5)
    sol = ode_forward(ZeroField(), None, x0, cfg, store=True)
    np.testing.assert_array_equal(sol.x1, x0)
    g = rng.standard_normal(x0.shape)
    for gx, gp in (
        ode_backward_adjoint(ZeroField(), None, sol.x1, g, cfg),
        ode_backward_direct(ZeroField(), None, sol, g, cfg),
    ):
        np.testing.assert_array_equal(gx, g)
        assert gp == {}


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_zero_weight_conv_field_passes_gradient_through(method, rng):
    dyn, params = conv_field(3, np.zeros((3, 3)), np.zeros(3))
    x0 = rng.standard_normal((1, 3, 4, 4))
    cfg = SolverConfig(method, 3)
    sol = ode_forward(dyn, params, x0, cfg, store=True)
    np.testing.assert_array_equal(sol.x1, x0)
    g = rng.standard_normal(x0.shape)
    np.testing.assert_array_equal(ode_backward_adjoint(dyn, params, sol.x1, g, cfg)[0], g)
    np.testing.assert_array_equal(ode_backward_direct(dyn, params, sol, g, cfg)[0], g)


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_constant_field_is_integrated_exactly(method, rng):
    c = np.array([0.3, -1.2])
    dyn, params = conv_field(2, np.zeros((2, 2)), c)
    x0 = rng.standard_normal((1, 2, 3, 3))
    cfg = SolverConfig(method, 7, t0=0.5, t1=2.0)
    x1 = ode_forward(dyn, params, x0, cfg).x1
    np.testing.assert_allclose(x1, x0 + 1.5 * c[None, :, None, None], rtol=0, atol=1e-13)


def test_rk4_order_on_exponential():
    errors = []
    for k in (2, 4, 8, 16):
        x1 = ode_forward(Scalar(), None, np.ones((1, 1, 1, 1)), SolverConfig("rk4", k)).x1
        errors.append(abs(x1.item() - math.e))
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    assert min(orders) >= 3.5
    assert errors[-1] < 1e-6


def test_euler_is_first_order():
    errors = []
    for k in (16, 32, 64):
        x1 = ode_forward(Scalar(), None, np.ones((1, 1, 1, 1)), SolverConfig("euler", k)).x1
        errors.append(abs(x1.item() - math.e))
    for a, b in zip(errors, errors[1:]):
        assert 0.9 < math.log2(a / b) < 1.1


@pytest.mark.parametrize("theta", [-0.7, 0.4, 1.3])
def test_linear_sensitivities(theta):
    dyn, params = conv_field(1, [[theta]], [0.0])
    x0 = np.full((1, 1, 1, 1), 0.8)
    cfg = SolverConfig("rk4", 32)
    sol = ode_forward(dyn, params, x0, cfg, store=True)
    one = np.ones_like(x0)
    for gx, gp in (
        ode_backward_adjoint(dyn, params, sol.x1, one, cfg),
        ode_backward_direct(dyn, params, sol, one, cfg),
    ):
        assert gx.item() == pytest.approx(math.exp(theta), abs=1e-5)
        assert gp["f.weight"].item() == pytest.approx(0.8 * math.exp(theta), abs=1e-5)


def test_adjoint_matches_direct_f64():
    for seed in range(3):
        assert adjoint_vs_direct_error(seed) < 1e-3


def test_adjoint_matches_direct_f32(rng):
    dyn, params = random_conv_dynamics(4, 0)
    p32 = params.astype(np.float32)
    x0 = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
    g = rng.standard_normal(x0.shape).astype(np.float32)
    cfg = SolverConfig("rk4", 8)
    sol = ode_forward(dyn, p32, x0, cfg, store=True)
    ga, pa = ode_backward_adjoint(dyn, p32, sol.x1, g, cfg)
    gd, pd = ode_backward_direct(dyn, p32, sol, g, cfg)
    a = np.concatenate([ga.ravel()] + [pa[k].ravel() for k in sorted(pa)])
    d = np.concatenate([gd.ravel()] + [pd[k].ravel() for k in sorted(pd)])
    assert np.linalg.norm(a - d) / np.linalg.norm(d) < 1e-2


@pytest.mark.parametrize("method", ["euler", "rk4"])
def test_direct_gradients_match_finite_differences(method, rng):
    dyn, params = random_conv_dynamics(2, 3)
    x0 = rng.standard_normal((1, 2, 5, 5))
    r = rng.standard_normal(x0.shape)
    cfg = SolverConfig(method, 3)

    def loss(p, x):
        return float(np.vdot(r, ode_forward(dyn, p, x, cfg).x1))

    sol = ode_forward(dyn, params, x0, cfg, store=True)
    gx, gp = ode_backward_direct(dyn, params, sol, r, cfg)
    assert finite_diff_check(lambda v: (loss(params, v), gx), x0) < 1e-4
    for name in params.names():

        def wrt(v, name=name):
            p = params.copy()
            p[name] = v
            return loss(p, x0), gp[name]

        assert finite_diff_check(wrt, params[name]) < 1e-4


def test_single_euler_step_is_a_residual_block(rng):
    dyn, params = random_conv_dynamics(3, 5)
    x0 = rng.standard_normal((2, 3, 6, 6))
    cfg = SolverConfig("euler", 1, t0=0.0, t1=0.25)
    f, caches = dyn(params, x0, 0.0)
    sol = ode_forward(dyn, params, x0, cfg, store=True)
    np.testing.assert_array_equal(sol.x1, x0 + 0.25 * f)
    g = rng.standard_normal(x0.shape)
    jx, jp = dyn.vjp(params, caches, 0.25 * g)
    gx, gp = ode_backward_direct(dyn, params, sol, g, cfg)
    np.testing.assert_allclose(gx, g + jx, atol=1e-14)
    for k in jp:
        np.testing.assert_allclose(gp[k], jp[k], atol=1e-14)


def test_time_conditioning_gradients(rng):
    layers = Sequential([Conv2d("t.c1", 3, 2), PReLU("t.a", 2), Conv2d("t.c2", 2, 2)])
    dyn = OdeDynamics(layers, 2, time_conditioning=True)
    params = ParamStore()
    dyn.init(params, rng, np.float64)
    x0 = rng.standard_normal((1, 2, 6, 6))
    g = rng.standard_normal(x0.shape)
    gaps = []
    for k in (8, 16):
        cfg = SolverConfig("rk4", k)
        sol = ode_forward(dyn, params, x0, cfg, store=True)
        ga, _ = ode_backward_adjoint(dyn, params, sol.x1, g, cfg)
        gd, _ = ode_backward_direct(dyn, params, sol, g, cfg)
        gaps.append(np.linalg.norm(ga - gd) / np.linalg.norm(gd))
    # the adjoint solve is only consistent, so its gap to exact backprop shrinks with h
    assert gaps[1] < 1e-3 and gaps[1] < gaps[0] / 8
    # the appended time channel changes the result relative to t fixed at zero
    f0, _ = dyn(params, x0, 0.0)
    f1, _ = dyn(params, x0, 1.0)
    assert not np.allclose(f0, f1)


def test_direct_requires_stored_states(rng):
    dyn, params = random_conv_dynamics(2, 0)
    x0 = rng.standard_normal((1, 2, 4, 4))
    cfg = SolverConfig("rk4", 2)
    sol = ode_forward(dyn, params, x0, cfg)
    assert sol.num_stored == 0
    with pytest.raises(RuntimeError):
        ode_backward_direct(dyn, params, sol, x0, cfg)


def test_divergence_reports_step():
    with pytest.raises(DivergenceError) as info:
        with np.errstate(invalid="ignore", over="ignore"):
            ode_forward(BlowUp(), None, np.ones((1, 1, 1, 1)), SolverConfig("euler", 4))
    assert info.value.index == 4  # the fourth step is the first to start past t = 0.5


def test_shape_and_config_errors(rng):
    dyn, params = random_conv_dynamics(2, 0)
    with pytest.raises(ShapeError):
        ode_forward(dyn, params, np.zeros((1, 3, 4, 4)), SolverConfig())
    with pytest.raises(ShapeError):
        ode_backward_adjoint(dyn, params, np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 5)), SolverConfig())
    with pytest.raises(ConfigurationError):
        SolverConfig("midpoint")
    with pytest.raises(ConfigurationError):
        SolverConfig(num_steps=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(t0=1.0, t1=1.0)


def _peak_bytes(fn):
    tracemalloc.start()
    tracemalloc.reset_peak()
    fn()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return peak


def test_memory_adjoint_independent_of_steps(rng):
    dyn, params = random_conv_dynamics(4, 0)
    x0 = rng.standard_normal((1, 4, 16, 16))
    g = rng.standard_normal(x0.shape)

    def adjoint(k):
        cfg = SolverConfig("rk4", k)
        x1 = ode_forward(dyn, params, x0, cfg).x1
        return lambda: ode_backward_adjoint(dyn, params, x1, g, cfg)

    def direct(k):
        cfg = SolverConfig("rk4", k)

        def run():
            sol = ode_forward(dyn, params, x0, cfg, store=True)
            ode_backward_direct(dyn, params, sol, g, cfg)

        return run

    a4, a32 = _peak_bytes(adjoint(4)), _peak_bytes(adjoint(32))
    d4, d32 = _peak_bytes(direct(4)), _peak_bytes(direct(32))
    assert a32 < 1.2 * a4
    assert d32 > 4 * d4
