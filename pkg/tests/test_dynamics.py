import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from reflou import dynamics
from reflou.drifts import ConstantDrift, PerturbedLinearDrift
from reflou.dynamics import (Model, ObliqueSolverError, StepConfig, run_paths, simulate,
                             step_penalized, step_reflect_normal, step_reflect_oblique, step_skew)
from reflou.geometry import Ellipsoid, HalfSpace, make_layering
from reflou.oblique import constant_field, zero_field
from reflou.spectral import make_space


@pytest.fixture
def disk():
    return make_space([1.0, 2.0]), Ellipsoid([1.0, 1.0])


# -- single steps -----------------------------------------------------------------

def test_normal_step_half_line_example():
    space = make_space([1.0])
    x, dL = step_reflect_normal(space, HalfSpace([1.0], 0.0), [0.0], [0.3], [0.0], 0.01)
    assert x[0] == pytest.approx(0.0, abs=1e-15)
    assert dL == pytest.approx(0.6)


def test_normal_step_interior_is_free(disk):
    space, body = disk
    x, dL = step_reflect_normal(space, body, [0.1, 0.2], [0.05, -0.1], [0.0, 0.0], 0.01)
    np.testing.assert_allclose(x, [0.15, 0.1])
    assert dL == 0.0


def test_oblique_step_unit_ball_example():
    space = make_space([1.0, 1.0])
    ball = Ellipsoid([1.0, 1.0])
    field = constant_field(2, [1.0])
    x, dL = step_reflect_oblique(space, ball, field, [0.0, 0.0], [1.1, 0.0], [0.0, 0.0], 0.01)
    assert np.linalg.norm(x) == pytest.approx(1.0, abs=1e-10)
    # residual of x = Y + lam * (nu + A^T nu)(x) with lam = dL / 2
    nu = -x
    v = nu + field.matrix(x).T @ nu
    assert np.linalg.norm(x - (np.array([1.1, 0.0]) + 0.5 * dL * v)) <= 1e-10

    # independent oracle: polar angle and multiplier from fsolve
    def eqs(p):
        th, lam = p
        c, s = np.cos(th), np.sin(th)
        return [1.1 + lam * (s - c) - c, lam * (-s - c) - s]

    th, lam = optimize.fsolve(eqs, [0.0, 0.1], xtol=1e-14)
    np.testing.assert_allclose(x, [np.cos(th), np.sin(th)], atol=1e-9)
    assert dL == pytest.approx(2 * lam, abs=1e-9)


def test_oblique_zero_field_matches_normal(disk):
    space, body = disk
    rng = np.random.default_rng(3)
    x = 0.9 * body.project(rng.normal(size=(50, 2)))
    dW = 0.3 * rng.normal(size=(50, 2))
    a, la = step_reflect_oblique(space, body, zero_field(2), x, dW, 0.0, 0.01)
    b, lb = step_reflect_normal(space, body, x, dW, 0.0, 0.01)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)


def test_oblique_step_rejects_unbounded_body():
    space = make_space([1.0, 1.0])
    with pytest.raises(ValueError, match="bounded"):
        step_reflect_oblique(space, HalfSpace([1.0, 0.0]), constant_field(2, [1.0]),
                             [0.0, 0.0], [2.0, 0.0], [0.0, 0.0], 0.01)


def test_oblique_solver_failure_raises():
    space = make_space([1.0, 1.0])
    with pytest.raises(ObliqueSolverError) as info:
        step_reflect_oblique(space, Ellipsoid([1.0, 1.0]), constant_field(2, [5.0]),
                             np.zeros((2, 2)), [[3.0, 0.0], [0.1, 0.0]], 0.0, 0.01)
    np.testing.assert_array_equal(info.value.mask, [True, False])


def test_penalized_step():
    space = make_space([1.0])
    body = Ellipsoid([1.0])
    x = step_penalized(space, body, [0.5], [0.1], [0.0], 0.01, 10.0)
    assert x[0] == pytest.approx(0.6)
    x = step_penalized(space, body, [1.5], [0.0], [0.0], 0.01, 10.0)
    assert x[0] == pytest.approx(1.5 - 0.1 * 0.5)


def test_skew_step_single_crossing_choices():
    space = make_space([1.0])
    lay = make_layering([HalfSpace([1.0], 0.0)], [3 / 7, 1.0])   # p = 0.7
    x, c = step_skew(space, lay, [-0.1], [0.3], [0.0], 0.01, uniforms=[[0.5]])
    assert x[0] == pytest.approx(0.2) and c[0] == 1
    x, c = step_skew(space, lay, [-0.1], [0.3], [0.0], 0.01, uniforms=[[0.8]])
    assert x[0] == pytest.approx(-0.2) and c[0] == 1
    x, c = step_skew(space, lay, [-0.1], [0.05], [0.0], 0.01, uniforms=[[0.0]])
    assert x[0] == pytest.approx(-0.05) and c[0] == 0


def test_skew_step_two_membranes_sequential():
    space = make_space([1.0])
    lay = make_layering([Ellipsoid([0.1]), Ellipsoid([0.2])], [1.0, 1.0, 1.0])
    # outward at both membranes: unchanged
    x, c = step_skew(space, lay, [0.0], [0.5], [0.0], 0.01, uniforms=[[0.0, 0.0]])
    assert x[0] == pytest.approx(0.5)
    np.testing.assert_array_equal(c, [1, 1])
    # outward at 0.1, back inward at 0.2: mirrored to 0.2 - 0.3
    x, c = step_skew(space, lay, [0.0], [0.5], [0.0], 0.01, uniforms=[[0.0, 0.9]])
    assert x[0] == pytest.approx(-0.1)
    np.testing.assert_array_equal(c, [1, 1])
    # inward at 0.1: the mirrored chord runs to -0.3 and leaves [-0.2, 0.2] on the far side
    x, c = step_skew(space, lay, [0.0], [0.5], [0.0], 0.01, uniforms=[[0.9, 0.0]])
    assert x[0] == pytest.approx(-0.3)
    np.testing.assert_array_equal(c, [1, 1])
    # same, but sent back inward at the far side of the outer membrane
    x, c = step_skew(space, lay, [0.0], [0.5], [0.0], 0.01, uniforms=[[0.9, 0.9]])
    assert x[0] == pytest.approx(-0.1)


def test_skew_symmetric_from_membrane_start():
    space = make_space([1.0])
    lay = make_layering([HalfSpace([1.0], 0.0)], [1.0, 1.0])     # p = 1/2
    rng = np.random.default_rng(11)
    n = 200_000
    dW = 0.1 * rng.normal(size=(n, 1))
    x, _ = step_skew(space, lay, np.zeros((n, 1)), dW, 0.0, 0.01, rng=rng)
    frac = np.mean(x[:, 0] > 0)
    assert abs(frac - 0.5) < 4 * np.sqrt(0.25 / n)
    # |x| has the law of |dW| in either case
    np.testing.assert_allclose(np.sort(np.abs(x[:, 0])), np.sort(np.abs(dW[:, 0])))


def test_skew_outer_probability_from_membrane_start():
    space = make_space([1.0])
    lay = make_layering([HalfSpace([1.0], 0.0)], [3 / 7, 1.0])
    rng = np.random.default_rng(12)
    n = 200_000
    x, _ = step_skew(space, lay, np.zeros((n, 1)), 0.1 * rng.normal(size=(n, 1)), 0.0, 0.01, rng=rng)
    assert abs(np.mean(x[:, 0] > 0) - 0.7) < 4 * np.sqrt(0.21 / n)


# -- config and model validation ---------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(dt=0.0, t_end=1.0),
    dict(dt=2.0, t_end=1.0),
    dict(dt=0.01, t_end=1.0, scheme="bogus"),
    dict(dt=0.01, t_end=1.0, scheme="penalize"),
    dict(dt=0.01, t_end=1.0, scheme="penalize", penalization_strength=200.0),
    dict(dt=0.01, t_end=1.0, record_stride=0),
    dict(dt=0.01, t_end=1.0, burn_in=1.0),
    dict(dt=0.01, t_end=1.0, normal_norm="L2"),
    dict(dt=0.01, t_end=1.0, lt_band=-1.0),
])
def test_step_config_rejects(kw):
    with pytest.raises(ValueError):
        StepConfig(**kw)


def test_step_config_defaults():
    c = StepConfig(dt=1e-4, t_end=1.0, burn_in=0.25)
    assert c.n_steps == 10_000 and c.burn_steps == 2500
    assert c.band == pytest.approx(0.1)


def test_model_validation(disk):
    space, body = disk
    with pytest.raises(ValueError, match="bounded"):
        Model(space, "oblique", body=HalfSpace([1.0, 0.0]), field=constant_field(2, [1.0]))
    with pytest.raises(ValueError):
        Model(space, "normal")
    with pytest.raises(ValueError):
        Model(space, "skew")
    with pytest.raises(ValueError):
        Model(space, "sideways", body=body)
    m = Model(space, "oblique", body=body, field=constant_field(2, [1.0]))
    assert m.drift.name != "none"
    assert m.boundary_ids == ["boundary"]


# -- paths ---------------------------------------------------------------------------

def test_noiseless_free_paths_decay_exponentially():
    space = make_space([0.5, 2.0])
    cfg = StepConfig(dt=1e-4, t_end=1.0, record_stride=1000)
    b = run_paths(Model(space, "free"), cfg, 0, [0], start=[1.0, 1.0], noise_scale=0.0)
    steps = np.round(b.times / cfg.dt)[:, None]
    np.testing.assert_allclose(b.states[0], (1 - space.eigenvalues * cfg.dt) ** steps, rtol=1e-12)
    exact = np.exp(-np.outer(b.times, space.eigenvalues))
    np.testing.assert_allclose(b.states[0], exact, rtol=3e-4)


def test_noiseless_interior_normal_matches_free(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=1.0, record_stride=100)
    a = run_paths(Model(space, "normal", body=body), cfg, 0, [0], start=[0.5, 0.5], noise_scale=0.0)
    b = run_paths(Model(space, "free"), cfg, 0, [0], start=[0.5, 0.5], noise_scale=0.0)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.local_total["boundary"][0] == 0.0


def test_exact_free_step_is_stationary():
    space = make_space([1.0])
    cfg = StepConfig(dt=0.5, t_end=5.0, record_stride=10, exact_free=True)
    b = run_paths(Model(space, "free"), cfg, 4, np.arange(4000))
    assert abs(np.var(b.final) - 0.5) < 0.05


def test_normal_paths_skorokhod_identity(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.5, record_stride=1)
    b = run_paths(Model(space, "normal", body=body), cfg, 5, np.arange(20))
    assert np.all(body.level(b.states.reshape(-1, 2)) <= 1 + 1e-9)
    assert np.all(b.eq12_violation == 0)
    dL = b.local_time["boundary"]
    assert np.all(dL >= 0) and dL.sum() > 0
    x0, x1 = b.states[:, :-1], b.states[:, 1:]
    g = 2 * x1 / body.semiaxes ** 2
    nu = -g / np.linalg.norm(g, axis=-1, keepdims=True)
    resid = x1 - x0 + space.eigenvalues * x0 * cfg.dt - 0.5 * dL[..., None] * nu - b.wiener
    assert np.abs(resid).max() < 1e-12


def test_oblique_paths_stay_in_body(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.3, record_stride=1)
    b = run_paths(Model(space, "oblique", body=body, field=constant_field(2, [1.0])), cfg, 6,
                  np.arange(10))
    assert np.all(body.level(b.states.reshape(-1, 2)) <= 1 + 1e-9)
    assert np.all(b.eq12_violation == 0)
    assert b.local_total["boundary"].sum() > 0


def test_oblique_halving_fallback(disk, monkeypatch):
    space, body = disk
    real = dynamics._oblique_batch

    def fussy(bd, field, y, *a, **k):
        out, dL, failed = real(bd, field, y, *a, **k)
        return out, dL, failed | (bd._level(y) > 1.05)

    monkeypatch.setattr(dynamics, "_oblique_batch", fussy)
    cfg = StepConfig(dt=2e-3, t_end=0.5, record_stride=1)
    b = run_paths(Model(space, "oblique", body=body, field=constant_field(2, [1.0])), cfg, 7,
                  np.arange(10), start=[0.9, 0.0])
    assert b.halvings.sum() > 0
    assert np.all(body.level(b.states.reshape(-1, 2)) <= 1 + 1e-9)


def test_skew_paths_count_crossings():
    space = make_space([2.0])
    lay = make_layering([HalfSpace([1.0], 0.0)], [3 / 7, 1.0])
    cfg = StepConfig(dt=1e-3, t_end=1.0, record_stride=100)
    b = run_paths(Model(space, "skew", layering=lay), cfg, 8, np.arange(20), start=[0.0])
    assert b.crossings["membrane_0"].sum() > 0
    assert b.local_total["membrane_0"].sum() > 0
    assert b.multi_crossings.sum() == 0


def test_qv_bookkeeping_matches_brackets(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=1.0, record_stride=1000)
    b = run_paths(Model(space, "normal", body=body), cfg, 9, np.arange(200), track_qv=True,
                  record=False)
    mean = b.qv.mean(axis=0)
    np.testing.assert_allclose(mean, np.eye(2), atol=0.02)


def test_girsanov_terms_accumulated(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.5, record_stride=500)
    m = Model(space, "normal", body=body, target=ConstantDrift([0.5, 0.0]))
    b = run_paths(m, cfg, 10, np.arange(5))
    np.testing.assert_allclose(b.girsanov_qv, 0.25 * 0.5)
    assert np.all(np.isfinite(b.girsanov_z))


def test_h1star_normalisation_rescales_local_time():
    space = make_space([1.0], [3.0])
    body = Ellipsoid([0.5])
    m = Model(space, "normal", body=body)
    a = run_paths(m, StepConfig(dt=1e-3, t_end=0.5), 11, np.arange(5), start=[0.0])
    b = run_paths(m, StepConfig(dt=1e-3, t_end=0.5, normal_norm="H1star"), 11, np.arange(5),
                  start=[0.0])
    np.testing.assert_allclose(b.local_total["boundary"],
                               a.local_total["boundary"] * space.h1star_norm(np.array([[1.0]]))[0])


# -- determinism -------------------------------------------------------------------------

def test_same_seed_same_paths(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.2, record_stride=10)
    m = Model(space, "oblique", body=body, field=constant_field(2, [1.0]))
    a = simulate(m, cfg, 42, 6)
    b = simulate(m, cfg, 42, 6)
    c = simulate(m, cfg, 43, 6)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_paths_independent_of_batching(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.2, record_stride=10)
    m = Model(space, "normal", body=body, drift=PerturbedLinearDrift(2, radius=1.0))
    full = run_paths(m, cfg, 1, np.arange(8))
    part = run_paths(m, cfg, 1, [5, 2])
    np.testing.assert_array_equal(full.states[[5, 2]], part.states)


def test_workers_do_not_change_results(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.1, record_stride=10)
    lay = make_layering([Ellipsoid([0.5, 0.5]), body], [1.0, 2.0, 2.0], space=space)
    for m in (Model(space, "normal", body=body), Model(space, "skew", layering=lay)):
        a = simulate(m, cfg, 3, 6, workers=1)
        b = simulate(m, cfg, 3, 6, workers=2)
        np.testing.assert_array_equal(a.states, b.states)
        for k in a.local_total:
            np.testing.assert_array_equal(a.local_total[k], b.local_total[k])


@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
def test_normal_step_admissible_and_nonnegative(seed, scale):
    space = make_space([1.0, 2.0])
    body = Ellipsoid([1.0, 0.5])
    rng = np.random.default_rng(seed)
    x = body.project(rng.normal(size=(16, 2)))
    p, dL = step_reflect_normal(space, body, x, scale * rng.normal(size=(16, 2)), 0.0, 0.01)
    assert np.all(body.level(p) <= 1 + 1e-9)
    assert np.all(dL >= 0)
    inside = body.level(p) < 1 - 1e-9
    assert np.all(dL[inside] == 0)
