import csv
import io
import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import integrate

from reflou import gaussian
from reflou.dynamics import Model, StepConfig, simulate
from reflou.geometry import Ellipsoid, HalfSpace, make_layering
from reflou.oblique import constant_field
from reflou.spectral import make_space
from reflou.verify import (CSV_FIELDS, ScalarFunction, boundary_mass, compare_occupation,
                           contraction_check, ibp_normal, ibp_oblique, ibp_skew, make_report,
                           occupation_check, qv_check, ratio_check, reference_mass, reports_to_csv,
                           revuz_rate)

VAR = (0.5, 0.25)   # covariance of mu for alpha = (1, 2)


def _density(x, y):
    return gaussian.pdf(x, VAR[0]) * gaussian.pdf(y, VAR[1])


def _disk_volume(f):
    val, _ = integrate.dblquad(lambda r, t: f(r * math.cos(t), r * math.sin(t))
                               * _density(r * math.cos(t), r * math.sin(t)) * r,
                               0, 2 * math.pi, 0, 1, epsabs=1e-12, epsrel=1e-10)
    return val


def _circle(f):
    # f(x, y, eta) over the unit circle with Gaussian-weighted arc length
    val, _ = integrate.quad(lambda t: f(math.cos(t), math.sin(t), (math.cos(t), math.sin(t)))
                            * _density(math.cos(t), math.sin(t)), 0, 2 * math.pi,
                            epsabs=1e-13, epsrel=1e-11)
    return val


@pytest.fixture(scope="module")
def disk():
    return make_space([1.0, 2.0]), Ellipsoid([1.0, 1.0])


# -- reports ------------------------------------------------------------------------

def test_make_report_equality():
    r = make_report("a", 1.0, 1.2, 0.1)
    assert r.z_score == pytest.approx(-2.0) and r.passed
    r = make_report("b", 1.0, 1.5, 0.1)
    assert not r.passed
    r = make_report("c", 1.0, 1.5, 0.1, tolerance=0.3)
    assert r.passed


def test_make_report_one_sided():
    assert make_report("le", 0.5, 1.0, 0.0, relation="le", threshold=0.0).passed
    r = make_report("le", 1.5, 1.0, 0.0, relation="le", threshold=0.0)
    assert not r.passed
    assert make_report("le", 0.2, 1.0, 0.1, relation="le").z_score == 0.0
    with pytest.raises(ValueError):
        make_report("x", 0, 0, 1, relation="ge")


def test_make_report_floors_zero_se():
    r = make_report("exact", 0.0, 0.0, 0.0)
    assert r.std_error == pytest.approx(1e-12) and r.passed and r.z_score == 0.0


def test_csv_layout_roundtrips():
    reports = [make_report("x[1]", 1 / 3, 0.33, 0.01), make_report("y", 1.0, 5.0, 0.1, tolerance=0.5)]
    text = reports_to_csv(reports, comments=["hello"])
    lines = text.splitlines()
    assert lines[0] == "# hello"
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
    assert tuple(rows[0]) == CSV_FIELDS
    assert float(rows[0]["lhs"]) == 1 / 3
    assert rows[0]["pass"] == "true" and rows[1]["pass"] == "false"
    assert float(rows[1]["tolerance"]) == 0.5


def test_scalar_function_gradients(rng):
    x = rng.normal(size=(5, 3))
    g = ScalarFunction("sine", 3, 2)
    h = 1e-6
    e = np.zeros(3)
    e[2] = h
    np.testing.assert_allclose(g.grad(x)[:, 2], (g(x + e) - g(x - e)) / (2 * h), atol=1e-8)
    assert np.all(ScalarFunction("one", 3).grad(x) == 0)
    with pytest.raises(ValueError):
        ScalarFunction("cube", 3)
    with pytest.raises(ValueError):
        ScalarFunction("coord", 3, 3)


# -- integration by parts against quadrature ----------------------------------------

def test_quadrature_oracles_satisfy_identity():
    # the identities hold exactly for the quadrature values used below
    lhs = -0.5 * _disk_volume(lambda x, y: 1.0)
    vol = -_disk_volume(lambda x, y: x * x)
    surf = -0.5 * _circle(lambda x, y, n: x * n[0])
    assert lhs == pytest.approx(vol + surf, abs=1e-9)
    lhs = 0.5 * _disk_volume(lambda x, y: 1.0)
    vol = _disk_volume(lambda x, y: 2 * y * y)
    surf = 0.5 * _circle(lambda x, y, n: y * n[1])
    assert lhs == pytest.approx(vol + surf, abs=1e-9)


def test_ibp_normal_sides_match_quadrature(disk):
    space, body = disk
    r = ibp_normal(space, body, [1.0, 0.0], ScalarFunction("coord", 2, 0), seed=1,
                   n_volume=400_000, n_surface=40_000)
    lhs = -0.5 * _disk_volume(lambda x, y: 1.0)
    vol = -_disk_volume(lambda x, y: x * x)
    surf = -0.5 * _circle(lambda x, y, n: x * n[0])
    assert abs(r.lhs - lhs) < 4 * r.std_error
    assert abs(r.details["volume_term"] - vol) < 4 * r.std_error
    assert abs(r.details["surface_term"] - surf) < 4 * r.std_error
    assert r.passed


def test_ibp_oblique_sides_match_quadrature(disk):
    space, body = disk
    r = ibp_oblique(space, body, constant_field(2, [1.0]), [1.0, 0.0], ScalarFunction("coord", 2, 1),
                    seed=2, n_volume=400_000, n_surface=40_000)
    lhs = 0.5 * _disk_volume(lambda x, y: 1.0)
    vol = _disk_volume(lambda x, y: 2 * y * y)
    surf = 0.5 * _circle(lambda x, y, n: y * n[1])
    assert abs(r.lhs - lhs) < 4 * r.std_error
    assert abs(r.details["volume_term"] - vol) < 4 * r.std_error
    assert abs(r.details["surface_term"] - surf) < 4 * r.std_error
    assert r.passed


def test_ibp_skew_half_line_cancellation():
    space = make_space([1.0])
    lay = make_layering([HalfSpace([1.0], 0.0)], [3 / 7, 1.0])
    r = ibp_skew(space, lay, [1.0], ScalarFunction("one", 1), seed=3, n_volume=400_000,
                 n_surface=40_000)
    half = math.sqrt(0.5) / math.sqrt(2 * math.pi)
    assert r.lhs == 0.0
    assert abs(r.details["volume_term"] + 4 / 7 * half) < 4 * r.std_error
    assert abs(r.details["surface_term"] - 4 / 7 * half) < 4 * r.std_error
    assert r.passed


def test_ibp_whole_space_has_no_surface_term():
    space = make_space([1.0, 3.0])
    r = ibp_normal(space, None, [0.0, 1.0], ScalarFunction("sine", 2, 1), seed=4, n_volume=200_000)
    assert r.details["surface_term"] == 0.0 and r.passed


def test_ibp_detects_a_wrong_identity(disk):
    space, _ = disk
    # dropping the boundary term must break the identity
    r = ibp_normal(space, Ellipsoid([0.3, 0.3]), [1.0, 0.0], ScalarFunction("coord", 2, 0), seed=5,
                   n_volume=200_000, n_surface=20_000)
    assert r.passed
    bad = make_report("bad", r.lhs, r.details["volume_term"], r.std_error)
    assert not bad.passed


# -- masses --------------------------------------------------------------------------

def test_boundary_mass_closed_forms(disk):
    space, body = disk
    m, se = boundary_mass(body, space)
    assert se == 0.0
    assert m == pytest.approx(_circle(lambda x, y, n: 1.0), rel=1e-9)
    sp1 = make_space([0.5])
    # 2 * pdf(1) for the unit-variance line
    assert boundary_mass(Ellipsoid([1.0]), sp1)[0] == pytest.approx(0.4839414490, abs=1e-9)
    assert boundary_mass(HalfSpace([1.0], 0.0), make_space([1.0]))[0] == pytest.approx(1 / math.sqrt(math.pi))


def test_boundary_mass_sampled_sphere(rng):
    # unit sphere under the isotropic law with variance 1/2: 4 pi pi^{-3/2} e^{-1}
    space = make_space([1.0, 1.0, 1.0])
    exact = 4 * math.pi * math.pi ** -1.5 * math.exp(-1.0)
    est, se = boundary_mass(Ellipsoid([1.0, 1.0, 1.0]), space, rng, n_hits=40_000)
    assert se > 0
    assert abs(est - exact) < 4 * se + 0.01 * exact


def test_reference_mass_closed_forms(disk):
    space, body = disk
    m = Model(make_space([0.5]), "normal", body=Ellipsoid([1.0]))
    assert reference_mass(m)[0] == pytest.approx(gaussian.interval_mass(-1, 1, 1.0))
    lay = make_layering([HalfSpace([1.0], 0.0)], [3 / 7, 1.0])
    assert reference_mass(Model(make_space([2.0]), "skew", layering=lay))[0] == pytest.approx(5 / 7)
    est, se = reference_mass(Model(space, "normal", body=body), np.random.default_rng(0), 200_000)
    assert abs(est - _disk_volume(lambda x, y: 1.0)) < 4 * se


# -- path checks ------------------------------------------------------------------------

def test_revuz_rate_small_run():
    space = make_space([0.5])
    model = Model(space, "normal", body=Ellipsoid([1.0]))
    cfg = StepConfig(dt=1e-3, t_end=10.0, record_stride=500)
    reps = revuz_rate(model, cfg, 1, 100)
    main = reps[0]
    assert main.rhs == pytest.approx(0.4839414490, abs=1e-9)
    assert main.details["target_rate"] == pytest.approx(0.70887, abs=1e-5)
    assert main.details["mass"] == pytest.approx(gaussian.interval_mass(-1, 1, 1.0))
    assert abs(main.lhs - main.rhs) / main.rhs < 0.1
    assert [r.name for r in reps[1:]] == ["revuz_window[boundary,t=0.5]", "revuz_window[boundary,t=1]",
                                          "revuz_window[boundary,t=2]"]


def test_qv_check_on_simulated_batch(disk):
    space, body = disk
    b = simulate(Model(space, "normal", body=body), StepConfig(dt=1e-3, t_end=1.0, record_stride=1000),
                 0, 200, track_qv=True, record=False)
    r = qv_check(b, [2.0, 0.0], tolerance=5e-3 * 2)
    assert r.rhs == 4.0 and r.passed
    with pytest.raises(ValueError):
        qv_check(simulate(Model(space, "normal", body=body), StepConfig(dt=0.1, t_end=0.2), 0, 2), [1, 0])


def _fake(occ, T=1.0):
    return SimpleNamespace(occupation={"f": np.asarray(occ, dtype=float) * T}, occupation_time=T)


def test_occupation_and_ratio_checks():
    occ = np.array([[1.0, 2.0], [3.0, 2.0], [2.0, 2.0]])
    r = occupation_check(_fake(occ, 4.0), "f", 2.0, component=0)
    assert r.lhs == pytest.approx(2.0) and r.std_error == pytest.approx(1 / math.sqrt(3))
    r = ratio_check(_fake(occ), "f", 0, 1, 1.0)
    assert r.lhs == pytest.approx(1.0)
    # delta-method SE: sd(a - r b) / sqrt(n) / mean(b)
    assert r.std_error == pytest.approx(1 / math.sqrt(3) / 2)
    c = compare_occupation(_fake(occ), _fake(occ), "f", 1)
    assert c.lhs == c.rhs and c.passed


def test_contraction_without_drift(disk):
    space, body = disk
    cfg = StepConfig(dt=1e-3, t_end=0.5, record_stride=10)
    r = contraction_check(Model(space, "normal", body=body), cfg, 3, 50, 0.0)
    assert r.passed and r.lhs <= 1.0
