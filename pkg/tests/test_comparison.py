from __future__ import annotations

import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from slagfib.comparison import (ComparisonError, UndersampledError, bishop_gromov_audit, calibrated_ball_volume,
                                calibrated_sample, calibration_inequality_audit, check_injectivity_bound,
                                check_kahler_injectivity_bound, check_volume_comparison, collapsing_series,
                                euclidean_ball_volume, fiber_period, flat_ball_volume, flat_fiber_sample,
                                injectivity_coefficient, model_ball_volume, monte_carlo_ball_volume, sphere_volume)
from slagfib.flat_model import build_flat_structure, flat_perturbed
from slagfib.forms import TorusForm
from slagfib.lattice import Lattice
from slagfib.solver import GraphSection, solve_section, zero_section

TWO_PI = 2 * math.pi


# ---------------------------------------------------------------------------
# closed forms


def test_sphere_volumes():
    assert sphere_volume(0) == 2.0
    assert sphere_volume(1) == pytest.approx(TWO_PI, rel=1e-15)
    assert sphere_volume(2) == pytest.approx(4 * math.pi, rel=1e-15)
    assert sphere_volume(3) == pytest.approx(2 * math.pi**2, rel=1e-15)
    assert euclidean_ball_volume(3, 2.0) == pytest.approx(4 / 3 * math.pi * 8, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 3.0))
def test_model_volume_closed_forms(r):
    assert model_ball_volume(1, 0.0, r) == pytest.approx(2 * r, abs=1e-15)
    assert model_ball_volume(1, 1.0, r) == pytest.approx(2 * r, abs=1e-15)
    assert model_ball_volume(2, 1.0, r) == pytest.approx(TWO_PI * (1 - math.cos(r)), abs=1e-10)
    assert model_ball_volume(3, 1.0, r) == pytest.approx(math.pi * (2 * r - math.sin(2 * r)), abs=1e-10)


@pytest.mark.parametrize("n,lam,r", [(4, 1.0, 1.3), (3, 4.0, 0.7), (5, 0.5, 2.0)])
def test_model_volume_symbolic_oracle(n, lam, r):
    t = sp.symbols("t", positive=True)
    k = sp.sqrt(sp.Rational(lam).limit_denominator(100))
    exact = sp.integrate((sp.sin(k * t) / k) ** (n - 1), (t, 0, sp.Rational(r).limit_denominator(100)))
    assert model_ball_volume(n, lam, r) == pytest.approx(sphere_volume(n - 1) * float(exact), rel=1e-12)


def test_model_volume_rejects_bad_input():
    with pytest.raises(ComparisonError):
        model_ball_volume(2, 1.0, 3.5)
    with pytest.raises(ComparisonError):
        model_ball_volume(2, -1.0, 1.0)


def _disk_strip_area():
    # area of {x^2 + y^2 <= R^2, |x| <= H}, symbolically, for 0 < H <= R
    x, R, H = sp.symbols("x R H", positive=True)
    return sp.lambdify((R, H), 2 * sp.integrate(2 * sp.sqrt(R**2 - x**2), (x, 0, H)), "math")


DISK_STRIP = _disk_strip_area()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 6.0), st.floats(0.1, 4.0))
def test_flat_product_ball_n1_against_symbolic(L, rho):
    exact = DISK_STRIP(rho, min(L / 2, rho))
    assert flat_ball_volume(Lattice.cubic(1, L), rho) == pytest.approx(exact, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 4.0), st.floats(0.3, 4.0), st.floats(0.1, 3.0))
def test_flat_product_ball_monotone_and_bounded(a, b, rho):
    lat = Lattice(np.diag([a, b]))
    v1 = flat_ball_volume(lat, rho)
    v2 = flat_ball_volume(lat, rho * 1.1)
    assert 0 < v1 < v2
    assert v1 <= euclidean_ball_volume(4, rho) * (1 + 1e-12)
    if rho <= lat.injectivity_radius():
        assert v1 == pytest.approx(euclidean_ball_volume(4, rho), rel=1e-11)


def test_monte_carlo_covers_exact():
    lat = Lattice(np.diag([1.0, 1.5]))
    exact = flat_ball_volume(lat, 1.0)
    est = monte_carlo_ball_volume(lat, 1.0, 200_000, seed=3, threads=2)
    assert abs(est.value - exact) <= est.half_width
    again = monte_carlo_ball_volume(lat, 1.0, 200_000, seed=3, threads=1)
    assert again.value == est.value
    assert flat_ball_volume(Lattice.hexagonal(1.0), 1.0) is None


# ---------------------------------------------------------------------------
# calibrated fibers


def test_flat_fiber_volume_is_covolume():
    lat = Lattice.hexagonal(2.0)
    s = flat_fiber_sample(lat)
    assert s.calibrated_volume == pytest.approx(lat.covolume, rel=1e-14)
    assert fiber_period(lat) == pytest.approx(lat.covolume, rel=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_flat_fiber_balls_are_euclidean(n):
    lat = Lattice.cubic(n, TWO_PI)
    s = flat_fiber_sample(lat)
    for r in (0.5, 1.5, math.pi):
        vol, err = calibrated_ball_volume(s, r)
        assert vol == pytest.approx(euclidean_ball_volume(n, r), rel=1e-12)


def test_ball_radius_regimes():
    lat = Lattice.cubic(2, TWO_PI)
    s = flat_fiber_sample(lat)
    with pytest.raises(UndersampledError):
        calibrated_ball_volume(s, 4.0)
    assert calibrated_ball_volume(s, 10.0)[0] == pytest.approx(lat.covolume)
    with pytest.raises(ComparisonError):
        check_volume_comparison(s, 4.0)


def test_flat_volume_comparison_is_equality():
    s = flat_fiber_sample(Lattice.cubic(2, TWO_PI))
    for r in np.linspace(0.2, math.pi, 5):
        rep = check_volume_comparison(s, r)
        assert rep.holds and abs(rep.margin) <= 1e-10
        # positive curvature models are smaller than the Euclidean ball
        assert check_volume_comparison(s, min(r, 2.0), curvature_bound=0.5).margin >= -1e-12


def test_perturbed_fiber_volume_comparison(pert2, cert2, ctx2):
    sec, _ = solve_section(pert2, np.array([0.3, -0.2]), cert2, context=ctx2)
    sample = calibrated_sample(pert2, sec)
    assert sample.calibrated_volume == pytest.approx(pert2.lattice.covolume, rel=1e-10)
    for r in np.linspace(0.2, math.pi, 5):
        assert check_volume_comparison(sample, r).margin >= -1e-6


def test_uncalibrated_fiber_rejected(pert2):
    sigma = TorusForm.from_function(pert2.lattice, 1, lambda x: np.stack([0.5 * np.sin(x[1]), 0 * x[0]]), 2).without_mean()
    with pytest.raises(ComparisonError):
        calibrated_sample(pert2, GraphSection(np.zeros(2), sigma))


def test_calibration_inequality_on_flat_model():
    s = flat_perturbed(build_flat_structure(3, Lattice.cubic(3, 1.0), 1.0))
    audit = calibration_inequality_audit(s, count=500, seed=2)
    assert audit["max"] <= 1.0 + 1e-12
    assert audit["min"] >= -1.0 - 1e-12


# ---------------------------------------------------------------------------
# injectivity bound


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0, 3.0])
def test_injectivity_equality_n1(s):
    lat = Lattice.cubic(1, s)
    structure = flat_perturbed(build_flat_structure(1, lat, 1.0))
    rep = check_injectivity_bound(structure, GraphSection(np.zeros(1), zero_section(lat, 2)))
    assert rep.hypothesis_ok and rep.holds and rep.equality
    assert rep.lhs == pytest.approx(s / 2, abs=1e-12)
    assert rep.rhs == pytest.approx(0.5 * s, abs=1e-12)


@pytest.mark.parametrize("s", [0.5, 1.0, 2.0])
def test_injectivity_ratio_two_n2(s):
    lat = Lattice.cubic(2, s)
    structure = flat_perturbed(build_flat_structure(2, lat, 1.0))
    rep = check_injectivity_bound(structure, GraphSection(np.zeros(2), zero_section(lat, 2)))
    assert rep.holds and not rep.equality
    assert rep.margin_ratio == pytest.approx(2.0, abs=1e-9)


def test_injectivity_coefficients():
    assert injectivity_coefficient(1) == pytest.approx(0.5)
    assert injectivity_coefficient(2) == pytest.approx(0.5)
    assert injectivity_coefficient(3) == pytest.approx(3 * math.pi**2 / (4 * 4 * math.pi))


def test_kahler_subtorus():
    s = 1.5
    basis = s * np.eye(4)
    sub = s * np.array([[1, 0], [0, 0], [0, 1], [0, 0]], dtype=float)  # the z_1 line
    rep = check_kahler_injectivity_bound(basis, sub)
    assert rep.complex_dimension == 1
    assert rep.kahler_volume == pytest.approx(s * s)
    assert rep.riemannian_volume == pytest.approx(s * s)
    assert rep.real_dimension_report.holds
    assert rep.real_dimension_report.margin_ratio == pytest.approx(2.0)
    with pytest.raises(ComparisonError):
        check_kahler_injectivity_bound(basis, s * np.array([[1, 0], [0, 1], [0, 0], [0, 0]], dtype=float))


# ---------------------------------------------------------------------------
# collapsing


@pytest.mark.parametrize("n", [1, 2])
def test_collapsing_series(n):
    lat = Lattice.cubic(n, 1.0)
    table = collapsing_series(lat, [1.0, 0.5, 0.25, 0.125], samples=200_000, seed=1)
    assert table.monotone and table.integrals_exact and table.mc_agrees
    assert table.cauchy_ok
    assert table.rows[-1]["ratio"] == pytest.approx(table.limit_ratio, rel=0.05)
    csv_text = table.to_csv()
    assert csv_text.splitlines()[0].startswith("s,integral")
    with pytest.raises(ComparisonError):
        collapsing_series(lat, [0.5, 1.0])


def test_bishop_gromov_flat():
    audit = bishop_gromov_audit(Lattice.cubic(2, 1.0), np.linspace(0.1, 3.0, 8))
    assert audit["non_increasing"]
    assert audit["rows"][0]["ratio"] == pytest.approx(euclidean_ball_volume(4, 1.0), rel=1e-10)
