"""Acceptance suite: twelve numbered criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` (the lines are also echoed
without ``-s`` through the terminal writer).
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from slagfib.comparison import (calibrated_sample, check_injectivity_bound, check_volume_comparison,
                                collapsing_series, flat_fiber_sample, model_ball_volume)
from slagfib.fibration import check_equivariance
from slagfib.flat_model import GroupAction, build_flat_structure, flat_perturbed, generate_structure
from slagfib.lattice import Lattice
from slagfib.solver import (GraphSection, Linearization, SolverContext, c1_norm, measure_contraction,
                            perturbed_invert, random_section, residual_direct, residual_formula, solution_derivative,
                            solve_section, zero_section)

TWO_PI = 2.0 * math.pi
L2 = Lattice.cubic(2, TWO_PI)


@pytest.fixture
def report(request):
    writer = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, title: str, ok: bool, detail: str):
        line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        if writer is not None:
            writer.write_line("")
            writer.write_line(line)
        else:
            print(line)
        assert ok, line

    return emit


def square_grid(count=9, half=1.0):
    axis = np.linspace(-half, half, count)
    return [np.array([a, b]) for a in axis for b in axis]


# ---------------------------------------------------------------------------


def test_criterion_01_residual_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for k in range(10):
        eps = float(rng.uniform(1e-4, 1e-2))
        s = generate_structure(2, L2, 1.0, eps, 1000 + k)
        for _ in range(5):
            sigma = random_section(L2, 8, rng)
            sigma = (float(rng.uniform(0.0, 0.2)) / c1_norm(sigma)) * sigma
            y = rng.uniform(-1.0, 1.0, size=2)
            worst = max(worst, (residual_direct(s, y, sigma) - residual_formula(s, y, sigma)).norm())
    seconds = time.perf_counter() - start
    report(1, "residual identity", worst <= 1e-8 and seconds < 60,
           f"max surrogate difference {worst:.2e} over 50 inputs (<= 1e-8), {seconds:.1f} s (< 60 s)")


def test_criterion_02_zero_perturbation(report, flat2, flat_cert, flat_ctx):
    worst_res = 0.0
    worst_sigma = 0.0
    max_iter = 0
    for y in square_grid():
        worst_res = max(worst_res, flat_ctx.residual_norm(residual_direct(flat2, y, flat_ctx.zero())))
        sec, log = solve_section(flat2, y, flat_cert, context=flat_ctx)
        worst_sigma = max(worst_sigma, sec.sigma.max_coeff())
        max_iter = max(max_iter, log.iterations)
    ok = worst_res <= 1e-12 and worst_sigma == 0.0 and max_iter == 0
    report(2, "zero-perturbation exactness", ok,
           f"max |F(y,0)| {worst_res:.1e}, max |sigma| {worst_sigma:.1e}, max iterations {max_iter} on 81 points")


def test_criterion_03_linearization(report, pert2):
    rng = np.random.default_rng(303)
    h = 1e-4
    worst_rel = 0.0
    ratios = []
    for _ in range(20):
        y = rng.uniform(-1.0, 1.0, size=2)
        sdot = random_section(L2, 8, rng)
        sdot = (1.0 / c1_norm(sdot)) * sdot
        ydot = rng.standard_normal(2)
        ydot /= np.linalg.norm(ydot)
        # relative error at a generic point of the sigma ball
        sigma = random_section(L2, 8, rng)
        sigma = (0.1 / c1_norm(sigma)) * sigma
        lin = Linearization(pert2, y, sigma)
        for exact, f in ((lin.sigma_direction(sdot), lambda t: residual_direct(pert2, y, sigma + t * sdot)),
                         (lin.y_direction(ydot), lambda t: residual_direct(pert2, y + t * ydot, sigma))):
            fd = (1 / (2 * h)) * (f(h) - f(-h))
            worst_rel = max(worst_rel, (fd - exact).l2_norm() / exact.l2_norm())
        # second-order check on the zero section, where the evaluation roundoff is O(h)
        zero = zero_section(L2, 8)
        lin0 = Linearization(pert2, y, zero)
        for exact, f in ((lin0.sigma_direction(sdot), lambda t: residual_direct(pert2, y, zero + t * sdot)),
                         (lin0.y_direction(ydot), lambda t: residual_direct(pert2, y + t * ydot, zero))):
            e1 = ((1 / (2 * h)) * (f(h) - f(-h)) - exact).l2_norm()
            e2 = ((1 / h) * (f(h / 2) - f(-h / 2)) - exact).l2_norm()
            ratios.append(e1 / e2)
    ok = worst_rel <= 1e-6 and all(abs(r - 4.0) <= 0.5 for r in ratios)
    report(3, "linearization vs central differences", ok,
           f"max relative error {worst_rel:.2e} (<= 1e-6); halving ratios in "
           f"[{min(ratios):.3f}, {max(ratios):.3f}] (4 +- 0.5), 20 probes x 2 directions")


def test_criterion_04_neumann(report, ctx2):
    rng = np.random.default_rng(404)
    structures = {eps: generate_structure(2, L2, 1.0, eps, 404) for eps in (1e-2, 5e-2, 1e-1)}
    dirac = ctx2.dirac
    probes = ctx2.probes[:16]
    worst_res = 0.0
    worst_norm = 0.0
    worst_q = 0.0
    for k in range(20):
        s = structures[(1e-2, 5e-2, 1e-1)[k % 3]]
        sigma = random_section(L2, 8, rng)
        sigma = (float(rng.uniform(0, 0.2)) / c1_norm(sigma)) * sigma
        lin = Linearization(s, rng.uniform(-1, 1, size=2), sigma, dirac)
        V = lin.perturbation
        q = measure_contraction(dirac, V, probes, ctx2.alpha, ctx2.grid)
        assert q < 0.5
        worst_q = max(worst_q, q)
        target = dirac.apply(random_section(L2, 8, rng))
        x, _ = perturbed_invert(dirac, V, target, contraction=q)
        worst_res = max(worst_res, ctx2.residual_norm(lin.sigma_direction(x) - target))
        for p in probes[:4]:
            t = dirac.apply(p)
            xp, _ = perturbed_invert(dirac, V, t, contraction=q)
            worst_norm = max(worst_norm, ctx2.norm(xp) / ctx2.residual_norm(t))
    ok = worst_res <= 1e-8 and worst_norm <= 2 * dirac.C_S
    report(4, "Neumann inversion", ok,
           f"max ||D^-1 V|| {worst_q:.3f} (< 1/2), apply-after-invert {worst_res:.1e} (<= 1e-8), "
           f"inverse norm {worst_norm:.3f} (<= 2 C_S = {2 * dirac.C_S:.3f})")


def test_criterion_05_certified_solve(report, flip_structure, flip_run):
    start = time.perf_counter()
    cert, ctx, fib = flip_run["cert"], flip_run["ctx"], flip_run["fibration"]
    s = flip_structure

    def newton(sec):
        b, _ = solve_section(s, sec.y, cert, "newton", context=ctx)
        return ctx.norm(b.sigma - sec.sigma)

    with ThreadPoolExecutor(max_workers=4) as pool:
        mode_gap = max(pool.map(newton, fib.sections))
    rng = np.random.default_rng(505)
    unique_gap = 0.0
    for sec in fib.sections[::20]:
        for _ in range(3):
            start_sigma = random_section(L2, 8, rng)
            start_sigma = (float(rng.uniform(0.5, 1.0)) * cert.delta / ctx.norm(start_sigma)) * start_sigma
            other, _ = solve_section(s, sec.y, cert, context=ctx, sigma0=start_sigma)
            unique_gap = max(unique_gap, ctx.norm(other.sigma - sec.sigma))
    seconds = flip_run["certify_seconds"] + flip_run["build_seconds"] + time.perf_counter() - start
    ok = (cert.hypotheses_ok and len(fib.sections) == 81 and fib.max_residual <= 1e-8
          and fib.max_sigma_norm <= cert.delta and mode_gap <= 1e-9 and unique_gap <= 1e-9 and seconds < 600)
    report(5, "certified solve", ok,
           f"hypotheses_ok={cert.hypotheses_ok}, max residual {fib.max_residual:.1e}, max ||sigma|| "
           f"{fib.max_sigma_norm:.2e} (<= {cert.delta}), fixed-slope/Newton gap {mode_gap:.1e}, "
           f"multi-start gap {unique_gap:.1e}, {seconds:.0f} s")


def test_criterion_06_solution_derivative(report, pert2, cert2, ctx2):
    rng = np.random.default_rng(606)
    h = 1e-4
    worst = 0.0
    for _ in range(5):
        y = rng.uniform(-1.0, 1.0, size=2)
        sec, _ = solve_section(pert2, y, cert2, context=ctx2, tol=1e-13)
        cols = solution_derivative(pert2, y, sec.sigma, ctx2, cert2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            p, _ = solve_section(pert2, y + e, cert2, context=ctx2, tol=1e-13)
            m, _ = solve_section(pert2, y - e, cert2, context=ctx2, tol=1e-13)
            worst = max(worst, ctx2.norm((1 / (2 * h)) * (p.sigma - m.sigma) - cols[i]))
    report(6, "solution derivative", worst <= 1e-5,
           f"max ||D sigma - finite difference|| {worst:.2e} (<= 1e-5) at 5 base points")


def test_criterion_07_embedding(report, flip_embedding):
    ok = flip_embedding.injective and flip_embedding.min_jacobian_det >= 0.9
    report(7, "embedding", ok,
           f"min det {flip_embedding.min_jacobian_det:.6f} (>= 0.9), min fiber separation "
           f"{flip_embedding.min_fiber_separation:.4f}, max |d sigma/dy| {flip_embedding.max_dsigma_dy:.2e}")


def test_criterion_08_equivariance(report, flip_fibration):
    defect = check_equivariance(flip_fibration, GroupAction.flip(flip_fibration.structure.lattice))
    report(8, "equivariance", defect <= 1e-9, f"max flip defect {defect:.2e} (<= 1e-9) over 81 fibers")


def test_criterion_09_injectivity(report):
    lines = []
    ok = True
    for s in (0.5, 1.0, 2.0, 3.0):
        lat = Lattice.cubic(1, s)
        st = flat_perturbed(build_flat_structure(1, lat, 1.0))
        rep = check_injectivity_bound(st, GraphSection(np.zeros(1), zero_section(lat, 2)))
        good = rep.hypothesis_ok and rep.holds and abs(rep.lhs - rep.rhs) <= 1e-12
        ok &= good
        lines.append(f"n=1 s={s}: {rep.lhs:.12g} vs {rep.rhs:.12g}")
    for s in (0.5, 1.0, 2.0, 3.0):
        lat = Lattice.cubic(2, s)
        st = flat_perturbed(build_flat_structure(2, lat, 1.0))
        rep = check_injectivity_bound(st, GraphSection(np.zeros(2), zero_section(lat, 2)))
        good = rep.holds and abs(rep.margin_ratio - 2.0) <= 1e-9
        ok &= good
        lines.append(f"n=2 s={s}: ratio {rep.margin_ratio:.12g}")
    report(9, "injectivity bound sharpness", ok, "; ".join(lines))


def test_criterion_10_volume_comparison(report, pert2, cert2, ctx2):
    flat = flat_fiber_sample(L2)
    sec, _ = solve_section(pert2, np.array([0.4, -0.3]), cert2, context=ctx2)
    pert = calibrated_sample(pert2, sec)
    inj = L2.injectivity_radius()
    radii = [f * inj for f in (0.2, 0.4, 0.6, 0.8, 1.0)]
    margins = [check_volume_comparison(sample, r).margin for sample in (flat, pert) for r in radii]
    closed = 0.0
    for r in np.linspace(0.0, math.pi, 13):
        closed = max(closed, abs(model_ball_volume(1, 0.0, r) - 2 * r),
                     abs(model_ball_volume(2, 1.0, r) - TWO_PI * (1 - math.cos(r))))
    ok = min(margins) >= -1e-6 and closed <= 1e-10
    report(10, "volume comparison", ok,
           f"min margin {min(margins):.2e} (>= -1e-6) over 2 fibers x 5 radii, closed-form error {closed:.1e}")


def test_criterion_11_collapsing(report):
    lines = []
    ok = True
    for n in (1, 2):
        table = collapsing_series(Lattice.cubic(n, 1.0), [1.0, 0.5, 0.25, 0.125], samples=10**6, seed=11,
                                  threads=4)
        ci = all(r["exact_volume"] is None or abs(r["mc_volume"] - r["exact_volume"]) <= r["mc_half_width"]
                 for r in table.rows)
        good = table.monotone and table.cauchy <= 0.02 and table.integrals_exact and ci
        ok &= good
        lines.append(f"n={n}: volumes {[round(r['volume'], 5) for r in table.rows]}, Cauchy {table.cauchy:.4f}, "
                     f"integrals exact {table.integrals_exact}, MC within 99% CI {ci}")
    report(11, "collapsing", ok, "; ".join(lines))


def test_criterion_12_spectral_convergence(report, pert2, cert2, ctx2):
    ctx16 = SolverContext(pert2, 16, probes=16)
    worst = 0.0
    for y in (np.zeros(2), np.array([0.5, -0.3]), np.array([0.9, 0.9])):
        a, _ = solve_section(pert2, y, cert2, context=ctx2, tol=1e-13)
        b, _ = solve_section(pert2, y, cert2, context=ctx16, tol=1e-13)
        worst = max(worst, ctx16.norm(b.sigma - a.sigma.with_cutoff(16)))
    report(12, "spectral convergence", worst <= 1e-7, f"max ||sigma_16 - sigma_8|| {worst:.2e} (<= 1e-7)")
