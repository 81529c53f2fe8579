import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cardlab import diffusion as df
from cardlab import fokker_planck as fp

RATE = df.ConstantRate(1.0)


def grid(ny=400, f=0.5, beta=1.0, **kw):
    return fp.Grid1D.around(f, ny, beta, 8.0, **kw)


def test_cfl_enforced_at_construction():
    g = grid(200)
    assert g.dt <= g.cfl_limit()
    with pytest.raises(fp.CFLError):
        fp.Grid1D(g.y_min, g.y_max, g.ny, 1.01 * g.cfl_limit(), g.beta_max, g.f)
    with pytest.raises(ValueError):
        fp.Grid1D(0.0, 1.0, 2, 1e-6, 1.0)


def test_cfl_limit_formula():
    g = fp.Grid1D(-7.5, 8.5, 160, 1e-4, 2.0, 0.5)
    dy = 0.1
    assert g.cfl_limit() == pytest.approx(min(dy * dy / 2.0, dy / (2.0 * 8.0 / 2)))


def test_gaussian_cells_are_exact_cell_averages():
    g = grid(100)
    cells = fp.gaussian_cells(g, 0.3, 0.5)
    assert cells.sum() * g.dy == pytest.approx(1.0, abs=1e-12)
    mid = 50
    lo, hi = g.edges[mid], g.edges[mid + 1]
    z = np.linspace(lo, hi, 20001)
    dens = np.exp(-(z - 0.3) ** 2 / 1.0) / math.sqrt(math.pi)
    assert cells[mid] == pytest.approx(np.trapezoid(dens, z) / g.dy, rel=1e-8)


@settings(max_examples=8)
@given(st.floats(-1.5, 1.5), st.floats(0.05, 2.0), st.floats(-1.0, 1.0))
def test_forward_moments_match_closed_form(mean0, var0, f):
    # the grid spans f +- 8; keep the start six standard deviations inside it
    assume(abs(mean0 - f) + 6 * math.sqrt(var0) <= 8)
    g = grid(400, f=f)
    sol = fp.fp_forward_solve(g, fp.gaussian_cells(g, mean0, var0), f, RATE, 1.0)
    m, v = sol.final.moments(g.centers)
    gamma = math.exp(-0.5)
    assert abs(m - (gamma * mean0 + (1 - gamma) * f)) <= 1e-3
    assert abs(v - (math.exp(-1.0) * var0 + 1 - math.exp(-1.0))) <= 1e-3


def test_closed_form_marginal_helper():
    m, v = fp.gaussian_marginal(-0.5, 0.25, 0.5, df.ConstantRate(2.0), 0.7)
    g = math.exp(-0.7)
    assert m == pytest.approx(g * -0.5 + (1 - g) * 0.5)
    assert v == pytest.approx(g * g * 0.25 + 1 - g * g)
    # a time-varying rate goes through quadrature; the continuous rate is piecewise linear
    # between the knots k/T and flat before the first one, so its integral is exact by hand
    sched = df.schedule_new()
    vals = sched.T * sched.beta[1:]
    exact = vals[0] / sched.T + np.sum((vals[1:] + vals[:-1]) / 2) / sched.T
    assert fp.beta_integral(sched.beta_cont, 1.0) == pytest.approx(exact, rel=1e-10)


def test_stationary_density_is_unchanged():
    g = grid(400, f=0.5)
    q0 = fp.gaussian_cells(g, 0.5, 1.0)
    sol = fp.fp_forward_solve(g, q0, 0.5, RATE, 1.0)
    assert fp.l1_distance(sol.final.values, q0, g.dy) <= 1e-3


def test_refinement_halves_the_error():
    m, v = fp.gaussian_marginal(-0.5, 0.25, 0.5, RATE, 1.0)
    errs = []
    for ny in (100, 200, 400):
        g = grid(ny)
        sol = fp.fp_forward_solve(g, fp.gaussian_cells(g, -0.5, 0.25), 0.5, RATE, 1.0)
        errs.append(fp.l1_distance(sol.final.values, fp.gaussian_cells(g, m, v), g.dy))
    assert errs[0] / errs[1] >= 2 and errs[1] / errs[2] >= 2


def test_exponential_fit_beats_plain_upwind():
    m, v = fp.gaussian_marginal(-0.5, 0.25, 0.5, RATE, 1.0)
    err = {}
    for scheme in fp.Scheme:
        g = grid(400, scheme=scheme)
        sol = fp.fp_forward_solve(g, fp.gaussian_cells(g, -0.5, 0.25), 0.5, RATE, 1.0)
        err[scheme] = fp.l1_distance(sol.final.values, fp.gaussian_cells(g, m, v), g.dy)
    assert err[fp.Scheme.EXPONENTIAL_FIT] < err[fp.Scheme.UPWIND]


@pytest.mark.parametrize("scheme", list(fp.Scheme))
def test_mass_and_positivity(scheme):
    g = grid(200, scheme=scheme)
    q0 = fp.gaussian_cells(g, 2.0, 0.05)
    sol = fp.fp_forward_solve(g, q0, 0.5, df.ConstantRate(3.0), 1.0, record_times=(0.1, 0.5))
    assert sol.max_mass_error <= 1e-3
    for fld in sol.fields:
        assert np.all(fld.values >= -1e-12)
        assert abs(fld.mass - 1) <= 1e-3
    score = fp.gaussian_score(2.0, 0.05, 0.5, df.ConstantRate(3.0))
    back = fp.fp_reverse_solve(g, sol.final.values, 0.5, df.ConstantRate(3.0), score, 1.0)
    assert back.max_mass_error <= 1e-3 and np.all(back.final.values >= -1e-12)


def test_reverse_roundtrip_and_zero_score_ablation():
    g = grid(400)
    q0 = fp.gaussian_cells(g, -0.5, 0.25)
    fwd = fp.fp_forward_solve(g, q0, 0.5, RATE, 1.0)
    score = fp.gaussian_score(-0.5, 0.25, 0.5, RATE)
    back = fp.fp_reverse_solve(g, fwd.final.values, 0.5, RATE, score, 1.0)
    exact = fp.l1_distance(back.final.values, q0, g.dy)
    zero = fp.fp_reverse_solve(g, fwd.final.values, 0.5, RATE, lambda y, t: np.zeros_like(y), 1.0)
    ablated = fp.l1_distance(zero.final.values, q0, g.dy)
    assert exact <= 0.05
    assert ablated > exact


def test_reverse_with_stationary_score_keeps_stationary_field():
    g = grid(400)
    pT = fp.gaussian_cells(g, 0.5, 1.0)
    back = fp.fp_reverse_solve(g, pT, 0.5, RATE, lambda y, t: -(y - 0.5), 1.0)
    assert fp.l1_distance(back.final.values, pT, g.dy) <= 1e-3


def test_reverse_record_times_are_offsets():
    g = grid(100)
    pT = fp.gaussian_cells(g, 0.5, 1.0)
    back = fp.fp_reverse_solve(g, pT, 0.5, RATE, lambda y, t: -(y - 0.5), 1.0, record_times=(0.25,))
    assert [fld.t for fld in back.fields] == [0.25, 1.0]


# ---------------------------------------------------------------- SDE Monte Carlo

def test_zero_rate_histogram_is_the_initial_histogram(rng):
    g = grid(100)
    y0 = rng.normal(size=5000)
    (field, y), = fp.sde_mc_marginal(g, y0, 0.5, df.ConstantRate(0.0), 1.0, 50, rng)
    np.testing.assert_array_equal(y, y0)
    expected = np.histogram(y0, bins=g.edges)[0] / (5000 * g.dy)
    np.testing.assert_array_equal(field.values, expected)


def test_mc_moments_within_three_sigma(rng):
    g = grid(200)
    n = 100_000
    y0 = -0.5 + 0.5 * rng.standard_normal(n)
    (_, y), = fp.sde_mc_marginal(g, y0, 0.5, RATE, 1.0, 200, rng)
    m, v = fp.gaussian_marginal(-0.5, 0.25, 0.5, RATE, 1.0)
    assert abs(y.mean() - m) <= 3 * math.sqrt(v / n)
    assert abs(y.var() - v) <= 3 * v * math.sqrt(2 / n)


def _em_moments(substeps, mean0=-0.5, var0=0.25, f=0.5, t_end=1.0):
    """Exact mean/variance of the Euler-Maruyama chain, read off its affine step map."""
    dt = t_end / substeps
    m, v = mean0, var0
    for k in range(substeps):
        t = k * dt
        step = lambda y, z: float(df.sde_forward_step(np.array([y]), f, RATE, t, dt, z=np.array([z]))[0])
        base = step(0.0, 0.0)
        a, c = step(1.0, 0.0) - base, step(0.0, 1.0) - base
        m, v = a * m + base, a * a * v + c * c
    return m, v


def test_substep_halving_reduces_weak_error():
    m, v = fp.gaussian_marginal(-0.5, 0.25, 0.5, RATE, 1.0)
    errs = [np.abs(np.subtract(_em_moments(n), (m, v))) for n in (25, 50, 100)]
    for coarse, fine in zip(errs, errs[1:]):
        assert np.all(fine < coarse)
        assert np.all(coarse / fine > 1.8)


def test_mc_histogram_matches_fp():
    rep = fp.FPCheckConfig(n_paths=100_000)
    rate = df.ConstantRate(rep.beta_bar)
    g = fp.Grid1D.around(rep.f, rep.ny, rep.beta_bar, rep.half_width)
    fwd = fp.fp_forward_solve(g, fp.gaussian_cells(g, rep.mean0, rep.var0), rep.f, rate, 1.0)
    rng = np.random.Generator(np.random.PCG64(9))
    y0 = rep.mean0 + math.sqrt(rep.var0) * rng.standard_normal(rep.n_paths)
    (hist, _), = fp.sde_mc_marginal(g, y0, rep.f, rate, 1.0, 200, rng)
    l1 = fp.l1_distance(fp._rebin(hist.values, 4), fp._rebin(fwd.final.values, 4), 4 * g.dy)
    assert l1 <= 0.05


# ---------------------------------------------------------------- probability flow

@pytest.mark.parametrize("t_probe", [0.25, 0.5, 1.0])
def test_ode_particles_match_fp(t_probe):
    g = grid(400)
    score = fp.gaussian_score(-0.5, 0.25, 0.5, RATE)
    assert fp.ode_marginal_check(g, -0.5, 0.25, 0.5, RATE, score, t_probe) <= 0.02


def test_ode_at_time_zero_is_binning_floor():
    g = grid(400)
    score = fp.gaussian_score(-0.5, 0.25, 0.5, RATE)
    assert fp.ode_marginal_check(g, -0.5, 0.25, 0.5, RATE, score, 0.0) <= 2e-3


def test_doubling_rate_keeps_discrepancy():
    out = []
    for beta in (1.0, 2.0):
        rate = df.ConstantRate(beta)
        g = grid(400, beta=beta)
        score = fp.gaussian_score(-0.5, 0.25, 0.5, rate)
        out.append(fp.ode_marginal_check(g, -0.5, 0.25, 0.5, rate, score, 0.5))
    assert max(out) <= 0.02 and abs(out[0] - out[1]) <= 0.01


def test_field_quantiles_invert_the_cdf():
    g = grid(400)
    cells = fp.gaussian_cells(g, 0.2, 0.3)
    u = np.array([0.1, 0.5, 0.9])
    from scipy.stats import norm
    np.testing.assert_allclose(fp.field_quantiles(g, cells, u), norm.ppf(u, 0.2, math.sqrt(0.3)),
                               atol=2e-3)


# ---------------------------------------------------------------- report

def test_consistency_report_passes_and_coarse_grid_fails():
    rep, secs = fp.consistency_report(fp.FPCheckConfig(n_paths=20_000))
    assert set(rep["checks"]) == {"moments", "fp_vs_mc", "fp_vs_ode", "roundtrip", "ablation",
                                  "refinement"}
    assert rep["checks"]["moments"] and rep["checks"]["fp_vs_ode"] and rep["checks"]["roundtrip"]
    coarse, _ = fp.consistency_report(fp.FPCheckConfig(ny=50, refine_ny=(25, 50), n_paths=2000))
    assert not coarse["checks"]["moments"] and not coarse["passed"]


def test_snapshot_csv(tmp_path):
    g = grid(10)
    fld = fp.DensityField(fp.gaussian_cells(g, 0.5, 1.0), g.dy, 0.25)
    fp.write_snapshots(tmp_path / "s.csv", g, [fld], "hello")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# hello" and lines[1] == "t,y,q" and len(lines) == 12
    assert lines[2].startswith("0.25,")
