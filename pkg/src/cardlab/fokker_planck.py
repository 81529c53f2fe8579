"""1-D finite-volume Fokker-Planck solver for the CARD diffusion, plus the
Monte-Carlo and probability-flow cross-checks that should agree with it.

Forward equation:  dq/dt = d/dy[(beta/2)(y - f) q] + (beta/2) d2q/dy2.
Reverse equation, in reversed time tau = t_end - t:
    dp/dtau = -d/dy[((beta/2)(y - f) + beta s) p] + (beta/2) d2p/dy2.
"""
from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.special import ndtr, ndtri

from .diffusion import ConstantRate, ode_flow_step, sde_forward_step
from .transport import w2_quantile_1d


class Scheme(str, enum.Enum):
    UPWIND = "upwind"
    EXPONENTIAL_FIT = "exponential_fit"


class CFLError(ValueError):
    pass


class MassDriftError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid1D:
    y_min: float
    y_max: float
    ny: int
    dt: float
    beta_max: float
    f: float = 0.0
    scheme: Scheme = Scheme.EXPONENTIAL_FIT

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.ny < 3 or self.y_max <= self.y_min:
            raise ValueError("need ny >= 3 and y_max > y_min")
        if self.dt <= 0 or self.beta_max <= 0:
            raise ValueError("dt and beta_max must be positive")
        limit = self.cfl_limit()
        if self.dt > limit:
            raise CFLError(f"dt={self.dt:.3g} exceeds the CFL limit {limit:.3g}")

    @classmethod
    def around(cls, f: float, ny: int, beta_max: float, half_width: float = 8.0,
               safety: float = 0.9, **kw) -> "Grid1D":
        """Grid on [f - w, f + w] with dt at ``safety`` times the stable step."""
        dy = 2 * half_width / ny
        dt = safety * stable_dt(dy, beta_max, half_width)
        return cls(f - half_width, f + half_width, ny, dt, beta_max, f, **kw)

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    @property
    def edges(self) -> np.ndarray:
        return self.y_min + np.arange(self.ny + 1) * self.dy

    def cfl_limit(self) -> float:
        reach = max(abs(self.y_max - self.f), abs(self.y_min - self.f))
        return min(self.dy ** 2 / self.beta_max, self.dy / (self.beta_max * reach / 2))


def stable_dt(dy: float, beta_max: float, reach: float) -> float:
    """Largest explicit step keeping the combined stencil monotone."""
    return 1.0 / (beta_max * reach / 2 / dy + beta_max / dy ** 2)


@dataclass
class DensityField:
    values: np.ndarray
    dy: float
    t: float = 0.0

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.dy)

    def moments(self, centers):
        w = self.values * self.dy
        m = float(np.sum(w * centers) / w.sum())
        v = float(np.sum(w * (centers - m) ** 2) / w.sum())
        return m, v


@dataclass
class FPResult:
    fields: list
    boundary_loss: float = 0.0
    clipped: float = 0.0
    substeps: int = 0
    max_mass_error: float = 0.0

    @property
    def final(self) -> DensityField:
        return self.fields[-1]


def gaussian_cells(grid: Grid1D, mean: float, var: float) -> np.ndarray:
    """Exact cell averages of N(mean, var)."""
    cdf = ndtr((grid.edges - mean) / np.sqrt(var))
    return np.diff(cdf) / grid.dy


def l1_distance(a, b, dy: float) -> float:
    return float(np.abs(np.asarray(a) - np.asarray(b)).sum() * dy)


def _bernoulli(x):
    """x / (exp(x) - 1), with the removable singularity at 0."""
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    small = np.abs(x) < 1e-8
    big = ~small
    out[big] = x[big] / np.expm1(x[big])
    out[small] = 1.0 - 0.5 * x[small]
    return out


def _face_fluxes(q, vel, D, dy, scheme: Scheme):
    """Fluxes through all ny + 1 faces with zero ghost cells."""
    padded = np.concatenate([[0.0], q, [0.0]])
    left, right = padded[:-1], padded[1:]
    if scheme is Scheme.UPWIND:
        return (np.maximum(vel, 0) * left + np.minimum(vel, 0) * right
                - D * (right - left) / dy)
    pe = vel * dy / D
    return D / dy * (_bernoulli(-pe) * left - _bernoulli(pe) * right)


def _evolve(grid: Grid1D, q0, velocity, beta_fn, t_end, record_times, time_map,
            mass_tol: float = 1e-3) -> FPResult:
    """Shared explicit driver. ``velocity(y, tau)`` and ``beta_fn(time_map(tau))``."""
    q = np.array(q0, dtype=float)
    dy = grid.dy
    faces = grid.edges
    record = sorted(set([0.0, t_end] if record_times is None else list(record_times) + [t_end]))
    result = FPResult([])
    tau = 0.0
    total = q.sum() * dy
    for target in record:
        while tau < target - 1e-12:
            step = min(grid.dt, target - tau)
            b = float(beta_fn(time_map(tau)))
            vel = velocity(faces, tau)
            D = 0.5 * b
            if D <= 0:
                tau += step
                continue
            rate = np.max(np.abs(vel)) / dy + 2 * D / dy ** 2
            n_sub = max(1, int(np.ceil(step * rate / 0.95)))
            h = step / n_sub
            for _ in range(n_sub):
                flux = _face_fluxes(q, vel, D, dy, grid.scheme)
                result.boundary_loss += h * (flux[-1] - flux[0])
                q -= h / dy * np.diff(flux)
                neg = q < 0
                if np.any(neg):
                    result.clipped += float(-q[neg].sum() * dy)
                    q[neg] = 0.0
            result.substeps += n_sub
            tau += step
            err = abs(q.sum() * dy + result.boundary_loss - total)
            result.max_mass_error = max(result.max_mass_error, err)
            if err > mass_tol:
                raise MassDriftError(f"mass drift {err:.2e} at tau={tau:.4f}")
        result.fields.append(DensityField(q.copy(), dy, target))
    return result


def fp_forward_solve(grid: Grid1D, q0, f: float, beta_fn, t_end: float,
                     record_times=None) -> FPResult:
    def velocity(y, tau):
        return -0.5 * beta_fn(tau) * (y - f)
    return _evolve(grid, q0, velocity, beta_fn, t_end, record_times, lambda tau: tau)


def fp_reverse_solve(grid: Grid1D, pT, f: float, beta_fn, score_fn, t_end: float,
                     record_times=None) -> FPResult:
    """Reverse-time evolution; ``score_fn(y, t)`` uses forward time t.

    Recorded field times are reversed-time offsets tau = t_end - t.
    """
    def velocity(y, tau):
        t = t_end - tau
        b = beta_fn(t)
        return 0.5 * b * (y - f) + b * score_fn(y, t)
    return _evolve(grid, pT, velocity, beta_fn, t_end, record_times, lambda tau: t_end - tau)


def beta_integral(beta_fn, t: float) -> float:
    if isinstance(beta_fn, ConstantRate):
        return beta_fn.beta_bar * t
    return quad(lambda s: float(beta_fn(s)), 0.0, t, limit=500, epsabs=1e-13, epsrel=1e-11)[0]


def gaussian_marginal(mean0: float, var0: float, f: float, beta_fn, t: float):
    """Mean and variance of the forward marginal from N(mean0, var0)."""
    B = beta_integral(beta_fn, t)
    gamma = np.exp(-0.5 * B)
    return gamma * mean0 + (1 - gamma) * f, gamma ** 2 * var0 - np.expm1(-B)


def gaussian_score(mean0: float, var0: float, f: float, beta_fn):
    """Exact score of the forward marginal, as ``score(y, t)``."""
    def score(y, t):
        m, v = gaussian_marginal(mean0, var0, f, beta_fn, t)
        return -(y - m) / v
    return score


def sde_mc_marginal(grid: Grid1D, y0, f: float, beta_fn, t_end: float, substeps: int, rng,
                    record_times=None):
    """Euler-Maruyama paths binned as cell densities at each record time."""
    y = np.array(y0, dtype=float)
    n = y.size
    dt = t_end / substeps
    record = sorted(set([t_end] if record_times is None else list(record_times) + [t_end]))
    out = []
    t = 0.0
    k = 0
    for target in record:
        while t < target - 1e-12:
            y = sde_forward_step(y, f, beta_fn, t, dt, rng)
            k += 1
            t = k * dt
        hist = np.histogram(y, bins=grid.edges)[0] / (n * grid.dy)
        out.append((DensityField(hist, grid.dy, target), y.copy()))
    return out


def field_quantiles(grid: Grid1D, values, u) -> np.ndarray:
    """Inverse CDF of a piecewise-constant density at probabilities ``u``."""
    cdf = np.concatenate([[0.0], np.cumsum(values) * grid.dy])
    cdf /= cdf[-1]
    # strictly increasing support for interpolation
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return np.interp(u, cdf[keep], grid.edges[keep])


def ode_marginal_check(grid: Grid1D, mean0: float, var0: float, f: float, beta_fn,
                       score_fn, t_probe: float, n_particles: int = 4000,
                       substeps_per_unit: int = 200, fp_field=None) -> float:
    """Quantile-based W2 between probability-flow particles and the FP marginal.

    Particles start on the N(mean0, var0) quantile lattice, so the flow's
    monotonicity makes them the quantiles of the transported law.
    """
    u = (np.arange(n_particles) + 0.5) / n_particles
    y = mean0 + np.sqrt(var0) * ndtri(u)
    if t_probe > 0:
        def s(yy, ff, t):
            return score_fn(yy, t)
        steps = max(1, int(np.ceil(substeps_per_unit * t_probe)))
        y = ode_flow_step(y, f, s, beta_fn, 0.0, t_probe, substeps=steps)
    if fp_field is None:
        q0 = gaussian_cells(grid, mean0, var0)
        fp_field = fp_forward_solve(grid, q0, f, beta_fn, t_probe).final.values
    return w2_quantile_1d(y, field_quantiles(grid, fp_field, u))


@dataclass
class FPCheckConfig:
    f: float = 0.5
    mean0: float = -0.5
    var0: float = 0.25
    beta_bar: float = 1.0
    t_end: float = 1.0
    ny: int = 400
    half_width: float = 8.0
    scheme: str = Scheme.EXPONENTIAL_FIT.value
    n_paths: int = 100_000
    mc_substeps: int = 200
    mc_rebin: int = 4
    probes: tuple = (0.25, 0.5, 1.0)
    refine_ny: tuple = (100, 200, 400)
    seed: int = 0
    tol_mc: float = 0.05
    tol_ode: float = 0.02
    tol_roundtrip: float = 0.05
    min_refine_ratio: float = 2.0
    tol_moments: float = 1e-3


def _rebin(values, k):
    n = len(values) // k * k
    return values[:n].reshape(-1, k).mean(axis=1)


def consistency_report(cfg: FPCheckConfig = FPCheckConfig()) -> tuple[dict, float]:
    """Run the FP / SDE / ODE cross-checks; returns (metrics with pass flags, seconds)."""
    start = time.perf_counter()
    rate = ConstantRate(cfg.beta_bar)
    grid = Grid1D.around(cfg.f, cfg.ny, cfg.beta_bar, cfg.half_width, scheme=cfg.scheme)
    q0 = gaussian_cells(grid, cfg.mean0, cfg.var0)
    fwd = fp_forward_solve(grid, q0, cfg.f, rate, cfg.t_end, record_times=cfg.probes)
    by_time = {fld.t: fld for fld in fwd.fields}

    m_exact, v_exact = gaussian_marginal(cfg.mean0, cfg.var0, cfg.f, rate, cfg.t_end)
    m_fp, v_fp = fwd.final.moments(grid.centers)
    moment_err = max(abs(m_fp - m_exact), abs(v_fp - v_exact))

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    y0 = cfg.mean0 + np.sqrt(cfg.var0) * rng.standard_normal(cfg.n_paths)
    (hist, _), = sde_mc_marginal(grid, y0, cfg.f, rate, cfg.t_end, cfg.mc_substeps, rng)
    mc_l1 = l1_distance(_rebin(hist.values, cfg.mc_rebin), _rebin(fwd.final.values, cfg.mc_rebin),
                        grid.dy * cfg.mc_rebin)

    score = gaussian_score(cfg.mean0, cfg.var0, cfg.f, rate)
    ode_w2 = {t: ode_marginal_check(grid, cfg.mean0, cfg.var0, cfg.f, rate, score, t,
                                    fp_field=by_time[t].values) for t in cfg.probes}

    back = fp_reverse_solve(grid, fwd.final.values, cfg.f, rate, score, cfg.t_end)
    roundtrip = l1_distance(back.final.values, q0, grid.dy)
    zero = fp_reverse_solve(grid, fwd.final.values, cfg.f, rate,
                            lambda y, t: np.zeros_like(y), cfg.t_end)
    roundtrip_zero = l1_distance(zero.final.values, q0, grid.dy)

    errors = []
    for ny in cfg.refine_ny:
        g = Grid1D.around(cfg.f, ny, cfg.beta_bar, cfg.half_width, scheme=cfg.scheme)
        sol = fp_forward_solve(g, gaussian_cells(g, cfg.mean0, cfg.var0), cfg.f, rate, cfg.t_end)
        errors.append(l1_distance(sol.final.values, gaussian_cells(g, m_exact, v_exact), g.dy))
    ratios = [a / b for a, b in zip(errors, errors[1:])]

    report = {
        "grid": {"ny": grid.ny, "dy": grid.dy, "dt": grid.dt, "scheme": grid.scheme.value},
        "moment_error": moment_err,
        "mass_error": fwd.max_mass_error,
        "fp_vs_mc_l1": mc_l1,
        "fp_vs_ode_w2": {str(k): v for k, v in ode_w2.items()},
        "roundtrip_l1": roundtrip,
        "roundtrip_zero_score_l1": roundtrip_zero,
        "refinement": {"ny": list(cfg.refine_ny), "l1_error": errors, "ratios": ratios},
    }
    checks = {
        "moments": bool(moment_err <= cfg.tol_moments),
        "fp_vs_mc": bool(mc_l1 <= cfg.tol_mc),
        "fp_vs_ode": bool(max(ode_w2.values()) <= cfg.tol_ode),
        "roundtrip": bool(roundtrip <= cfg.tol_roundtrip),
        "ablation": bool(roundtrip_zero > roundtrip),
        "refinement": bool(all(r >= cfg.min_refine_ratio for r in ratios)),
    }
    report["checks"] = checks
    report["passed"] = all(checks.values())
    return report, time.perf_counter() - start


def write_snapshots(path, grid: Grid1D, fields, comment: str | None = None) -> None:
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("t,y,q\n")
        for fld in fields:
            for y, q in zip(grid.centers, fld.values):
                fh.write(f"{fld.t!r},{float(y)!r},{float(q)!r}\n")


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, default=float)
