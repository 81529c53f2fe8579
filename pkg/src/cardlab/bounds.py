"""Wasserstein upper bounds for a trained CARD model.

Continuous time runs over ``[0, 1]``. The bound pieces are

* ``M(t) = exp(int_0^t l1 + l2 * beta)`` with ``l1 = beta / 2`` and ``l2`` an
  empirical one-sided Lipschitz constant of the learned score,
* ``H(t)``, the mean squared gap between learned and conditional scores,
* ``rhs_thm1 = int beta M sqrt(H) dt + M(1) W2_T`` and its Cauchy-Schwarz
  relaxation ``rhs_cor1 = sqrt(2 int beta^2 M^2 / lambda dt * L1) + M(1) W2_T``
  where ``L1 = 1/2 int lambda H dt``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from . import transport
from .diffusion import CardModel, reverse_sample
from .datasets import Samples

L2_MAX = 50.0
CSV_COLUMNS = ("epoch", "L1_hat", "W2_emp", "W2_T", "M_T", "rhs_thm1", "rhs_cor1",
               "log_L1", "log_W2", "log_rhs")


@dataclass
class LipschitzEstimates:
    beta: Callable
    l2_times: np.ndarray
    l2_values: np.ndarray
    l2_max: float = L2_MAX

    def l1(self, t):
        return 0.5 * self.beta(t)

    def l2(self, t):
        v = np.interp(t, self.l2_times, self.l2_values)
        return np.clip(v, -self.l2_max, self.l2_max)

    def integrand(self, t):
        return self.l1(t) + self.l2(t) * self.beta(t)


def m_curve(est: LipschitzEstimates, ts) -> np.ndarray:
    """M on an increasing grid that starts at 0."""
    ts = np.asarray(ts, dtype=float)
    if ts[0] != 0.0:
        raise ValueError("grid must start at t = 0")
    return np.exp(cumulative_trapezoid(est.integrand(ts), ts, initial=0.0))


def m_factor(est: LipschitzEstimates, t: float, n_grid: int = 200) -> float:
    if t == 0.0:
        return 1.0
    return float(m_curve(est, np.linspace(0.0, t, n_grid))[-1])


def one_sided_lipschitz(score_fn, y1, y2, f, t, l2_max: float = L2_MAX) -> float:
    """max over rows of <s(y1) - s(y2), y1 - y2> / |y1 - y2|^2, clipped."""
    dy = y1 - y2
    dist2 = np.sum(dy * dy, axis=1)
    keep = dist2 > 1e-24
    if not np.any(keep):
        raise ValueError("all pairs coincide")
    ds = score_fn(y1[keep], f[keep], t) - score_fn(y2[keep], f[keep], t)
    ratio = np.sum(ds * dy[keep], axis=1) / dist2[keep]
    return float(np.clip(ratio.max(), -l2_max, l2_max))


def _same_class_pairs(samples: Samples, n_pairs: int, rng):
    i = rng.integers(0, len(samples), size=n_pairs)
    j = np.empty_like(i)
    for k in np.unique(samples.x[i]):
        pool = np.flatnonzero(samples.x == k)
        sel = samples.x[i] == k
        j[sel] = rng.choice(pool, size=sel.sum())
    return i, j


def _marginal_draw(model: CardModel, y0, f, tc, eps):
    ab = model.schedule.alpha_bar_cont(tc)
    return np.sqrt(ab) * y0 + (1 - np.sqrt(ab)) * f + np.sqrt(1 - ab) * eps


def estimate_l2(model: CardModel, samples: Samples, tc: float, n_pairs: int, rng,
                l2_max: float = L2_MAX) -> float:
    """One-sided Lipschitz estimate of the learned score at continuous time ``tc``.

    Pairs share a class label (hence f) and are drawn from the forward marginal.
    """
    i, j = _same_class_pairs(samples, n_pairs, rng)
    f = model.cond_mean(samples.x[i])
    y1 = _marginal_draw(model, samples.y[i], f, tc, rng.standard_normal(f.shape))
    y2 = _marginal_draw(model, samples.y[j], f, tc, rng.standard_normal(f.shape))
    return one_sided_lipschitz(model.score, y1, y2, f, tc, l2_max)


@dataclass
class HEstimate:
    conditional: float
    marginal: float | None = None
    stderr: float = 0.0


def estimate_H(model: CardModel, samples: Samples, tc: float, n_mc: int, rng,
               marginal_score=None) -> HEstimate:
    """Mean ||s_theta - (-eps/sigma)||^2 over forward-marginal draws.

    ``marginal_score(y, f, tc)``, when given, is also compared against.
    """
    idx = rng.integers(0, len(samples), size=n_mc)
    eps = rng.standard_normal((n_mc, samples.y.shape[1]))
    return _h_from_draws(model, samples.y[idx], model.cond_mean(samples.x[idx]), eps, tc,
                         marginal_score)


def _h_from_draws(model, y0, f, eps, tc, marginal_score=None) -> HEstimate:
    sig = model.schedule.sigma_cont(tc)
    y = _marginal_draw(model, y0, f, tc, eps)
    s = model.score(y, f, tc)
    gap = np.sum((s + eps / sig) ** 2, axis=1)
    marg = None
    if marginal_score is not None:
        marg = float(np.mean(np.sum((s - marginal_score(y, f, tc)) ** 2, axis=1)))
    return HEstimate(float(gap.mean()), marg, float(gap.std(ddof=1) / np.sqrt(len(gap)))
                     if len(gap) > 1 else 0.0)


def gaussian_marginal_score(model: CardModel, var0: float, mean0=0.0):
    """Exact score of q_t(.|f) when y0 ~ N(mean0, var0 I) independently of f."""
    def score(y, f, tc):
        ab = model.schedule.alpha_bar_cont(tc)
        mean = np.sqrt(ab) * mean0 + (1 - np.sqrt(ab)) * f
        return -(y - mean) / (ab * var0 + 1 - ab)
    return score


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive on the grid")
    return lam


def loss_L1_hat(ts, H, lam) -> float:
    return 0.5 * float(trapezoid(_check_lambda(lam) * np.asarray(H), ts))


def theorem1_rhs(ts, beta, M, H, W2_T: float, M_T: float) -> float:
    return float(trapezoid(beta * M * np.sqrt(np.maximum(H, 0.0)), ts)) + M_T * W2_T


def cor1_integral(ts, beta, M, lam) -> float:
    return float(trapezoid(beta ** 2 * M ** 2 / _check_lambda(lam), ts))


def corollary1_rhs(ts, beta, M, lam, L1: float, W2_T: float, M_T: float) -> float:
    if L1 < 0:
        raise ValueError("L1 must be nonnegative")
    return math.sqrt(2.0 * cor1_integral(ts, beta, M, lam) * L1) + M_T * W2_T


@dataclass
class BoundConfig:
    n_w2: int = 500
    n_grid: int = 200
    n_mc: int = 512
    n_pairs: int = 2048
    l2_max: float = L2_MAX
    t_min: float | None = None   # defaults to the first diffusion step 1/T
    seed: int = 0
    lam: Callable | None = None  # defaults to beta


@dataclass
class BoundReport:
    epoch: int
    L1_hat: float
    W2_emp: float
    W2_T: float
    M_T: float
    rhs_thm1: float
    rhs_cor1: float
    cor1_integral: float
    ts: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)
    M: np.ndarray = field(repr=False)
    H_marginal: np.ndarray | None = field(default=None, repr=False)

    def log_point(self):
        return log_bound_points([self])[0]

    def row(self) -> dict:
        lp = self.log_point()
        vals = [self.epoch, self.L1_hat, self.W2_emp, self.W2_T, self.M_T, self.rhs_thm1,
                self.rhs_cor1, *(lp if lp else (math.nan,) * 3)]
        return dict(zip(CSV_COLUMNS, vals))


def log_bound_points(reports):
    """(log L1, log W2_emp, 1/2 log(2 int beta M^2) + 1/2 log L1) per report.

    Reports with nonpositive L1 or W2 yield ``None`` and a warning.
    """
    out = []
    for r in reports:
        if r.L1_hat <= 0 or r.W2_emp <= 0 or r.cor1_integral <= 0:
            warnings.warn(f"epoch {r.epoch}: nonpositive input, log point skipped")
            out.append(None)
            continue
        log_l1 = math.log(r.L1_hat)
        out.append((log_l1, math.log(r.W2_emp),
                    0.5 * math.log(2.0 * r.cor1_integral) + 0.5 * log_l1))
    return out


class Evaluator:
    """Scores checkpoints of one run with shared random draws.

    The data subset, Monte-Carlo noise and sampler seeds are frozen at
    construction so that differences between checkpoints reflect the model
    rather than resampling noise.
    """

    def __init__(self, base: CardModel, samples: Samples, cfg: BoundConfig = BoundConfig(),
                 marginal_score=None):
        self.base = base
        self.samples = samples
        self.cfg = cfg
        self.marginal_score = marginal_score
        sched = base.schedule
        rng = np.random.Generator(np.random.PCG64([cfg.seed, 17]))
        n = len(samples)
        self.w2_idx = rng.choice(n, size=min(cfg.n_w2, n), replace=False)
        self.mc_idx = rng.integers(0, n, size=cfg.n_mc)
        self.mc_eps = rng.standard_normal((cfg.n_mc, samples.y.shape[1]))
        self.pair_seed = int(rng.integers(2**62))
        self.sample_seed = int(rng.integers(2**62))
        self.t_min = cfg.t_min if cfg.t_min is not None else 1.0 / sched.T
        self.ts = np.linspace(self.t_min, 1.0, cfg.n_grid)
        self.l2_times = np.arange(1, sched.T + 1) / sched.T
        # M needs the integral from 0; prepend the origin to the H grid
        self.m_grid = np.concatenate([[0.0], self.ts]) if self.t_min > 0 else self.ts
        self.beta = sched.beta_cont(self.ts)
        self.lam = self.beta if cfg.lam is None else _check_lambda(cfg.lam(self.ts))
        # W2_T depends only on f and the data, so it is shared by all checkpoints
        x = samples.x[self.w2_idx]
        f = base.cond_mean(x)
        q_T = self._push(samples.y[self.w2_idx], f, sched.T, rng)
        p_T = f + rng.standard_normal(f.shape)
        self.W2_T = transport.w2_exact(q_T, p_T)[0]

    def _push(self, y0, f, step, rng):
        ab = self.base.schedule.alpha_bar[step]
        return np.sqrt(ab) * y0 + (1 - np.sqrt(ab)) * f + np.sqrt(1 - ab) * rng.standard_normal(
            y0.shape)

    def lipschitz(self, model: CardModel) -> LipschitzEstimates:
        rng = np.random.Generator(np.random.PCG64(self.pair_seed))
        vals = np.array([estimate_l2(model, self.samples, t, self.cfg.n_pairs, rng,
                                     self.cfg.l2_max) for t in self.l2_times])
        return LipschitzEstimates(self.base.schedule.beta_cont, self.l2_times, vals,
                                  self.cfg.l2_max)

    def H_curve(self, model: CardModel):
        y0 = self.samples.y[self.mc_idx]
        f = model.cond_mean(self.samples.x[self.mc_idx])
        cond, marg = [], []
        for t in self.ts:
            h = _h_from_draws(model, y0, f, self.mc_eps, t, self.marginal_score)
            cond.append(h.conditional)
            marg.append(h.marginal)
        return np.array(cond), (np.array(marg) if self.marginal_score else None)

    def generated(self, model: CardModel):
        rng = np.random.Generator(np.random.PCG64(self.sample_seed))
        return reverse_sample(model, self.samples.x[self.w2_idx], rng)

    def evaluate(self, model: CardModel, epoch: int = 0) -> BoundReport:
        est = self.lipschitz(model)
        M_full = m_curve(est, self.m_grid)
        M = M_full[-len(self.ts):]
        M_T = float(M_full[-1])
        H, H_marg = self.H_curve(model)
        L1 = loss_L1_hat(self.ts, H, self.lam)
        gen = self.generated(model).at(0)
        W2_emp = transport.w2_exact(self.samples.y[self.w2_idx], gen)[0]
        rhs1 = theorem1_rhs(self.ts, self.beta, M, H, self.W2_T, M_T)
        rhs2 = corollary1_rhs(self.ts, self.beta, M, self.lam, L1, self.W2_T, M_T)
        return BoundReport(epoch, L1, W2_emp, self.W2_T, M_T, rhs1, rhs2,
                           cor1_integral(self.ts, self.beta, M, self.lam),
                           self.ts, H, M, H_marg)


def product_curve(model: CardModel, samples: Samples, est: LipschitzEstimates,
                  n: int = 500, seed: int = 0, steps=None):
    """Rows of (step, t, M(t), W2(q_t, p_t), M(t) * W2) for each diffusion step.

    q_t pushes data forward in closed form; p_t runs the learned reverse chain
    from N(f, I) down to step t.
    """
    sched = model.schedule
    rng = np.random.Generator(np.random.PCG64([seed, 23]))
    idx = rng.choice(len(samples), size=min(n, len(samples)), replace=False)
    y0, x = samples.y[idx], samples.x[idx]
    f = model.cond_mean(x)
    traj = reverse_sample(model, x, rng)
    steps = range(1, sched.T + 1) if steps is None else steps
    grid = np.linspace(0.0, 1.0, 20 * sched.T + 1)
    M_grid = m_curve(est, grid)
    rows = []
    for s in steps:
        ab = sched.alpha_bar[s]
        q = np.sqrt(ab) * y0 + (1 - np.sqrt(ab)) * f + np.sqrt(1 - ab) * rng.standard_normal(
            y0.shape)
        w = transport.w2_exact(q, traj.at(s))[0]
        t = s / sched.T
        M = float(np.interp(t, grid, M_grid))
        rows.append((s, t, M, w, M * w))
    return rows
