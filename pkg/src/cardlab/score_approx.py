"""Score approximation by diffused local Taylor polynomials.

The conditional density q0(y0 | f) is rescaled onto the unit cube as
``tau(y, f) = q0(R*(y - 1/2) | R*(f - 1/2))`` and replaced by a piecewise
Taylor polynomial q1 on an N-grid: indicator cells in y, trapezoid blends in
f. Convolving q1 with a truncated Taylor series of the Gaussian kernel gives
polynomial integrands, which are integrated exactly, producing a density
approximant h1 and a gradient approximant h4 = sigma * grad q. The score
estimate is ``h4 / (sigma * max(h1, eps_low))`` clipped to an analytic cap.

The test families are separable, ``q0(y0 | f) = prod_i g(y0_i - f_i)``, with
``g`` a centred Gaussian or a symmetric two-Gaussian mixture; everything below
is written for general dimension ``d`` (with ``d_x = d``).
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite_e import hermeval
from scipy.special import comb, ndtr, roots_legendre

from .diffusion import ConstantRate

GaussianRepr = ConstantRate
SQRT_2PI = math.sqrt(2 * math.pi)


def exp_taylor(order_p: int, u) -> np.ndarray:
    """sum_{k<p} (-u)^k / k!, accumulated with math.fsum per point."""
    if order_p < 1:
        raise ValueError("order_p must be >= 1")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(u < 0):
        raise ValueError("u must be nonnegative")
    out = np.empty_like(u)
    for i, x in enumerate(u.ravel()):
        term, terms = 1.0, [1.0]
        for k in range(1, order_p):
            term *= -x / k
            terms.append(term)
        out.flat[i] = math.fsum(terms)
    return out


def stated_exp_order(eps: float) -> int:
    """ceil(3 ln(1/eps) / e): the order whose remainder was claimed to be eps^(3/e)."""
    return math.ceil(3 * math.log(1 / eps) / math.e)


def exp_order(eps: float) -> int:
    """ceil(3e ln(1/eps)); guarantees a remainder <= eps^(3/e) for u <= ln(1/eps)."""
    return math.ceil(3 * math.e * math.log(1 / eps))


def exp_series_coefficients(order_p: int) -> np.ndarray:
    """Coefficients of sum_{k<p} (-z^2/2)^k / k! as powers z^(2k)."""
    k = np.arange(order_p)
    return np.array([(-0.5) ** j / math.factorial(j) for j in k])


# ---------------------------------------------------------------- families

@dataclass(frozen=True)
class SeparableFamily:
    """q0(y0 | f) = prod_i g(y0_i - f_i) with g = mean of N(+-delta, s0^2).

    ``delta = 0`` is the Gaussian family. ``f_max`` bounds |f_i| for the
    envelope constants; ``beta_holder`` is the smoothness index assumed by the
    approximation theory (the profile is C-infinity, so this is a choice).
    """

    s0: float = 0.5
    delta: float = 0.0
    d: int = 1
    f_max: float = 0.5
    beta_holder: float = 2.0

    @property
    def name(self) -> str:
        return "gaussian" if self.delta == 0 else "mixture"

    @property
    def s(self) -> int:
        return int(math.floor(self.beta_holder))

    def profile_deriv(self, k: int, u):
        """k-th derivative of the 1-D profile g."""
        coeffs = np.zeros(k + 1)
        coeffs[k] = 1.0
        out = 0.0
        shifts = (0.0,) if self.delta == 0 else (-self.delta, self.delta)
        for c in shifts:
            z = (np.asarray(u, dtype=float) - c) / self.s0
            out = out + (-1) ** k * hermeval(z, coeffs) * np.exp(-0.5 * z * z) / (
                SQRT_2PI * self.s0 ** (k + 1))
        return out / len(shifts)

    def density(self, y0, f):
        y0 = np.atleast_2d(y0)
        return np.prod(self.profile_deriv(0, y0 - np.asarray(f)), axis=-1)

    def deriv(self, n, m, y0, f):
        """d^n/dy0^n d^m/df^m of q0, multi-indices per coordinate."""
        out = 1.0
        for i in range(self.d):
            k = n[i] + m[i]
            out = out * (-1) ** m[i] * self.profile_deriv(k, y0[..., i] - f[..., i])
        return out

    def profile_cdf(self, u):
        shifts = (0.0,) if self.delta == 0 else (-self.delta, self.delta)
        return sum(ndtr((np.asarray(u) - c) / self.s0) for c in shifts) / len(shifts)

    def tail_mass(self, R: float, f=0.0) -> float:
        """P(|y0_i| > R) for one coordinate given f_i = f."""
        return float(1.0 - self.profile_cdf(R - f) + self.profile_cdf(-R - f))

    def box_mass(self, R: float, f) -> float:
        f = np.broadcast_to(np.asarray(f, dtype=float), (self.d,))
        return float(np.prod([1.0 - self.tail_mass(R, fi) for fi in f]))

    @cached_property
    def subgaussian_c(self) -> float:
        """Smallest c with P(|y0_i| >= R) <= 2 exp(-R^2/c^2) for |f| <= f_max."""
        R = np.linspace(1e-3, 12 * (self.s0 + self.delta + self.f_max), 4000)
        worst = np.zeros_like(R)
        for fv in np.linspace(-self.f_max, self.f_max, 11):
            tail = np.array([self.tail_mass(r, fv) for r in R])
            tail = np.maximum(tail, 1e-300)
            ratio = np.where(tail < 2.0, R ** 2 / np.log(2.0 / tail), 0.0)
            worst = np.maximum(worst, ratio)
        return float(np.sqrt(worst.max()))

    @property
    def envelope(self) -> tuple[float, float]:
        """(c1, c2) with q0(y0|f) <= c1 exp(-c2 |y0|^2 / 2) for |f_i| <= f_max.

        Uses (y0 - m)^2 >= y0^2 / 2 - m^2 per coordinate, |m| <= f_max + delta.
        """
        shift = self.f_max + self.delta
        c2 = 1.0 / (2 * self.s0 ** 2)
        c1 = (math.exp(shift ** 2 / (2 * self.s0 ** 2)) / (SQRT_2PI * self.s0)) ** self.d
        return c1, c2

    def holder_B(self) -> float:
        """Largest sup-norm of the derivatives of q0 up to total order s + 1."""
        u = np.linspace(-8 * self.s0 - self.delta, 8 * self.s0 + self.delta, 4001)
        sups = [np.abs(self.profile_deriv(k, u)).max() for k in range(self.s + 2)]
        peak = sups[0]
        return float(max(sups) * peak ** (self.d - 1))

    def window(self, f: float) -> tuple[float, float]:
        w = 14 * self.s0 + self.delta
        return f - w, f + w


# ------------------------------------------------------------ quadrature oracle

@dataclass
class QuadratureOracle:
    """Reference values of q(y_t | f) and its gradient by Gauss-Legendre panels."""

    family: SeparableFamily
    repr: GaussianRepr = field(default_factory=GaussianRepr)
    nodes: int = 24
    tol: float = 1e-11
    max_panels: int = 4096

    def _one_dim(self, y, f: float, t: float):
        gamma, sigma = float(self.repr.gamma(t)), float(self.repr.sigma(t))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        lo_f, hi_f = self.family.window(f)
        a = (y - (1 - gamma) * f) / gamma
        half = 14 * sigma / gamma
        lo = np.maximum(lo_f, a - half)
        hi = np.minimum(hi_f, a + half)
        empty = hi <= lo
        hi = np.where(empty, lo + 1.0, hi)
        x, w = roots_legendre(self.nodes)

        def integrate(panels):
            edges = lo[:, None] + (hi - lo)[:, None] * np.linspace(0, 1, panels + 1)[None, :]
            mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
            rad = 0.5 * (edges[:, 1:] - edges[:, :-1])
            y0 = mid[:, :, None] + rad[:, :, None] * x[None, None, :]
            z = (y[:, None, None] - gamma * y0 - (1 - gamma) * f) / sigma
            kern = np.exp(-0.5 * z * z) / (SQRT_2PI * sigma)
            base = self.family.profile_deriv(0, y0 - f) * kern * w * rad[:, :, None]
            q = base.sum(axis=(1, 2))
            dq = (base * (-z / sigma)).sum(axis=(1, 2))
            return q, dq

        panels = 4
        q, dq = integrate(panels)
        while True:
            panels *= 2
            q2, dq2 = integrate(panels)
            err = np.maximum(np.abs(q2 - q), np.abs(dq2 - dq) * sigma)
            if np.all(err <= self.tol * np.maximum(np.abs(q2), 1e-300)) or np.all(err < 1e-300):
                break
            if panels >= self.max_panels:
                raise RuntimeError("quadrature did not converge")
            q, dq = q2, dq2
        q2 = np.where(empty, 0.0, q2)
        dq2 = np.where(empty, 0.0, dq2)
        return q2, dq2

    def density(self, y_t, f, t):
        """Returns (q, grad q) for points ``y_t`` of shape (M, d)."""
        y_t = np.atleast_2d(np.asarray(y_t, dtype=float))
        f = np.broadcast_to(np.asarray(f, dtype=float), (self.family.d,))
        parts = [self._one_dim(y_t[:, i], f[i], t) for i in range(self.family.d)]
        qs = np.stack([p[0] for p in parts], axis=1)
        dqs = np.stack([p[1] for p in parts], axis=1)
        q = np.prod(qs, axis=1)
        grad = np.empty_like(dqs)
        for k in range(self.family.d):
            others = np.prod(np.delete(qs, k, axis=1), axis=1)
            grad[:, k] = dqs[:, k] * others
        return q, grad

    def score(self, y_t, f, t):
        q, grad = self.density(y_t, f, t)
        return grad / q[:, None]


def gaussian_family_marginal(family: SeparableFamily, y_t, f, t, rate: GaussianRepr):
    """Closed-form q(y_t|f) and score when ``delta = 0``."""
    gamma, sigma = rate.gamma(t), rate.sigma(t)
    var = gamma ** 2 * family.s0 ** 2 + sigma ** 2
    y_t = np.atleast_2d(y_t)
    r = y_t - np.asarray(f)
    q = np.prod(np.exp(-0.5 * r * r / var) / np.sqrt(2 * np.pi * var), axis=1)
    return q, -r / var


# ------------------------------------------------------------ truncation

@dataclass
class TruncationDomains:
    eps: float
    c: float
    R: float
    R_f: float

    def __post_init__(self):
        if not 0 < self.eps < 1 / math.e:
            raise ValueError("eps must lie in (0, 1/e)")
        if self.R <= 1 or self.R_f <= 1:
            raise ValueError("R and R_f must exceed 1")

    @classmethod
    def for_family(cls, family: SeparableFamily, eps: float) -> "TruncationDomains":
        c = max(family.subgaussian_c, math.sqrt(2.0))
        width = c * math.sqrt(math.log(1 / eps))
        R = max(width, 1.0 + 1e-9)
        return cls(eps, c, R, max(R, family.f_max, 1.0 + 1e-9))

    @property
    def log_inv_eps(self) -> float:
        return math.log(1 / self.eps)

    @property
    def R_star(self) -> float:
        return max(2 * self.R, 2 * self.R_f)

    def D01(self) -> tuple[float, float]:
        h = self.c * math.sqrt(self.log_inv_eps)
        return -h, h

    def D02(self, y_t, f, gamma: float, sigma: float):
        center = (np.asarray(y_t) - (1 - gamma) * np.asarray(f)) / gamma
        h = sigma * self.c * math.sqrt(self.log_inv_eps) / gamma
        return center - h, center + h

    def kernel_z_max(self) -> float:
        return self.c * math.sqrt(self.log_inv_eps)


def eps_low_floor(dom: TruncationDomains, B: float, N: int, beta: float, d: int,
                  gamma: float, sigma: float) -> float:
    Nb = N ** beta
    return (dom.eps + B / (Nb * gamma ** (d / 2))
            + B * dom.eps ** (3 / math.e) * (Nb + 1) / (N ** (d + beta) * sigma ** d))


# ------------------------------------------------------------ lemma bounds

@dataclass
class LemmaConstants:
    c1: float
    c2: float
    c3: float
    c: float
    R: float
    d: int

    @classmethod
    def for_family(cls, family: SeparableFamily, dom: TruncationDomains, f) -> "LemmaConstants":
        c1, c2 = family.envelope
        c3 = family.box_mass(dom.R, f) / (2 * math.pi) ** (family.d / 2)
        return cls(c1, c2, c3, dom.c, dom.R, family.d)

    def density_lower(self, y, f, gamma, sigma):
        expo = (np.sum(y * y, axis=-1) + 2 * (1 - gamma) ** 2 * np.sum(f * f)
                + 2 * gamma ** 2 * self.R ** 2) / sigma ** 2
        return self.c3 / sigma ** self.d * np.exp(-expo)

    def density_upper(self, y, f, gamma, sigma):
        den = gamma ** 2 + self.c2 * sigma ** 2
        r = y - (1 - gamma) * f
        return self.c1 / den ** (self.d / 2) * np.exp(-self.c2 * np.sum(r * r, axis=-1) / (2 * den))

    def gradient_upper(self, y, f, gamma, sigma):
        den = gamma ** 2 + self.c2 * sigma ** 2
        r = y - (1 - gamma) * f
        env = self.c1 / den ** (self.d / 2) * np.exp(-self.c2 * np.sum(r * r, axis=-1) / den)
        ny = np.sqrt(np.sum(y * y, axis=-1))
        nf = math.sqrt(float(np.sum(f * f)))
        return env * (self.c2 * ny / den + 4 * gamma ** 2 * (1 - gamma) * nf / (sigma ** 2 * den)
                      + 4 * gamma / (sigma * math.sqrt(den)))

    def c4(self) -> float:
        return 2 * self.c * math.sqrt(2 * self.d)

    def c5(self, gamma, sigma) -> float:
        log_term = max(math.log(sigma ** self.d / self.c3), 0.0)
        return (2 * self.c / sigma ** 2 * math.sqrt(log_term)
                + 2 * math.sqrt(2) * self.c * gamma * self.R / sigma ** 3)

    def score_cap(self, y, f, gamma, sigma):
        rad = np.sqrt(np.sum(y * y, axis=-1) + 2 * (1 - gamma) ** 2 * np.sum(f * f))
        return self.c4() / sigma ** 3 * rad + self.c5(gamma, sigma)


def density_bounds_check(oracle: QuadratureOracle, dom: TruncationDomains, t: float,
                         grid, f) -> dict:
    """Evaluate the density, gradient and score bounds on ``grid`` (M, d).

    Slacks are bound minus value (or value minus lower bound) relative to
    the larger side; all must be >= 0 for a pass.
    """
    family = oracle.family
    f = np.broadcast_to(np.asarray(f, dtype=float), (family.d,))
    gamma, sigma = float(oracle.repr.gamma(t)), float(oracle.repr.sigma(t))
    k = LemmaConstants.for_family(family, dom, f)
    grid = np.atleast_2d(grid)
    q, grad = oracle.density(grid, f, t)
    lower = k.density_lower(grid, f, gamma, sigma)
    upper = k.density_upper(grid, f, gamma, sigma)
    gbound = k.gradient_upper(grid, f, gamma, sigma)
    cap = k.score_cap(grid, f, gamma, sigma)
    score = np.sqrt(np.sum(grad * grad, axis=1)) / q
    slack = {
        "density_lower": float(np.min((q - lower) / np.maximum(q, 1e-300))),
        "density_upper": float(np.min((upper - q) / np.maximum(upper, 1e-300))),
        "score_cap": float(np.min((cap - score) / cap)),
        "gradient_upper": float(np.min((gbound - np.sqrt(np.sum(grad * grad, axis=1)))
                                       / np.maximum(gbound, 1e-300))),
    }
    return {
        "t": t,
        "slack": slack,
        "passed": slack["density_lower"] >= 0 and slack["density_upper"] >= 0
        and slack["score_cap"] >= 0,
        "gradient_passed": slack["gradient_upper"] >= 0,
    }


# ------------------------------------------------------------ local polynomial

def psi(a):
    """Trapezoid: 1 on |a| < 1, 2 - |a| on [1, 2], 0 beyond."""
    return np.clip(2.0 - np.abs(a), 0.0, 1.0)


def multi_indices(dim: int, order: int):
    return [c for c in itertools.product(range(order + 1), repeat=dim) if sum(c) <= order]


@dataclass
class LocalPolynomial:
    """Piecewise Taylor polynomial of tau on [0,1]^d x [0,1]^d.

    Cells in y are ((v-1)/N, v/N], v = 1..N, expanded at v/N; blends in f are
    centred at w/N, w = 0..N. ``coef[(n, m)]`` has shape (N,)*d + (N+1,)*d.
    """

    N: int
    s: int
    d: int
    R_star: float
    coef: dict
    terms: list

    @property
    def y_centers(self) -> np.ndarray:
        return np.arange(1, self.N + 1) / self.N

    @property
    def f_centers(self) -> np.ndarray:
        return np.arange(0, self.N + 1) / self.N

    def f_weights(self, f_scaled) -> np.ndarray:
        """psi(3N(f - w/N)) per coordinate: shape (d, N + 1)."""
        f_scaled = np.atleast_1d(f_scaled)
        return psi(3 * self.N * (f_scaled[:, None] - self.f_centers[None, :]))

    def partition(self, y, f) -> np.ndarray:
        """Sum of all Psi_{v,w} at points (M, d) with one f (d,)."""
        y = np.atleast_2d(y)
        inside = np.all((y >= 0) & (y <= 1), axis=1)
        return inside * np.prod(self.f_weights(f).sum(axis=1))

    def cell_index(self, y) -> np.ndarray:
        return np.clip(np.ceil(np.asarray(y) * self.N).astype(int), 1, self.N) - 1

    def __call__(self, y, f) -> np.ndarray:
        """q1 at points ``y`` (M, d) in scaled coordinates, single ``f`` (d,)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        f = np.atleast_1d(np.asarray(f, dtype=float))
        cells = self.cell_index(y)
        wts = self.f_weights(f)
        out = np.zeros(len(y))
        for n, m in self.terms:
            blend = self._f_contract(self.coef[(n, m)], wts, f, m)
            vals = blend[tuple(cells.T)]
            mono = np.prod([(y[:, i] - (cells[:, i] + 1) / self.N) ** n[i]
                            for i in range(self.d)], axis=0)
            out += vals * mono
        return out

    def _f_contract(self, arr, wts, f, m):
        """Contract the trailing w axes against psi weights times (f - w/N)^m."""
        for i in range(self.d - 1, -1, -1):
            factor = wts[i] * (f[i] - self.f_centers) ** m[i]
            arr = np.tensordot(arr, factor, axes=([arr.ndim - 1], [0]))
        return arr

    def cell_coefficients(self, f) -> dict:
        """Per y-cell polynomial coefficients in (y - v/N)^n after f blending."""
        f = np.atleast_1d(np.asarray(f, dtype=float))
        wts = self.f_weights(f)
        out = {}
        for n, m in self.terms:
            part = self._f_contract(self.coef[(n, m)], wts, f, m)
            out[n] = out.get(n, 0.0) + part
        return out


def build_local_polynomial(tau_deriv, N: int, s: int, d: int, R_star: float = 1.0) -> LocalPolynomial:
    """``tau_deriv(n, m, Y, F)`` gives the (n, m) mixed derivative of tau at
    scaled points ``Y`` (..., d), ``F`` (..., d)."""
    yc = np.arange(1, N + 1) / N
    fc = np.arange(0, N + 1) / N
    mesh = np.meshgrid(*([yc] * d + [fc] * d), indexing="ij")
    Y = np.stack(mesh[:d], axis=-1)
    F = np.stack(mesh[d:], axis=-1)
    terms = [(c[:d], c[d:]) for c in multi_indices(2 * d, s)]
    coef = {}
    for n, m in terms:
        fact = np.prod([math.factorial(k) for k in n + m])
        coef[(n, m)] = np.asarray(tau_deriv(n, m, Y, F), dtype=float) / fact
    return LocalPolynomial(N, s, d, R_star, coef, terms)


def family_tau_deriv(family: SeparableFamily, R_star: float):
    def tau_deriv(n, m, Y, F):
        scale = R_star ** (sum(n) + sum(m))
        return scale * family.deriv(n, m, R_star * (Y - 0.5), R_star * (F - 0.5))
    return tau_deriv


def polynomial_sup_error_bound(B: float, R_star: float, d: int, s: int, N: int, beta: float) -> float:
    return B * R_star ** s * (2 * d) ** s / (N ** beta * math.factorial(s))


# ------------------------------------------------------------ score approximant

@dataclass
class ScoreApproximator:
    family: SeparableFamily
    dom: TruncationDomains
    N: int
    repr: GaussianRepr = field(default_factory=GaussianRepr)
    order_p: int | None = None
    B: float | None = None

    def __post_init__(self):
        if self.order_p is None:
            self.order_p = exp_order(self.dom.eps)
        if self.B is None:
            self.B = self.family.holder_B()
        self.poly = build_local_polynomial(family_tau_deriv(self.family, self.dom.R_star),
                                           self.N, self.family.s, self.family.d, self.dom.R_star)
        self._series = exp_series_coefficients(self.order_p)

    def eps_low(self, t: float) -> float:
        return eps_low_floor(self.dom, self.B, self.N, self.family.beta_holder, self.family.d,
                             float(self.repr.gamma(t)), float(self.repr.sigma(t)))

    def _moments(self, z_lo, z_hi, jmax: int):
        """int_{z_lo}^{z_hi} z^j P(z^2/2) dz for j = 0..jmax, P the kernel series."""
        k = np.arange(self.order_p)
        out = []
        for j in range(jmax + 1):
            powers = 2 * k + j + 1
            hi = z_hi[..., None] ** powers
            lo = z_lo[..., None] ** powers
            out.append(np.sum(self._series * (hi - lo) / powers, axis=-1))
        return np.stack(out, axis=-1)

    def _cell_integrals(self, y, f_i, gamma, sigma):
        """Per-coordinate integrals I[:, v, n] and J[:, v, n] (kernel and -z kernel)."""
        N, R_star, s = self.N, self.dom.R_star, self.family.s
        centers = R_star * (np.arange(1, N + 1) / N - 0.5)
        a = (y - (1 - gamma) * f_i) / gamma
        d_lo, d_hi = self.dom.D01()
        k_lo, k_hi = self.dom.D02(y, f_i, gamma, sigma)
        lo = np.maximum.reduce([np.broadcast_to(centers - R_star / N, (len(y), N)),
                                np.full((len(y), N), d_lo), np.broadcast_to(k_lo[:, None], (len(y), N))])
        hi = np.minimum.reduce([np.broadcast_to(centers, (len(y), N)),
                                np.full((len(y), N), d_hi), np.broadcast_to(k_hi[:, None], (len(y), N))])
        empty = hi <= lo
        hi = np.where(empty, lo, hi)
        z_lo = gamma * (a[:, None] - hi) / sigma
        z_hi = gamma * (a[:, None] - lo) / sigma
        mom = self._moments(z_lo, z_hi, s + 1)
        A = (a[:, None] - centers[None, :]) / R_star
        Bc = -sigma / (gamma * R_star)
        scale = 1.0 / (gamma * SQRT_2PI)
        I = np.zeros((len(y), N, s + 1))
        J = np.zeros_like(I)
        for n in range(s + 1):
            for j in range(n + 1):
                c = comb(n, j) * A ** (n - j) * Bc ** j
                I[:, :, n] += c * mom[..., j]
                J[:, :, n] -= c * mom[..., j + 1]
        I *= scale
        J *= scale
        I[empty] = 0.0
        J[empty] = 0.0
        return I, J

    def h_terms(self, y_t, f, t):
        """Return (h1, h4) at points (M, d) for a single condition f (d,)."""
        y_t = np.atleast_2d(np.asarray(y_t, dtype=float))
        d = self.family.d
        f = np.broadcast_to(np.asarray(f, dtype=float), (d,))
        gamma, sigma = float(self.repr.gamma(t)), float(self.repr.sigma(t))
        f_scaled = f / self.dom.R_star + 0.5
        cell_coef = self.poly.cell_coefficients(f_scaled)
        per_dim = [self._cell_integrals(y_t[:, i], f[i], gamma, sigma) for i in range(d)]
        M = len(y_t)
        h1 = np.zeros(M)
        h4 = np.zeros((M, d))
        for n, G in cell_coef.items():
            G = np.asarray(G).reshape(-1)
            I_prod = _outer_over_cells([per_dim[i][0][:, :, n[i]] for i in range(d)])
            h1 += I_prod @ G
            for k in range(d):
                mats = [per_dim[i][1 if i == k else 0][:, :, n[i]] for i in range(d)]
                h4[:, k] += _outer_over_cells(mats) @ G
        return h1, h4

    def score(self, y_t, f, t, return_parts: bool = False):
        y_t = np.atleast_2d(np.asarray(y_t, dtype=float))
        f = np.broadcast_to(np.asarray(f, dtype=float), (self.family.d,))
        gamma, sigma = float(self.repr.gamma(t)), float(self.repr.sigma(t))
        h1, h4 = self.h_terms(y_t, f, t)
        low = self.eps_low(t)
        raw = h4 / (sigma * np.maximum(h1, low)[:, None])
        k = LemmaConstants.for_family(self.family, self.dom, f)
        cap = k.score_cap(y_t, f, gamma, sigma)
        s = np.clip(raw, -cap[:, None], cap[:, None])
        if return_parts:
            return s, {"h1": h1, "h4": h4, "eps_low": low, "cap": cap, "raw": raw}
        return s


def _outer_over_cells(mats):
    """Row-wise outer product of (M, N) factors flattened to (M, N**d)."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, :, None] * m[:, None, :]).reshape(len(out), -1)
    return out


# ------------------------------------------------------------ error experiment

@dataclass
class ScalingConfig:
    s0: float = 0.7
    delta: float = 0.0
    f: float = 0.3
    f_max: float = 0.5
    beta_holder: float = 2.0
    eps: float = 1e-3
    beta_bar: float = 1.0
    N_list: tuple = (4, 8, 16, 32)
    t: float = 0.5
    t_pair: tuple = (0.3, 0.8)
    n_quad: int = 400
    max_slope: float = -1.0

    def family(self) -> SeparableFamily:
        return SeparableFamily(self.s0, self.delta, 1, self.f_max, self.beta_holder)


def weighted_score_error(approx: ScoreApproximator, oracle: QuadratureOracle, f: float,
                         t: float, n_quad: int = 400) -> float:
    """int (s_approx - grad log q)^2 q dy over [-R, R] by Gauss-Legendre panels."""
    R = approx.dom.R
    x, w = roots_legendre(20)
    panels = max(1, n_quad // 20)
    edges = np.linspace(-R, R, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    rad = 0.5 * (edges[1:] - edges[:-1])
    y = (mid[:, None] + rad[:, None] * x[None, :]).ravel()[:, None]
    wt = (rad[:, None] * w[None, :]).ravel()
    q, grad = oracle.density(y, f, t)
    true = grad[:, 0] / np.maximum(q, 1e-300)
    est = approx.score(y, f, t)[:, 0]
    return float(np.sum(wt * q * (est - true) ** 2))


def fit_slope(N_list, errors) -> float:
    return float(np.polyfit(np.log(N_list), np.log(errors), 1)[0])


def theorem2_error(cfg: ScalingConfig, t: float | None = None, N_list=None):
    """Rows (N, t, error) and the fitted log-log slope against N."""
    family = cfg.family()
    t = cfg.t if t is None else t
    N_list = tuple(cfg.N_list if N_list is None else N_list)
    dom = TruncationDomains.for_family(family, cfg.eps)
    rate = GaussianRepr(cfg.beta_bar)
    oracle = QuadratureOracle(family, rate)
    errors = []
    for N in N_list:
        approx = ScoreApproximator(family, dom, N, rate)
        errors.append(weighted_score_error(approx, oracle, cfg.f, t, cfg.n_quad))
    slope = fit_slope(N_list, errors) if len(N_list) > 1 else float("nan")
    return [(N, t, e) for N, e in zip(N_list, errors)], slope


def scaling_report(cfg: ScalingConfig = ScalingConfig()) -> tuple[dict, float]:
    """N-sweep plus time-pair comparison; returns (report, seconds)."""
    start = time.perf_counter()
    rows, slope = theorem2_error(cfg)
    errs = [r[2] for r in rows]
    t_lo, t_hi = cfg.t_pair
    pair_rows = {}
    for t in (t_lo, t_hi):
        pair_rows[t] = [r[2] for r in theorem2_error(cfg, t)[0]]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    t_trend = all(hi <= lo for lo, hi in zip(pair_rows[t_lo], pair_rows[t_hi]))
    checks = {
        "strictly_decreasing": bool(decreasing),
        "slope": bool(slope <= cfg.max_slope),
        "time_trend": bool(t_trend),
    }
    return {
        "family": cfg.family().name,
        "beta_family": cfg.beta_holder,
        "rows": [{"N": N, "t": t, "error_L2": e} for N, t, e in rows],
        "t_pair": {str(t): v for t, v in pair_rows.items()},
        "slope_fit": slope,
        "checks": checks,
        "passed": all(checks.values()),
    }, time.perf_counter() - start


def write_csv(path, report: dict, comment: str | None = None) -> None:
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("N,t,beta_family,error_L2,slope_fit\n")
        rows = list(report["rows"])
        for t, errs in report["t_pair"].items():
            rows += [{"N": r["N"], "t": float(t), "error_L2": e}
                     for r, e in zip(report["rows"], errs)]
        for r in rows:
            fh.write(f"{r['N']},{r['t']!r},{report['beta_family']!r},{r['error_L2']!r},"
                     f"{report['slope_fit']!r}\n")
