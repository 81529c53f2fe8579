"""CARD conditional diffusion: schedule, forward/posterior maps, sampling, training.

Discrete steps are integers ``t = 0..T`` with ``alpha_bar[0] = 1``. Continuous
time ``tc`` lives in ``[0, 1]`` and maps to step ``tc * T``; the continuous
rate is ``beta_cont(tc) = T * beta_t`` linearly interpolated between steps.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import nn
from .datasets import Samples


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 20
    beta_min: float = 1e-5
    beta_max: float = 1e-2

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 < self.beta_min < self.beta_max < 1.0:
            raise ValueError("need 0 < beta_min < beta_max < 1")
        if self.T == 1:
            logits = np.zeros(1)
        else:
            logits = np.linspace(-6.0, 6.0, self.T)
        beta = self.beta_min + (self.beta_max - self.beta_min) * expit(logits)
        alpha = 1.0 - beta
        # index 0 is the data end, so alpha_bar[t] lines up with step t
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        object.__setattr__(self, "beta", np.concatenate([[0.0], beta]))
        object.__setattr__(self, "alpha", np.concatenate([[1.0], alpha]))
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def _check_step(self, t, lo=0):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T) or not np.issubdtype(t.dtype, np.integer):
            raise ValueError(f"step must be an integer in [{lo}, {self.T}]")
        return t

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bar[self._check_step(t)])

    def beta_cont(self, tc):
        knots = np.arange(1, self.T + 1) / self.T
        return np.interp(tc, knots, self.T * self.beta[1:])

    def alpha_bar_cont(self, tc):
        return np.interp(np.asarray(tc) * self.T, np.arange(self.T + 1), self.alpha_bar)

    def sigma_cont(self, tc):
        return np.sqrt(1.0 - self.alpha_bar_cont(tc))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}


def schedule_new(T: int = 20, beta_min: float = 1e-5, beta_max: float = 1e-2) -> NoiseSchedule:
    return NoiseSchedule(T, beta_min, beta_max)


@dataclass(frozen=True)
class ConstantRate:
    """Continuous-time process with constant rate ``beta_bar``."""

    beta_bar: float = 1.0

    def beta(self, t):
        return np.full_like(np.asarray(t, dtype=float), self.beta_bar)

    __call__ = beta

    def gamma(self, t):
        return np.exp(-0.5 * self.beta_bar * np.asarray(t, dtype=float))

    def sigma(self, t):
        return np.sqrt(-np.expm1(-self.beta_bar * np.asarray(t, dtype=float)))


def _col(a):
    """Broadcast a per-row scalar against (n, d) arrays."""
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def forward_mean(schedule: NoiseSchedule, y0, f, t):
    sab = _col(np.sqrt(schedule.alpha_bar[schedule._check_step(t)]))
    return sab * y0 + (1.0 - sab) * f


def forward_marginal_sample(schedule: NoiseSchedule, y0, f, t, rng):
    """Draw ``y_t`` from the closed-form marginal; returns ``(y_t, eps)``."""
    y0 = np.asarray(y0, dtype=float)
    eps = rng.standard_normal(y0.shape)
    sig = _col(schedule.sigma(t))
    return forward_mean(schedule, y0, f, t) + sig * eps, eps


def posterior_coefficients(schedule: NoiseSchedule, t):
    t = schedule._check_step(t, lo=2)
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    b, a = schedule.beta[t], schedule.alpha[t]
    c_y0 = b * np.sqrt(ab_prev) / (1.0 - ab)
    c_yt = (1.0 - ab_prev) * np.sqrt(a) / (1.0 - ab)
    c_f = 1.0 + (np.sqrt(ab) - 1.0) * (np.sqrt(a) + np.sqrt(ab_prev)) / (1.0 - ab)
    beta_tilde = (1.0 - ab_prev) * b / (1.0 - ab)
    return c_y0, c_yt, c_f, beta_tilde


def posterior_mean(schedule: NoiseSchedule, y_t, y0, f, t):
    """Mean and variance of q(y_{t-1} | y_t, y0, f) for ``t >= 2``."""
    c_y0, c_yt, c_f, beta_tilde = posterior_coefficients(schedule, t)
    mu = _col(c_y0) * y0 + _col(c_yt) * y_t + _col(c_f) * f
    return mu, beta_tilde


def reconstruct_y0(schedule: NoiseSchedule, y_t, f, eps_hat, t):
    ab = _col(schedule.alpha_bar[schedule._check_step(t, lo=1)])
    return (y_t - (1.0 - np.sqrt(ab)) * f - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def score_from_eps(schedule: NoiseSchedule, eps_hat, t):
    return -np.asarray(eps_hat) / _col(schedule.sigma(schedule._check_step(t, lo=1)))


def score_matching_residual(schedule: NoiseSchedule, eps_hat, eps, t):
    """Squared gap between the implied score and the conditional score -eps/sigma."""
    diff = score_from_eps(schedule, eps_hat, t) - score_from_eps(schedule, eps, t)
    return np.sum(diff ** 2, axis=-1)


@dataclass
class CardModel:
    f_net: nn.DenseNet
    eps_net: nn.DenseNet
    schedule: NoiseSchedule
    n_classes: int

    def __post_init__(self):
        y_dim = self.f_net.n_out
        if self.eps_net.n_in != 2 * y_dim + 1:
            raise ValueError("eps_net input must be dim(y) + dim(f) + 1")

    def cond_mean(self, x):
        return self.f_net(nn.one_hot(x, self.n_classes))

    def predict_eps(self, y, f, tc):
        """Noise prediction at continuous time ``tc`` (scalar or per row)."""
        y = np.asarray(y, dtype=float)
        tcol = np.broadcast_to(np.asarray(tc, dtype=float), (y.shape[0],))[:, None]
        return self.eps_net(np.hstack([y, f, tcol]))

    def score(self, y, f, tc):
        return -self.predict_eps(y, f, tc) / _col(self.schedule.sigma_cont(tc))

    def with_eps_net(self, eps_net: nn.DenseNet) -> "CardModel":
        return CardModel(self.f_net, eps_net, self.schedule, self.n_classes)

    def to_dict(self) -> dict:
        return {
            "schema": "cardlab.card/1",
            "schedule": self.schedule.to_dict(),
            "n_classes": self.n_classes,
            "f_net": nn.net_to_dict(self.f_net),
            "eps_net": nn.net_to_dict(self.eps_net),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CardModel":
        if data.get("schema") != "cardlab.card/1":
            raise ValueError(f"unsupported model schema {data.get('schema')!r}")
        return cls(nn.net_from_dict(data["f_net"]), nn.net_from_dict(data["eps_net"]),
                   NoiseSchedule(**data["schedule"]), int(data["n_classes"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "CardModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Trajectory:
    steps: np.ndarray  # (T + 1, n, d); steps[t] holds y_t
    f: np.ndarray
    x: np.ndarray

    def at(self, t: int) -> np.ndarray:
        return self.steps[t]

    def write_csv(self, path, comment: str | None = None) -> None:
        T1, n, _ = self.steps.shape
        step = np.repeat(np.arange(T1), n)
        chain = np.tile(np.arange(n), T1)
        flat = self.steps.reshape(-1, self.steps.shape[2])
        with open(path, "w") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            fh.write("step,chain,y1,y2\n")
            for s, c, (a, b) in zip(step, chain, flat):
                fh.write(f"{s},{c},{float(a)!r},{float(b)!r}\n")


def reverse_sample(model: CardModel, x, rng, n: int | None = None, y_T=None,
                   eps_fn=None) -> Trajectory:
    """Ancestral sampling from y_T ~ N(f, I) down to a deterministic y_0.

    ``x`` is a label per chain, or a single label repeated ``n`` times.
    ``eps_fn(y, f, t)`` replaces the network (t is the integer step).
    """
    x = np.asarray(x, dtype=int)
    if x.ndim == 0:
        if n is None or n < 1:
            raise ValueError("n >= 1 required with a scalar label")
        x = np.full(n, int(x))
    sched = model.schedule
    T = sched.T
    f = model.cond_mean(x)
    if eps_fn is None:
        def eps_fn(y, f_, t):
            return model.predict_eps(y, f_, t / T)
    y = f + rng.standard_normal(f.shape) if y_T is None else np.array(y_T, dtype=float)
    steps = np.empty((T + 1,) + y.shape)
    steps[T] = y
    for t in range(T, 0, -1):
        y0_hat = reconstruct_y0(sched, y, f, eps_fn(y, f, t), t)
        if t == 1:
            y = y0_hat
        else:
            mu, bt = posterior_mean(sched, y, y0_hat, f, t)
            y = mu + np.sqrt(bt) * rng.standard_normal(y.shape)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite sample produced at step {t}")
        steps[t - 1] = y
    return Trajectory(steps, f, x)


def _check_dt(dt):
    if dt <= 0:
        raise ValueError("dt must be positive")


def sde_forward_step(y, f, beta_fn, t, dt, rng=None, z=None):
    """One Euler-Maruyama step of dy = -(beta/2)(y - f) dt + sqrt(beta) dw."""
    _check_dt(dt)
    b = beta_fn(t)
    if z is None:
        z = rng.standard_normal(np.shape(y))
    return y - 0.5 * b * (y - f) * dt + np.sqrt(b * dt) * z


def sde_reverse_step(y, f, score_fn, beta_fn, t, dt, rng=None, z=None):
    """Step the reverse-time SDE from ``t`` to ``t - dt``.

    Uses drift ``-(beta/2)(y - f) - beta * s`` integrated backwards, i.e.
    ``y + [(y - f)/2 + s] beta dt + sqrt(beta dt) z``.
    """
    _check_dt(dt)
    b = beta_fn(t)
    if z is None:
        z = rng.standard_normal(np.shape(y))
    return y + (0.5 * (y - f) + score_fn(y, f, t)) * b * dt + np.sqrt(b * dt) * z


def ode_drift(y, f, score_fn, beta_fn, t):
    b = beta_fn(t)
    return -0.5 * b * (y - f) - 0.5 * b * score_fn(y, f, t)


def ode_flow_step(y, f, score_fn, beta_fn, t, dt, substeps: int = 1, backward: bool = False):
    """RK4 on the probability-flow ODE from ``t`` to ``t + dt`` (or ``t - dt``)."""
    _check_dt(dt)
    h = (-dt if backward else dt) / substeps
    for i in range(substeps):
        s = t + i * h
        k1 = ode_drift(y, f, score_fn, beta_fn, s)
        k2 = ode_drift(y + 0.5 * h * k1, f, score_fn, beta_fn, s + 0.5 * h)
        k3 = ode_drift(y + 0.5 * h * k2, f, score_fn, beta_fn, s + 0.5 * h)
        k4 = ode_drift(y + h * k3, f, score_fn, beta_fn, s + h)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


@dataclass
class TrainResult:
    model: CardModel
    losses: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)


def train_card(model: CardModel, samples: Samples, epochs: int, batch: int = 128,
               seed: int = 0, lr: float = 1e-4, checkpoint_epochs=(),
               trainable=None) -> TrainResult:
    """Minimise mean ||eps_hat - eps||^2 over random steps; f_net stays frozen.

    ``checkpoint_epochs`` may include 0 for the untrained state. ``trainable``
    restricts updates to the given layer indices (all layers by default).
    """
    sched = model.schedule
    f_all = model.cond_mean(samples.x)
    y_all = samples.y
    n = len(samples)
    state = nn.AdamState.for_net(model.eps_net, lr=lr)
    frozen = set()
    if trainable is not None:
        frozen = set(range(len(model.eps_net.layers))) - set(trainable)
    result = TrainResult(model)
    wanted = set(checkpoint_epochs)
    if 0 in wanted:
        result.checkpoints[0] = model.eps_net.copy()
    for epoch in range(1, epochs + 1):
        rng = nn.epoch_rng(seed, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            y_t, eps = forward_marginal_sample(sched, y_all[idx], f_all[idx], t, rng)
            inp = np.hstack([y_t, f_all[idx], (t / sched.T)[:, None]])
            out, cache = nn.forward(model.eps_net, inp)
            resid = out - eps
            loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            if not np.isfinite(loss):
                raise nn.DivergenceError(f"non-finite CARD loss at epoch {epoch}")
            grads, _ = nn.backward(model.eps_net, cache, 2.0 * resid / len(idx))
            for k in frozen:
                grads[2 * k] = np.zeros_like(grads[2 * k])
                grads[2 * k + 1] = np.zeros_like(grads[2 * k + 1])
            nn.adam_step(model.eps_net, state, grads)
            total += loss * len(idx)
        result.losses.append(total / n)
        if epoch in wanted:
            result.checkpoints[epoch] = model.eps_net.copy()
    return result
