"""Independent reference computations shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np

from cardlab import nn

ACTS = [nn.Activation.SIGMOID, nn.Activation.SOFTPLUS, nn.Activation.IDENTITY]


def naive_forward(net, x):
    """Row-by-row loops with scalar activations, no vectorised matmul."""
    out = []
    for row in np.atleast_2d(x):
        a = list(row)
        for layer in net.layers:
            z = [sum(w * v for w, v in zip(wr, a)) + b for wr, b in zip(layer.W, layer.b)]
            if layer.activation is nn.Activation.SIGMOID:
                a = [1 / (1 + math.exp(-v)) for v in z]
            elif layer.activation is nn.Activation.SOFTPLUS:
                a = [math.log1p(math.exp(-abs(v))) + max(v, 0.0) for v in z]
            else:
                a = z
        out.append(a)
    return np.array(out)


def random_triple(rng):
    """A random (net, batch, target) for a squared loss."""
    depth = int(rng.integers(1, 4))
    sizes = [int(s) for s in rng.integers(1, 7, size=depth + 1)]
    acts = [ACTS[int(i)] for i in rng.integers(0, 3, size=depth)]
    net = nn.init_net(sizes, acts, rng)
    for layer in net.layers:
        layer.W *= rng.uniform(0.5, 3.0)
    x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
    target = rng.normal(size=(x.shape[0], sizes[-1]))
    return net, x, target


def squared_loss(net, x, target):
    return 0.5 * float(np.sum((net(x) - target) ** 2))


def fd_relative_error(net, x, target, h=1e-5):
    """Largest relative gap between backprop and central differences."""
    out, cache = nn.forward(net, x)
    grads, _ = nn.backward(net, cache, out - target)
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = squared_loss(net, x, target)
            p[idx] = keep - h
            down = squared_loss(net, x, target)
            p[idx] = keep
            num = (up - down) / (2 * h)
            # the floor only guards 0/0 on exactly-zero gradients
            scale = max(abs(num), abs(g[idx]), 1e-12)
            worst = max(worst, abs(num - g[idx]) / scale)
    return worst


def brute_force_w2(a, b):
    n = len(a)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(float(np.sum((a[i] - b[j]) ** 2)) for i, j in enumerate(perm)))
    return math.sqrt(best / n)


def exp_remainder(p, u):
    """|sum_{k<p} (-u)^k/k! - e^{-u}| with exact rational partial sums."""
    from fractions import Fraction

    uf = Fraction(u)
    partial = sum(Fraction((-1) ** k) * uf ** k / math.factorial(k) for k in range(p))
    return abs(float(partial) - math.exp(-u))


def gaussian_sampler_variance(schedule, v, start_var=1.0):
    """Per-coordinate variance of the ancestral sampler output for N(0, v) data, f = 0,
    when the noise predictor is the exact posterior mean E[eps | y_t].

    Every map in the chain is linear, so the variance propagates in closed form.
    """
    P = start_var
    for t in range(schedule.T, 0, -1):
        ab = schedule.alpha_bar[t]
        sig = math.sqrt(1 - ab)
        k = sig / (ab * v + sig * sig)
        r = (1 - sig * k) / math.sqrt(ab)
        if t == 1:
            return r * r * P
        ab_prev = schedule.alpha_bar[t - 1]
        b, a = schedule.beta[t], schedule.alpha[t]
        c_y0 = b * math.sqrt(ab_prev) / (1 - ab)
        c_yt = (1 - ab_prev) * math.sqrt(a) / (1 - ab)
        bt = (1 - ab_prev) * b / (1 - ab)
        P = (c_y0 * r + c_yt) ** 2 * P + bt
    return P


def optimal_eps_fn(schedule, v):
    """E[eps | y_t] for N(0, v) data and f = 0, as an eps_fn(y, f, t) callback."""
    def fn(y, f, t):
        ab = schedule.alpha_bar[t]
        sig = math.sqrt(1 - ab)
        return sig / (ab * v + sig * sig) * (y - f)
    return fn


def zero_mean_net(n_classes=1, d=2):
    return nn.DenseNet([nn.Layer(np.zeros((d, n_classes)), np.zeros(d))])
