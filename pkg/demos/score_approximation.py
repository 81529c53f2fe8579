"""Local Taylor score approximation: error against grid resolution N.

The approximant is built cell by cell from derivatives of the diffused
density and compared with a quadrature oracle under the marginal density.
"""
import numpy as np

from cardlab import score_approx as sa

cfg = sa.ScalingConfig()
report, secs = sa.scaling_report(cfg)
for row in report["rows"]:
    print(f"N={row['N']:>3}  t={row['t']}  weighted L2 error {row['error_L2']:.4g}")
print(f"log-log slope {report['slope_fit']:.2f}, checks {report['checks']} ({secs:.1f}s)")

# pointwise view at one time, finest grid
family = cfg.family()
dom = sa.TruncationDomains.for_family(family, cfg.eps)
rate = sa.GaussianRepr(cfg.beta_bar)
approx = sa.ScoreApproximator(family, dom, 32, rate)
oracle = sa.QuadratureOracle(family, rate)
y = np.linspace(-2, 2, 9)[:, None]
q, grad = oracle.density(y, cfg.f, cfg.t)
s = approx.score(y, cfg.f, cfg.t)
for yi, si, ti in zip(y[:, 0], s[:, 0], grad[:, 0] / q):
    print(f"y={yi:+.2f}  approx {si:+.4f}  exact {ti:+.4f}")
