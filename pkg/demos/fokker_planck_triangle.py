"""Cross-check the density PDE, particle simulation and probability-flow ODE.

A Gaussian start under a constant noise rate has a closed-form marginal, so
every solver can be compared against it and against each other.
"""
import json

from cardlab import fokker_planck as fp

report, secs = fp.consistency_report()
print(json.dumps({k: v for k, v in report.items() if k != "grid"}, indent=2))
print(f"grid {report['grid']}, finished in {secs:.1f}s")

# the naive upwind discretisation is first order and needs a much finer mesh
upwind, _ = fp.consistency_report(fp.FPCheckConfig(scheme=fp.Scheme.UPWIND))
print("upwind refinement ratios:", [round(r, 2) for r in upwind["refinement"]["ratios"]])
print("upwind passes:", upwind["passed"])
