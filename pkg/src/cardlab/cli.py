"""Command-line driver.

Exit codes: 0 when every check passes, 1 when a check fails (or a run
diverges), 2 for config and I/O errors including missing checkpoints.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import datasets, diffusion, experiment, fokker_planck, nn, score_approx, transport
from .bounds import CSV_COLUMNS

log = logging.getLogger("cardlab")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


class MissingArtifact(FileNotFoundError):
    pass


def _write_rows(path: Path, header, rows, comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _ckpt_path(out: Path, kind: str, epoch: int) -> Path:
    return out / f"card_{kind}_e{epoch}.json"


def _manifest_path(out: Path, kind: str) -> Path:
    return out / f"train_{kind}.json"


# ---------------------------------------------------------------- stages

def stage_pretrain(cfg, out: Path) -> int:
    for kind in cfg["dataset"]["kinds"]:
        t0 = time.perf_counter()
        samples = experiment.make_samples(cfg, kind)
        datasets.write_csv(samples, out / f"data_{kind}.csv", cfgmod.csv_comment(cfg, "data"))
        pre = experiment.pretrain(cfg, samples)
        nn.save_net(pre.net, out / f"fnet_{kind}.json")
        _write_rows(out / f"pretrain_{kind}.csv", ["epoch", "mse"],
                    [(i + 1, v) for i, v in enumerate(pre.losses)],
                    cfgmod.csv_comment(cfg, "pretrain"))
        log.info("pretrain %s: mse %.4g (%.1fs)", kind, pre.final_mse, time.perf_counter() - t0)
    return EXIT_OK


def _load_fnet(cfg, out: Path, kind: str):
    path = out / f"fnet_{kind}.json"
    if not path.exists():
        raise MissingArtifact(f"{path}: missing pretrained mean network; run 'cardlab pretrain'")
    return nn.load_net(path)


def stage_train(cfg, out: Path) -> int:
    for kind in cfg["dataset"]["kinds"]:
        t0 = time.perf_counter()
        samples = experiment.make_samples(cfg, kind)
        model, res = experiment.train(cfg, samples, _load_fnet(cfg, out, kind))
        for epoch, net in res.checkpoints.items():
            model.with_eps_net(net).save(_ckpt_path(out, kind, epoch))
        _write_rows(out / f"train_{kind}.csv", ["epoch", "loss"],
                    [(i + 1, v) for i, v in enumerate(res.losses)],
                    cfgmod.csv_comment(cfg, "train"))
        _write_json(_manifest_path(out, kind), {"config": cfgmod.config_hash(cfg),
                                                 "checkpoints": sorted(res.checkpoints)})
        log.info("train %s: final loss %.4g (%.1fs)", kind, res.losses[-1] if res.losses else
                 float("nan"), time.perf_counter() - t0)
    return EXIT_OK


def _load_checkpoints(cfg, out: Path, kind: str) -> dict:
    manifest = _manifest_path(out, kind)
    if not manifest.exists():
        raise MissingArtifact(f"{manifest}: missing checkpoints; run 'cardlab train'")
    info = json.loads(manifest.read_text())
    if info.get("config") != cfgmod.config_hash(cfg):
        log.warning("%s was written by a different config", manifest)
    ckpts = {}
    for epoch in info["checkpoints"]:
        path = _ckpt_path(out, kind, epoch)
        if not path.exists():
            raise MissingArtifact(f"{path}: missing checkpoint")
        ckpts[epoch] = diffusion.CardModel.load(path)
    return ckpts


def stage_generate(cfg, out: Path, untrained: bool = False) -> int:
    summary = {}
    n = cfg["bounds"]["n_w2"]
    for kind in cfg["dataset"]["kinds"]:
        samples = experiment.make_samples(cfg, kind)
        datasets.write_csv(samples, out / f"data_{kind}.csv", cfgmod.csv_comment(cfg, "data"))
        if untrained:
            rng = np.random.Generator(np.random.PCG64([cfg["seed"], 5]))
            f_net = nn.cond_mean_net(samples.n_classes, rng, samples.y.shape[1])
            model = experiment.untrained_model(cfg, samples, f_net)
        else:
            ckpts = _load_checkpoints(cfg, out, kind)
            model = ckpts[max(ckpts)]
        sub = samples.subset(np.arange(min(n, len(samples))))
        rng = np.random.Generator(np.random.PCG64([cfg["seed"], 6]))
        gen = diffusion.reverse_sample(model, sub.x, rng).at(0)
        datasets.write_csv(datasets.Samples(gen, sub.x, samples.n_classes),
                           out / f"generated_{kind}.csv", cfgmod.csv_comment(cfg, "generated"))
        w2 = transport.w2_exact(sub.y, gen)[0]
        summary[kind] = {"W2": w2, "n": len(sub), "untrained": untrained}
        log.info("generate %s: W2 %.4f", kind, w2)
    _write_json(out / "generate.json", summary)
    return EXIT_OK


def stage_bounds(cfg, out: Path) -> int:
    rows, prod_rows, summary = [], [], {}
    for kind in cfg["dataset"]["kinds"]:
        t0 = time.perf_counter()
        samples = experiment.make_samples(cfg, kind)
        res = experiment.evaluate(cfg, samples, _load_checkpoints(cfg, out, kind))
        for r in res.reports:
            rows.append([kind] + list(r.row().values()))
        prod_rows += [[kind, *row] for row in res.product]
        summary[kind] = {
            "spearman": res.spearman,
            "dominance": res.dominance,
            "thm1_le_cor1": res.thm1_le_cor1,
            "product_ratio": res.product_ratio,
            "product_nonincreasing": res.nonincreasing,
            "checks": res.checks,
            "passed": all(res.checks.values()),
        }
        log.info("bounds %s: %s (%.1fs)", kind, res.checks, time.perf_counter() - t0)
    _write_rows(out / "bounds.csv", ["dataset", *CSV_COLUMNS], rows,
                cfgmod.csv_comment(cfg, "bounds"))
    _write_rows(out / "product_curve.csv", ["dataset", "step", "t", "M", "W2", "M_W2"],
                prod_rows, cfgmod.csv_comment(cfg, "product"))
    _write_json(out / "bounds.json", summary)
    return EXIT_OK if all(s["passed"] for s in summary.values()) else EXIT_CHECK


def fp_config(cfg) -> fokker_planck.FPCheckConfig:
    c = dict(cfg["fpcheck"])
    c["probes"] = tuple(c["probes"])
    c["refine_ny"] = tuple(c["refine_ny"])
    return fokker_planck.FPCheckConfig(**c, seed=cfg["seed"])


def stage_fpcheck(cfg, out: Path) -> int:
    fcfg = fp_config(cfg)
    try:
        report, secs = fokker_planck.consistency_report(fcfg)
    except (fokker_planck.CFLError, fokker_planck.MassDriftError) as exc:
        _write_json(out / "fpcheck.json", {"passed": False, "error": str(exc)})
        log.error("fpcheck failed: %s", exc)
        return EXIT_CHECK
    rate = diffusion.ConstantRate(fcfg.beta_bar)
    grid = fokker_planck.Grid1D.around(fcfg.f, fcfg.ny, fcfg.beta_bar, fcfg.half_width,
                                       scheme=fcfg.scheme)
    q0 = fokker_planck.gaussian_cells(grid, fcfg.mean0, fcfg.var0)
    sol = fokker_planck.fp_forward_solve(grid, q0, fcfg.f, rate, fcfg.t_end,
                                         record_times=fcfg.probes)
    fokker_planck.write_snapshots(out / "fp_snapshots.csv", grid,
                                  [fokker_planck.DensityField(q0, grid.dy, 0.0), *sol.fields],
                                  cfgmod.csv_comment(cfg, "fp"))
    fokker_planck.write_report(out / "fpcheck.json", report)
    log.info("fpcheck: %s (%.1fs)", report["checks"], secs)
    return EXIT_OK if report["passed"] else EXIT_CHECK


def scaling_config(cfg) -> score_approx.ScalingConfig:
    c = dict(cfg["scoreapprox"])
    c["N_list"] = tuple(c["N_list"])
    c["t_pair"] = tuple(c["t_pair"])
    return score_approx.ScalingConfig(**c)


def stage_scoreapprox(cfg, out: Path) -> int:
    report, secs = score_approx.scaling_report(scaling_config(cfg))
    score_approx.write_csv(out / "score_approx.csv", report, cfgmod.csv_comment(cfg, "scoreapprox"))
    _write_json(out / "scoreapprox.json", report)
    log.info("scoreapprox: slope %.3f %s (%.1fs)", report["slope_fit"], report["checks"], secs)
    return EXIT_OK if report["passed"] else EXIT_CHECK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="cardlab", description=__doc__.splitlines()[0],
                                epilog="Environment overrides: CARDLAB_SEED, CARDLAB_OUT, "
                                       "CARDLAB_<SECTION>__<KEY>.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("pretrain", "fit the conditional mean networks"),
                        ("train", "train the noise networks and save checkpoints"),
                        ("bounds", "evaluate the W2 bounds on saved checkpoints"),
                        ("fpcheck", "Fokker-Planck / SDE / ODE consistency checks"),
                        ("scoreapprox", "score approximation error sweep over N"),
                        ("all", "every stage in order")]:
        sub.add_parser(name, parents=[common], help=help_)
    gen = sub.add_parser("generate", parents=[common], help="write data and generated clouds")
    gen.add_argument("--untrained", action="store_true",
                     help="sample from freshly initialised networks (diagnostic)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, out=args.out)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "pretrain":
            return stage_pretrain(cfg, out)
        if cmd == "train":
            return stage_train(cfg, out)
        if cmd == "generate":
            return stage_generate(cfg, out, args.untrained)
        if cmd == "bounds":
            return stage_bounds(cfg, out)
        if cmd == "fpcheck":
            return stage_fpcheck(cfg, out)
        if cmd == "scoreapprox":
            return stage_scoreapprox(cfg, out)
        codes = [stage_pretrain(cfg, out), stage_train(cfg, out), stage_generate(cfg, out),
                 stage_bounds(cfg, out), stage_fpcheck(cfg, out), stage_scoreapprox(cfg, out)]
        return max(codes)
    except (nn.DivergenceError, FloatingPointError) as exc:
        log.error("run diverged: %s", exc)
        return EXIT_CHECK
    except (cfgmod.ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
