"""End-to-end CARD runs: data, pretraining, diffusion training, bound evaluation.

Seeds derive from one master seed so a config plus seed fixes every number:
data ``seed``, pretraining ``seed + 1``, eps-net init ``seed + 2``, CARD
training ``seed + 3``, bound evaluation ``seed + 4``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import bounds, datasets, diffusion, nn


@dataclass
class Run:
    kind: str
    samples: datasets.Samples
    pretrain: nn.PretrainResult
    model: diffusion.CardModel
    losses: list
    checkpoints: dict = field(default_factory=dict)  # epoch -> CardModel

    @property
    def final(self) -> diffusion.CardModel:
        return self.checkpoints[max(self.checkpoints)] if self.checkpoints else self.model


def checkpoint_epochs(train_cfg: dict) -> list[int]:
    epochs = set(train_cfg["checkpoints"])
    stride = train_cfg["checkpoint_stride"]
    if stride:
        epochs.update(range(0, train_cfg["card_epochs"] + 1, stride))
    epochs.add(train_cfg["card_epochs"])
    return sorted(e for e in epochs if e <= train_cfg["card_epochs"])


def make_samples(cfg: dict, kind: str) -> datasets.Samples:
    d = cfg["dataset"]
    return datasets.generate(datasets.DatasetSpec(kind, d["n"], d["noise_sd"], cfg["seed"],
                                                  d["inner_factor"]))


def make_schedule(cfg: dict) -> diffusion.NoiseSchedule:
    s = cfg["schedule"]
    return diffusion.schedule_new(s["T"], s["beta_min"], s["beta_max"])


def pretrain(cfg: dict, samples: datasets.Samples) -> nn.PretrainResult:
    t = cfg["train"]
    return nn.pretrain_cond_mean(samples, t["pretrain_epochs"], cfg["seed"] + 1, t["lr"],
                                 t["batch"])


def untrained_model(cfg: dict, samples: datasets.Samples, f_net: nn.DenseNet):
    rng = np.random.Generator(np.random.PCG64(cfg["seed"] + 2))
    return diffusion.CardModel(f_net, nn.eps_net(rng, samples.y.shape[1]), make_schedule(cfg),
                               samples.n_classes)


def train(cfg: dict, samples: datasets.Samples, f_net: nn.DenseNet):
    t = cfg["train"]
    model = untrained_model(cfg, samples, f_net)
    res = diffusion.train_card(model, samples, t["card_epochs"], t["batch"], cfg["seed"] + 3,
                               t["lr"], checkpoint_epochs(t))
    return model, res


def run(cfg: dict, kind: str) -> Run:
    samples = make_samples(cfg, kind)
    pre = pretrain(cfg, samples)
    model, res = train(cfg, samples, pre.net)
    ckpts = {e: model.with_eps_net(net) for e, net in res.checkpoints.items()}
    return Run(kind, samples, pre, model, res.losses, ckpts)


def bound_config(cfg: dict) -> bounds.BoundConfig:
    b = cfg["bounds"]
    return bounds.BoundConfig(n_w2=b["n_w2"], n_grid=b["n_grid"], n_mc=b["n_mc"],
                              n_pairs=b["n_pairs"], l2_max=b["l2_max"], seed=cfg["seed"] + 4)


@dataclass
class BoundsOutcome:
    reports: list
    product: list          # rows (step, t, M, W2, M * W2)
    spearman: float
    dominance: float       # fraction of checkpoints with rhs_cor1 >= W2_emp
    thm1_le_cor1: bool
    product_ratio: float   # product at step T over product at step 1
    nonincreasing: float   # fraction of consecutive steps where the product does not grow
    checks: dict


def evaluate(cfg: dict, samples: datasets.Samples, checkpoints: dict) -> BoundsOutcome:
    b = cfg["bounds"]
    epochs = sorted(checkpoints)
    ev = bounds.Evaluator(checkpoints[epochs[0]], samples, bound_config(cfg))
    reports = [ev.evaluate(checkpoints[e], e) for e in epochs]
    final = checkpoints[epochs[-1]]
    prod = bounds.product_curve(final, samples, ev.lipschitz(final), n=b["n_w2"],
                                seed=cfg["seed"] + 4)
    L = np.array([r.L1_hat for r in reports])
    W = np.array([r.W2_emp for r in reports])
    rho = float(spearmanr(np.log(L), np.log(W)).correlation) if len(reports) > 2 else math.nan
    dominance = float(np.mean([r.rhs_cor1 >= r.W2_emp for r in reports]))
    ordered = all(r.rhs_thm1 <= r.rhs_cor1 for r in reports)
    values = [row[4] for row in prod]  # index 0 is step 1, last is step T
    ratio = values[-1] / values[0]
    steps_down = np.mean([b_ <= a for a, b_ in zip(values, values[1:])]) if len(values) > 1 else 1.0
    checks = {
        "bound_dominance": dominance >= b["min_dominance"],
        "thm1_le_cor1": ordered,
        "spearman": bool(rho >= b["min_spearman"]),
        "product_ratio": bool(ratio <= b["max_product_ratio"]),
        "product_nonincreasing": bool(steps_down >= b["min_nonincreasing"]),
    }
    return BoundsOutcome(reports, prod, rho, dominance, ordered, float(ratio),
                         float(steps_down), checks)
