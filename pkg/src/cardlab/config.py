"""Experiment configuration: a small TOML file checked against a fixed schema.

Precedence, lowest first: built-in defaults, the config file, environment
variables, command-line flags. Environment overrides use the prefix
``CARDLAB_``: ``CARDLAB_SEED=3``, ``CARDLAB_OUT=runs/a`` and
``CARDLAB_<SECTION>__<KEY>=value`` (value parsed as a TOML literal, falling
back to a bare string), e.g. ``CARDLAB_TRAIN__CARD_EPOCHS=200``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import re
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "CARDLAB_"

# section -> key -> (type, default); "list" holds numbers
SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "": {"seed": ("int", 0), "out": ("str", "results")},
    "dataset": {
        "kinds": ("strlist", ["gaussian", "moons", "mixture", "circles"]),
        "n": ("int", 2000),
        "noise_sd": ("float", 0.05),
        "inner_factor": ("float", 0.5),
    },
    "schedule": {"T": ("int", 20), "beta_min": ("float", 1e-5), "beta_max": ("float", 1e-2)},
    "train": {
        "pretrain_epochs": ("int", 500),
        "card_epochs": ("int", 2000),
        "checkpoints": ("intlist", [0, 1, 2, 5, 10, 20, 50, 100, 200, 300, 500, 700, 1000,
                                    1500, 2000]),
        "checkpoint_stride": ("int", 0),
        "batch": ("int", 128),
        "lr": ("float", 1e-4),
    },
    "bounds": {
        "n_w2": ("int", 500),
        "n_grid": ("int", 200),
        "n_mc": ("int", 512),
        "n_pairs": ("int", 2048),
        "l2_max": ("float", 50.0),
        "min_dominance": ("float", 0.95),
        "min_spearman": ("float", 0.8),
        "max_product_ratio": ("float", 0.1),
        "min_nonincreasing": ("float", 0.8),
    },
    "fpcheck": {
        "f": ("float", 0.5),
        "mean0": ("float", -0.5),
        "var0": ("float", 0.25),
        "beta_bar": ("float", 1.0),
        "t_end": ("float", 1.0),
        "ny": ("int", 400),
        "half_width": ("float", 8.0),
        "scheme": ("str", "exponential_fit"),
        "n_paths": ("int", 100_000),
        "mc_substeps": ("int", 200),
        "probes": ("list", [0.25, 0.5, 1.0]),
        "refine_ny": ("intlist", [100, 200, 400]),
    },
    "scoreapprox": {
        "s0": ("float", 0.7),
        "delta": ("float", 0.0),
        "f": ("float", 0.3),
        "f_max": ("float", 0.5),
        "beta_holder": ("float", 2.0),
        "eps": ("float", 1e-3),
        "beta_bar": ("float", 1.0),
        "N_list": ("intlist", [4, 8, 16, 32]),
        "t": ("float", 0.5),
        "t_pair": ("list", [0.3, 0.8]),
        "max_slope": ("float", -1.0),
    },
}


class ConfigError(ValueError):
    """Bad config file, override or value; the message carries a location."""


def defaults() -> dict:
    out = {}
    for section, keys in SCHEMA.items():
        vals = {k: copy.deepcopy(d) for k, (_, d) in keys.items()}
        if section:
            out[section] = vals
        else:
            out.update(vals)
    return out


def _locate(text: str | None, section: str, key: str | None) -> str:
    if not text:
        return ""
    current = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if key is None and current == section:
                return f" (line {lineno})"
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return f" (line {lineno})"
    return ""


def _coerce(kind: str, value, where: str):
    def bad():
        return ConfigError(f"{where}: expected {kind}, got {value!r}")

    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if not isinstance(value, list):
        raise bad()
    item = {"strlist": "str", "intlist": "int", "list": "float"}[kind]
    return [_coerce(item, v, where) for v in value]


def validate(raw: dict, text: str | None = None, source: str = "config") -> dict:
    """Merge ``raw`` over the defaults, rejecting unknown keys and bad types."""
    cfg = defaults()
    for name, value in raw.items():
        if name in SCHEMA[""]:
            kind = SCHEMA[""][name][0]
            cfg[name] = _coerce(kind, value, f"{source}{_locate(text, '', name)}: {name}")
            continue
        if name not in SCHEMA or not name:
            raise ConfigError(f"{source}{_locate(text, name, None) or _locate(text, '', name)}: "
                              f"unknown section or key {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"{source}{_locate(text, '', name)}: {name!r} must be a table")
        for key, v in value.items():
            where = f"{source}{_locate(text, name, key)}: {name}.{key}"
            if key not in SCHEMA[name]:
                raise ConfigError(f"{where}: unknown key")
            cfg[name][key] = _coerce(SCHEMA[name][key][0], v, where)
    check_values(cfg, text, source)
    return cfg


def check_values(cfg: dict, text: str | None = None, source: str = "config") -> None:
    from .datasets import Kind

    def fail(section, key, msg):
        raise ConfigError(f"{source}{_locate(text, section, key)}: {section}.{key}: {msg}")

    for k in cfg["dataset"]["kinds"]:
        if k not in {m.value for m in Kind}:
            fail("dataset", "kinds", f"unknown dataset {k!r}")
    for section, key in [("dataset", "n"), ("schedule", "T"), ("train", "batch"),
                         ("bounds", "n_w2"), ("bounds", "n_grid"), ("fpcheck", "ny"),
                         ("fpcheck", "n_paths")]:
        if cfg[section][key] < 1:
            fail(section, key, "must be >= 1")
    for key in ("pretrain_epochs", "card_epochs", "checkpoint_stride"):
        if cfg["train"][key] < 0:
            fail("train", key, "must be >= 0")
    if any(e < 0 or e > cfg["train"]["card_epochs"] for e in cfg["train"]["checkpoints"]):
        fail("train", "checkpoints", "epochs must lie in [0, card_epochs]")
    if cfg["fpcheck"]["scheme"] not in ("upwind", "exponential_fit"):
        fail("fpcheck", "scheme", "must be 'upwind' or 'exponential_fit'")
    if not 0 < cfg["scoreapprox"]["eps"] < 1 / math.e:
        fail("scoreapprox", "eps", "must lie in (0, 1/e)")
    if len(cfg["scoreapprox"]["t_pair"]) != 2:
        fail("scoreapprox", "t_pair", "needs exactly two times")


def _parse_env_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    raw: dict = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        value = _parse_env_value(text)
        if "__" in key:
            section, sub = key.split("__", 1)
            # keys are matched case-insensitively against the schema
            real = {k.lower(): k for k in SCHEMA.get(section, {})}.get(sub, sub)
            raw.setdefault(section, {})[real] = value
        else:
            raw[key] = value
    return raw


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path=None, environ=None, seed: int | None = None, out: str | None = None) -> dict:
    """Resolve the full configuration; raises ConfigError with a position."""
    raw, text, source = {}, None, "config"
    if path is not None:
        source = str(path)
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read ({exc.strerror})") from exc
        text = data.decode("utf-8", errors="replace")
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
    cfg = validate(raw, text, source)
    env = env_overrides(environ)
    if env:
        cfg = validate(_deep_merge(cfg, env), None, "environment")
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


def config_hash(cfg: dict) -> str:
    """Short digest of everything that affects results (the output dir does not)."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def csv_comment(cfg: dict, what: str) -> str:
    return f"cardlab {what} config={config_hash(cfg)} seed={cfg['seed']}"
