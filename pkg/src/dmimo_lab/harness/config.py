"""Experiment configuration: presets, strict merging and hashing.

A config file is a single JSON object whose keys are a subset of the
preset's keys (nested). Unknown keys are rejected up front.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration keys."""


def _domain(coeff=31.9, shadow=0.0, rice=None, los=False):
    return {"pathloss_offset_db": 32.4, "pathloss_exponent_coeff": coeff,
            "shadowing_sigma_db": shadow, "rice_factor_db": rice, "los_phase_enabled": los}


DESK = {
    "seed": 0,
    "topology": {"M": 8, "width": 4.0, "length": 8.0, "ap_height": 2.4, "fc_ghz": 0.92},
    "source_domain": _domain(),
    "target_domain": _domain(25.0, 4.0, 5.0, True),
    "noise": {"P": 1.0, "snr_db": 10.0, "sigma2": None},
    "precoder": {"alpha": None},
    "data": {"K": 2, "n_source": 5000, "n_target": 1000, "val_fraction": 0.1, "test_fraction": 0.2},
    "model": {"n_layers": 8, "hidden_dim": 64, "leaky_slope": 0.01},
    "train": {"epochs": 30, "batch_size": 64, "learning_rate": 1e-3},
    "finetune": {"epochs": 30, "batch_size": 64, "learning_rate": 1e-3, "n_train": 500,
                 "n_tuned_layers": 2, "seeds": [0, 1, 2, 3, 4]},
    "evaluate": {"K_list": [1, 2], "n_eval": 500},
    "single_user": {"n_source": 3000, "epochs": 20, "n_target": 2000, "n_train": 500,
                    "mask": [[2.0, 4.0], [4.0, 8.0]], "cell": 0.5},
    "sweep": {"n_train": [50, 100, 200, 500], "seeds": [0, 1, 2, 3, 4]},
    "heatmap": {"schemes": ["mrt", "rps"], "M_list": [1, 5, 10, 15], "target": [3.4, 1.95],
                "resolution": 0.1, "rps_draws": 10000, "equal_gain": True, "model": None},
    "protocol": {"precoder": "mrt", "M": 8, "K": 1, "mode": "anchored", "transport": "inproc",
                 "shuffle": False, "model": None, "drop_reports": []},
}

PAPER = copy.deepcopy(DESK)
PAPER["topology"]["M"] = 33
PAPER["data"].update({"n_source": 100_000, "n_target": 500, "val_fraction": 0.05, "test_fraction": 0.05})
PAPER["train"].update({"epochs": 150, "batch_size": 256, "learning_rate": 1e-4})
PAPER["finetune"].update({"n_train": 400, "learning_rate": 1e-4})
PAPER["protocol"]["M"] = 33

PRESETS = {"desk": DESK, "paper": PAPER}


def _merge(base: dict, override: dict, path: str, unknown: list) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            unknown.append(where)
            continue
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], val, where, unknown)
        else:
            out[key] = val
    return out


def build_config(overrides: dict | None = None, preset: str = "desk", seed: int | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    overrides = overrides or {}
    if not isinstance(overrides, dict):
        raise ConfigError("config must be a JSON object")
    unknown: list[str] = []
    cfg = _merge(PRESETS[preset], overrides, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def load_config(path, preset: str = "desk", seed: int | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return build_config(doc, preset, seed)


def validate(cfg: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg["topology"]["M"] >= 1, "topology.M must be >= 1")
    need(cfg["data"]["K"] >= 1, "data.K must be >= 1")
    need(cfg["noise"]["P"] > 0, "noise.P must be positive")
    need(cfg["noise"]["sigma2"] is None or cfg["noise"]["sigma2"] > 0, "noise.sigma2 must be positive")
    for sec in ("train", "finetune"):
        need(cfg[sec]["epochs"] >= 1 and cfg[sec]["batch_size"] >= 1, f"{sec}: epochs and batch_size >= 1")
        need(cfg[sec]["learning_rate"] > 0, f"{sec}.learning_rate must be positive")
    need(len(cfg["evaluate"]["K_list"]) > 0, "evaluate.K_list must be nonempty")
    need(len(cfg["sweep"]["n_train"]) > 0 and len(cfg["sweep"]["seeds"]) > 0,
         "sweep lists must be nonempty")
    need(len(cfg["finetune"]["seeds"]) > 0, "finetune.seeds must be nonempty")
    need(len(cfg["heatmap"]["M_list"]) > 0, "heatmap.M_list must be nonempty")
    need(set(cfg["heatmap"]["schemes"]) <= {"gnn", "mrt", "rps"}, "heatmap.schemes must be gnn/mrt/rps")
    need(cfg["protocol"]["precoder"] in ("mrt", "rzf", "gnn"), "protocol.precoder must be mrt/rzf/gnn")
    topo = cfg["topology"]
    res = cfg["heatmap"]["resolution"]
    need(res > 0 and topo["width"] / res >= 1 and topo["length"] / res >= 1,
         "heatmap grid needs >= 2 points per axis")
    pc = cfg["protocol"]
    need(pc["mode"] in ("anchored", "literal"), "protocol.mode must be anchored/literal")
    need(pc["transport"] in ("inproc", "tcp"), "protocol.transport must be inproc/tcp")
    need(all(isinstance(i, int) and 0 <= i < pc["M"] for i in pc["drop_reports"]),
         "protocol.drop_reports must list AP indices in [0, M)")
    for key in ("model",):
        for sec in ("heatmap", "protocol"):
            p = cfg[sec][key]
            need(p is None or isinstance(p, str), f"{sec}.{key} must be a path or null")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
