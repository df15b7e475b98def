"""Run configuration: strict JSON schema, defaults, and resolution.

Unknown keys anywhere in the file are rejected. ``resolve`` expands compact
domain descriptors into full ``DomainSpec`` objects and materializes the
trainer/model configs; every run should log the fully resolved form via
``resolved_dict``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import COMMANDS, Command
from .losses import TERM_NAMES
from .synthdomain import DomainSpec, build_obs_transform
from .trainer import ModelSpec, TrainConfig

_BASE_TERMS = ("base_plan", "base_motion", "base_class_ce_ego", "base_class_ce_agent")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "model": {
        "obs_dim": 24,
        "token_dim": 32,
        "encoder_hidden": 64,
        "planner_hidden": 64,
        "classifier_hidden": 128,
        "token_scale": 3.0,
    },
    "codebook": {
        "n_ego": 48,
        "n_agent": 64,
        "group_size": 16,
    },
    "train": {
        "epochs_stage1": 30,
        "epochs_stage2": 10,
        "epochs_stage3": 15,
        "adapt_epochs": 8,
        "batch_size": 32,
        "lr_stage12": 1e-3,
        "lr_stage3": 3e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "loss_weights": {},
        "sigma_clamp": [1e-3, 1e3],
        "triplet_margin": 1.0,
        "gp_weight": 1.0,
    },
    "data": {
        "n_source": 2000,
        "n_source_val": 400,
        "n_target": 800,
        "n_target_val": 400,
        "source_domain": "source_city",
        "target_domain": "target_city",
    },
    "domains": {
        "source_city": {
            "obs_transform": {"kind": "identity"},
            "obs_noise_std": 0.05,
            "curvature_prior": {
                "turn_left": [0.05, 0.015],
                "go_straight": [0.0, 0.004],
                "turn_right": [-0.05, 0.015],
            },
            "speed_prior": [3.0, 13.0],
            "mirror": False,
        },
        "target_city": {
            "obs_transform": {"kind": "rotation", "seed": 7, "angle": 0.5,
                              "bias_seed": 7, "bias_scale": 0.2},
            "obs_noise_std": 0.10,
            "curvature_prior": {
                "turn_left": [0.075, 0.02],
                "go_straight": [0.0, 0.006],
                "turn_right": [-0.075, 0.02],
            },
            "speed_prior": [2.0, 9.0],
            "mirror": True,
        },
        "low_light": {
            "obs_transform": {"kind": "low_rank", "seed": 11, "rank": 18},
            "obs_noise_std": 0.30,
            "curvature_prior": {
                "turn_left": [0.05, 0.015],
                "go_straight": [0.0, 0.004],
                "turn_right": [-0.05, 0.015],
            },
            "speed_prior": [3.0, 13.0],
            "mirror": False,
        },
        "motion_blur": {
            "obs_transform": {"kind": "low_rank", "seed": 13, "rank": 20},
            "obs_noise_std": 0.20,
            "curvature_prior": {
                "turn_left": [0.05, 0.015],
                "go_straight": [0.0, 0.004],
                "turn_right": [-0.05, 0.015],
            },
            "speed_prior": [3.0, 13.0],
            "mirror": False,
        },
    },
    "eval": {
        "rarity_bins": {
            "high_curvature": {"min_abs_curvature": 0.07},
            "low_speed": {"max_speed": 4.0},
        },
    },
}

_DOMAIN_KEYS = {"obs_transform", "obs_noise_std", "curvature_prior",
                "speed_prior", "mirror"}
_TRANSFORM_KEYS = {"kind", "seed", "angle", "rank", "matrix", "bias",
                   "bias_seed", "bias_scale"}
_BIN_KEYS = {"min_speed", "max_speed", "min_abs_curvature", "max_abs_curvature"}


class ConfigError(Exception):
    pass


def _check_keys(d: dict, allowed, path: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys at {path}: {sorted(unknown)}")


@dataclass
class Config:
    seed: int
    out_dir: Path
    model: ModelSpec
    n_ego: int
    n_agent: int
    group_size: int
    train: TrainConfig
    data: dict
    domains: dict[str, DomainSpec]
    rarity_bins: dict[str, dict]
    raw: dict = field(repr=False, default_factory=dict)

    def domain(self, name: str) -> DomainSpec:
        if name not in self.domains:
            raise ConfigError(f"unknown domain {name!r}")
        return self.domains[name]

    def resolved_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge_defaults(user: dict) -> dict:
    merged = copy.deepcopy(DEFAULT_CONFIG)

    def rec(dst: dict, src: dict):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict) and k != "domains":
                rec(dst[k], v)
            else:
                dst[k] = copy.deepcopy(v)
        return dst

    # domains given by the user replace wholesale (partial domain specs are
    # too easy to get wrong silently); everything else deep-merges
    out = rec(merged, {k: v for k, v in user.items() if k != "domains"})
    if "domains" in user:
        for name, spec in user["domains"].items():
            out["domains"][name] = copy.deepcopy(spec)
    return out


def resolve(user: dict | None = None, seed_override: int | None = None) -> Config:
    raw = _merge_defaults(user or {})
    _check_keys(raw, {"seed", "out_dir", "model", "codebook", "train", "data",
                      "domains", "eval"}, "<root>")
    _check_keys(raw["model"], {"obs_dim", "token_dim", "encoder_hidden",
                               "planner_hidden", "classifier_hidden",
                               "token_scale"}, "model")
    _check_keys(raw["codebook"], {"n_ego", "n_agent", "group_size"}, "codebook")
    _check_keys(raw["train"], {
        "epochs_stage1", "epochs_stage2", "epochs_stage3", "adapt_epochs",
        "batch_size", "lr_stage12", "lr_stage3", "beta1", "beta2", "eps",
        "loss_weights", "sigma_clamp", "triplet_margin", "gp_weight"}, "train")
    _check_keys(raw["data"], {"n_source", "n_source_val", "n_target",
                              "n_target_val", "source_domain", "target_domain"},
                "data")
    _check_keys(raw["eval"], {"rarity_bins"}, "eval")
    for name, spec in raw["eval"]["rarity_bins"].items():
        _check_keys(spec, _BIN_KEYS, f"eval.rarity_bins.{name}")

    known_terms = set(TERM_NAMES) | set(_BASE_TERMS)
    bad = set(raw["train"]["loss_weights"]) - known_terms
    if bad:
        raise ConfigError(f"unknown loss weight names: {sorted(bad)}")

    if seed_override is not None:
        raw["seed"] = int(seed_override)

    model = ModelSpec(
        obs_dim=raw["model"]["obs_dim"],
        token_dim=raw["model"]["token_dim"],
        n_ego=raw["codebook"]["n_ego"],
        n_agent=raw["codebook"]["n_agent"],
        group_size=raw["codebook"]["group_size"],
        encoder_hidden=raw["model"]["encoder_hidden"],
        planner_hidden=raw["model"]["planner_hidden"],
        classifier_hidden=raw["model"]["classifier_hidden"],
        token_scale=raw["model"]["token_scale"],
    )
    tr = dict(raw["train"])
    tr["sigma_clamp"] = tuple(tr["sigma_clamp"])
    train = TrainConfig(seed=raw["seed"], **tr)

    domains = {}
    for name, d in raw["domains"].items():
        _check_keys(d, _DOMAIN_KEYS, f"domains.{name}")
        tdesc = d["obs_transform"]
        if isinstance(tdesc, dict):
            _check_keys(tdesc, _TRANSFORM_KEYS, f"domains.{name}.obs_transform")
        matrix, bias = build_obs_transform(tdesc, model.obs_dim)
        curv = {}
        for cmd in COMMANDS:
            if cmd.value not in d["curvature_prior"]:
                raise ConfigError(f"domains.{name}.curvature_prior missing {cmd.value}")
            m, s = d["curvature_prior"][cmd.value]
            curv[cmd] = (float(m), float(s))
        _check_keys(d["curvature_prior"], {c.value for c in COMMANDS},
                    f"domains.{name}.curvature_prior")
        domains[name] = DomainSpec(
            name=name,
            obs_transform=matrix,
            obs_bias=bias,
            obs_noise_std=float(d["obs_noise_std"]),
            curvature_prior=curv,
            speed_prior=(float(d["speed_prior"][0]), float(d["speed_prior"][1])),
            mirror=bool(d["mirror"]),
        )

    return Config(
        seed=raw["seed"],
        out_dir=Path(raw["out_dir"]),
        model=model,
        n_ego=raw["codebook"]["n_ego"],
        n_agent=raw["codebook"]["n_agent"],
        group_size=raw["codebook"]["group_size"],
        train=train,
        data=dict(raw["data"]),
        domains=domains,
        rarity_bins=copy.deepcopy(raw["eval"]["rarity_bins"]),
        raw=raw,
    )


def load(path, seed_override: int | None = None) -> Config:
    with open(path, "r", encoding="utf-8") as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: config root must be an object")
    return resolve(user, seed_override=seed_override)
