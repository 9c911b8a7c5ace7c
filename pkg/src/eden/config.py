"""Run configuration: INI-style file with sections, CLI overrides, hashing.

The file format is plain ``key = value`` lines under ``[section]`` headers
(parsed with configparser); every key has a flag-style override. A
canonical JSON dump of the resolved values is hashed into every artifact so
reruns against a changed configuration are detected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ConfigError
from .predict import Ablations, WalkConfig, NODE_C, LINK_TASKS
from .propagate import PropagationConfig


@dataclass
class RunConfig:
    # paths
    edges: str = ""
    features: str | None = None
    labels: str | None = None
    split_file: str | None = None
    split_fractions: tuple[float, float, float] = (0.1, 0.45, 0.45)
    # tree
    height: int = 3
    strategy: str = "exhaustive"
    mc_samples: int | None = None
    # refinement
    kappa: float = 1.5
    delta: float = 0.1
    refine_epochs: int = 20
    refine_alternations: int = 1
    # propagation
    tau: float = 0.5
    steps: int = 5
    mode: str = "magnetic"
    q: float = 0.25
    hops: int = 2
    # walks
    p_rw: float = 1.0
    s_rw: float = 1.0
    c_rw: float = 1.0
    walk_length: int = 5
    # training
    task: str = NODE_C
    alpha: float = 0.5
    lr: float = 0.02
    hidden: int = 16
    max_epochs: int = 500
    patience: int = 50
    repr_dim: int = 8
    link_max_pairs: int | None = 2000
    link_ratios: tuple[float, float, float] = (0.8, 0.15, 0.05)
    seed: int = 0
    threads: int = 0
    # ablations
    ablations: Ablations = field(default_factory=Ablations)

    def validate(self) -> "RunConfig":
        if not 3 <= self.height <= 10:
            raise ConfigError(f"height must be in [3, 10], got {self.height}")
        if not 1.0 <= self.kappa <= 2.0:
            raise ConfigError(f"kappa must be in [1, 2], got {self.kappa}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.strategy not in ("exhaustive", "mc"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.task != NODE_C and self.task not in LINK_TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        self.propagation()  # runs PropagationConfig validation
        self.walk()
        return self

    def propagation(self) -> PropagationConfig:
        return PropagationConfig(tau=self.tau, steps=self.steps, mode=self.mode,
                                 q=self.q, hops=self.hops)

    def walk(self) -> WalkConfig:
        return WalkConfig(p_rw=self.p_rw, s_rw=self.s_rw, c_rw=self.c_rw,
                          k=self.walk_length)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["split_fractions"] = list(self.split_fractions)
        payload["link_ratios"] = list(self.link_ratios)
        return payload

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}

_SCHEMA = {
    ("paths", "edges"): ("edges", str),
    ("paths", "features"): ("features", str),
    ("paths", "labels"): ("labels", str),
    ("paths", "split"): ("split_file", str),
    ("paths", "split_fractions"): ("split_fractions", "fractions"),
    ("tree", "height"): ("height", int),
    ("tree", "strategy"): ("strategy", str),
    ("tree", "mc_samples"): ("mc_samples", int),
    ("refine", "kappa"): ("kappa", float),
    ("refine", "delta"): ("delta", float),
    ("refine", "epochs"): ("refine_epochs", int),
    ("refine", "alternations"): ("refine_alternations", int),
    ("propagation", "tau"): ("tau", float),
    ("propagation", "steps"): ("steps", int),
    ("propagation", "mode"): ("mode", str),
    ("propagation", "q"): ("q", float),
    ("propagation", "hops"): ("hops", int),
    ("walk", "p_rw"): ("p_rw", float),
    ("walk", "s_rw"): ("s_rw", float),
    ("walk", "c_rw"): ("c_rw", float),
    ("walk", "length"): ("walk_length", int),
    ("training", "task"): ("task", str),
    ("training", "alpha"): ("alpha", float),
    ("training", "lr"): ("lr", float),
    ("training", "hidden"): ("hidden", int),
    ("training", "max_epochs"): ("max_epochs", int),
    ("training", "patience"): ("patience", int),
    ("training", "repr_dim"): ("repr_dim", int),
    ("training", "link_max_pairs"): ("link_max_pairs", int),
    ("training", "seed"): ("seed", int),
    ("training", "threads"): ("threads", int),
    ("ablation", "diverse_knowledge"): ("ablation.diverse_knowledge", bool),
    ("ablation", "personalized_transfer"): ("ablation.personalized_transfer", bool),
    ("ablation", "tree_walk"): ("ablation.tree_walk", bool),
    ("ablation", "kd_loss"): ("ablation.kd_loss", bool),
}


def _coerce(raw: str, kind):
    raw = raw.strip()
    if kind is str:
        return raw
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is bool:
        if raw.lower() not in _BOOL:
            raise ConfigError(f"expected boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if kind == "fractions":
        parts = [float(x) for x in raw.split(",")]
        if len(parts) != 3:
            raise ConfigError("split_fractions needs three comma-separated values")
        return tuple(parts)
    raise ConfigError(f"unhandled config type {kind!r}")


def _apply(cfg: RunConfig, target: str, value) -> None:
    if target.startswith("ablation."):
        setattr(cfg.ablations, target.split(".", 1)[1], value)
    else:
        setattr(cfg, target, value)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from file plus override mapping (flags win)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                spec = _SCHEMA.get((section, key))
                if spec is None:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                target, kind = spec
                _apply(cfg, target, _coerce(raw, kind))
    for target, value in (overrides or {}).items():
        if value is not None:
            _apply(cfg, target, value)
    return cfg.validate()
