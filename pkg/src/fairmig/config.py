"""Flat key = value experiment configuration and labeled seed streams."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import SyntheticSpec

VARIANTS = ("full", "wo_mig", "wo_adv", "wo_ssf", "wo_wei", "vanilla")
OUTPUT_ROOT_ENV = "FAIRMIG_OUTPUT_ROOT"

# config-file key -> dataclass field, where they differ
_ALIASES = {"lambda": "lam"}


def _tuple(cast):
    def parse(text):
        if isinstance(text, (tuple, list)):
            return tuple(cast(v) for v in text)
        return tuple(cast(v) for v in str(text).replace(" ", "").split(",") if v)
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    dataset: str = ""
    synth_n_nodes: int = 2000
    synth_group_fractions: tuple = (0.6, 0.4)
    synth_label_skew: tuple = (0.8, 0.3)
    synth_homophily: float = 0.8
    synth_feature_dim: int = 8
    synth_leakage: float = 0.8
    synth_avg_degree: float = 10.0
    synth_label_signal: float = 0.3
    synth_seed: int = -1
    backbone: str = "GCN"
    hidden_dim: int = 16
    out_dim: int = 16
    n_layers: int = 2
    out_act: str = "relu"
    appnp_teleport: float = 0.1
    appnp_iterations: int = 10
    alpha: float = 0.6
    gamma: float = 0.6
    lam: float = 10.0
    beta: float = 0.1
    ssl_epochs: int = 200
    sup_epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-5
    adversary_steps: int = 1
    adversary_objective: str = "verbatim"
    migration_every: int = 1
    migration_max_rounds: int = 50
    split_fractions: tuple = (0.5, 0.25, 0.25)
    threshold: float = 0.5
    seeds: tuple = (0,)
    variant: str = "full"
    output_dir: str = ""

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("alpha and gamma must lie in [0, 1]")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lambda and beta must be non-negative")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.backbone.upper() not in ("GCN", "JK", "APPNP"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.adversary_objective not in ("verbatim", "standard"):
            raise ConfigError("adversary_objective must be 'verbatim' or 'standard'")

    # ------------------------------------------------------------------
    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            name = _ALIASES.get(key.strip(), key.strip())
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(known[name], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides=None):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string("[run]\n" + Path(path).read_text())
        mapping = dict(parser["run"])
        mapping.update(overrides or {})
        return cls.from_mapping(mapping)

    def with_overrides(self, **kw):
        return self.from_mapping({**self.to_mapping(), **kw})

    def to_mapping(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            key = next((k for k, n in _ALIASES.items() if n == f.name), f.name)
            out[key] = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v) \
                if isinstance(v, tuple) else (repr(v) if isinstance(v, float) else str(v))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_mapping().items()))

    def hash(self, exclude=("output_dir", "name")):
        text = "".join(f"{k}={v}\n" for k, v in sorted(self.to_mapping().items()) if k not in exclude)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def synthetic_spec(self, seed):
        return SyntheticSpec(
            n_nodes=self.synth_n_nodes,
            group_fractions=self.synth_group_fractions,
            label_skew_per_group=self.synth_label_skew,
            homophily=self.synth_homophily,
            feature_dim=self.synth_feature_dim,
            sensitive_feature_leakage=self.synth_leakage,
            seed=self.synth_seed if self.synth_seed >= 0 else stream_seed(seed, "synthetic"),
            avg_degree=self.synth_avg_degree,
            label_signal=self.synth_label_signal,
        )

    def dataset_id(self):
        if self.dataset:
            return f"file:{Path(self.dataset).resolve()}"
        spec = dataclasses.asdict(self.synthetic_spec(0))
        spec.pop("seed")
        return "synthetic:" + ",".join(f"{k}={v}" for k, v in sorted(spec.items()))

    def resolved_output_dir(self):
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _coerce(f, raw):
    default = f.default
    if isinstance(default, tuple):
        cast = int if f.name == "seeds" else float
        return _tuple(cast)(raw)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw).strip()


def stream_seed(seed, label):
    """Deterministic 32-bit seed for the named stream of a run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


def stream(seed, label):
    """Independent generator for one named purpose (init, shuffle, split, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))
