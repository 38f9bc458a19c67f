"""Run configuration: a YAML file mapped onto nested dataclasses.

Schema (all keys optional except ``counts``, ``forcing`` and ``output_dir``)::

    counts: path/to/counts.txt          # count matrix file
    forcing: path/to/forcing.txt        # forcing matrix file
    output_dir: runs/hba1
    cache_dir: null                     # default: <output_dir>/cache
    method: eof                         # eof | le
    n_beta: 14
    n_alpha: 16
    holdout: [2009]                     # response years kept out of training
    train_before_holdout: false         # train only on years before the first holdout
    rotation_only: false                # Procrustes restricted to proper rotations
    plots: true
    alignment: {tau: 12, anchor_offset: 0}
    anomaly: {ref_start: null, ref_end: null}   # YYYY-MM bounds
    nmf: {max_iter: 2000, tol: 1.0e-8, offset: true, ridge: 0.0, inner: 10}
    hyper: {eps: 1.0e-6, q_min: 30, q_max: 60, m_min: 1, m_max: 15,
            a1: 2.02, b1: 0.102, a2: 0.001, b2: 0.001,
            k_nn_grid: [6, 9, 12, 15, 18, 21, 24, 27, 30, 33, 36]}
    sampler: {n_iter: 20000, burn_in: 2000, thin: 1, seed: 0, chains: 1,
              jacobian: true, random_order: false, forecast_noise: false,
              forecast_seed: null}

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .fields import AlignmentSpec
from .sampler import SamplerSettings
from .stochastic import Hyperparams

METHODS = ("eof", "le")
LABELS = {"eof": "HBA1", "le": "HBA2"}


@dataclass(frozen=True)
class NMFSettings:
    max_iter: int = 2000
    tol: float = 1e-8
    offset: bool = True
    ridge: float = 0.0
    inner: int = 10


@dataclass(frozen=True)
class AnomalySettings:
    ref_start: str | None = None
    ref_end: str | None = None


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    chains: int = 1
    forecast_noise: bool = False
    forecast_seed: int | None = None


@dataclass
class RunConfig:
    counts: Path
    forcing: Path
    output_dir: Path
    cache_dir: Path | None = None
    method: str = "eof"
    n_beta: int = 14
    n_alpha: int = 16
    holdout: tuple = ()
    train_before_holdout: bool = False
    rotation_only: bool = False
    plots: bool = True
    alignment: AlignmentSpec = field(default_factory=AlignmentSpec)
    anomaly: AnomalySettings = field(default_factory=AnomalySettings)
    nmf: NMFSettings = field(default_factory=NMFSettings)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_beta < 1 or self.n_alpha < 1:
            raise ValueError("n_beta and n_alpha must be >= 1")
        if self.run.chains < 1:
            raise ValueError("chains must be >= 1")
        self.holdout = tuple(int(y) for y in self.holdout)
        self.counts, self.forcing = Path(self.counts), Path(self.forcing)
        self.output_dir = Path(self.output_dir)
        if self.cache_dir is None:
            self.cache_dir = self.output_dir / "cache"
        self.cache_dir = Path(self.cache_dir)

    @property
    def label(self) -> str:
        return LABELS[self.method]

    def to_dict(self) -> dict:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, Path):
                return str(v)
            if isinstance(v, (tuple, list)):
                return [conv(x) for x in v]
            return v

        out = conv(self)
        seed = out["run"]
        out["sampler"].update({k: seed[k] for k in seed})
        del out["run"]
        return out

    def digest(self) -> str:
        """Hash of every setting that affects results (paths excluded)."""
        d = self.to_dict()
        for key in ("counts", "forcing", "output_dir", "cache_dir", "plots"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SAMPLER_RUN_KEYS = {f.name for f in dataclasses.fields(RunSettings)}


def config_from_dict(data: dict, base: Path | None = None) -> RunConfig:
    data = dict(data)
    missing = [k for k in ("counts", "forcing", "output_dir") if k not in data]
    if missing:
        raise ValueError(f"config is missing required keys: {missing}")
    base = Path(".") if base is None else Path(base)
    for key in ("counts", "forcing", "output_dir", "cache_dir"):
        if data.get(key) is not None:
            p = Path(data[key])
            data[key] = p if p.is_absolute() else base / p

    def sub(cls, raw):
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        if "k_nn_grid" in raw:
            raw["k_nn_grid"] = tuple(int(k) for k in raw["k_nn_grid"])
        if "frozen" in raw:
            raw["frozen"] = tuple(raw["frozen"])
        return cls(**raw)

    sampler_raw = dict(data.pop("sampler", None) or {})
    run_raw = {k: sampler_raw.pop(k) for k in list(sampler_raw) if k in _SAMPLER_RUN_KEYS}
    holdout = data.pop("holdout", None)
    if holdout is None:
        holdout = ()
    elif isinstance(holdout, int):
        holdout = (holdout,)
    known_top = {f.name for f in dataclasses.fields(RunConfig)} - {"run"}
    unknown = set(data) - known_top
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(
        counts=data.pop("counts"),
        forcing=data.pop("forcing"),
        output_dir=data.pop("output_dir"),
        cache_dir=data.pop("cache_dir", None),
        holdout=tuple(holdout),
        alignment=sub(AlignmentSpec, data.pop("alignment", None)),
        anomaly=sub(AnomalySettings, data.pop("anomaly", None)),
        nmf=sub(NMFSettings, data.pop("nmf", None)),
        hyper=sub(Hyperparams, data.pop("hyper", None)),
        sampler=sub(SamplerSettings, sampler_raw),
        run=sub(RunSettings, run_raw),
        **data,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return config_from_dict(data, base=path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
