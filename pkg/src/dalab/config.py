"""Experiment configuration: nested dataclasses serialized as JSON with all
defaults materialized."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "an"            # "an" or "thmC"
    n: int = 100
    strength: float = 0.042       # adapted C^1 size of the centre booster; < 0 reverses it
    mix_c1: float = 0.0           # weak-centre share of the booster direction
    bump: bool = True             # localized weak-centre bump at the fixed point 0
    bump_radius: float = 0.05
    bump_depth: int = 1           # j of the nested-ball rescaling
    bump_rho_cap: float = 0.6
    realization: str = "twist"

    def validate(self):
        if self.family not in ("an", "thmC"):
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family == "an" and self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.realization not in ("twist", "flow"):
            raise ConfigError(f"unknown realization {self.realization!r}")
        if self.bump and not 0 < self.bump_radius < 0.25:
            raise ConfigError("bump_radius must lie in (0, 1/4)")
        if self.bump_depth < 0:
            raise ConfigError("bump_depth must be >= 0")


@dataclass
class ConePlanSpec:
    samples: int = 10_000
    splittings: list = field(default_factory=lambda: ["E", "F"])

    def validate(self):
        if self.samples < 1:
            raise ConfigError("cone samples must be positive")
        for s in self.splittings:
            if s not in ("E", "F"):
                raise ConfigError(f"unknown splitting {s!r}")


@dataclass
class OrbitPlanSpec:
    orbits: int = 32
    T: int = 100_000
    stride: int | None = None
    burn_in: int = 1000
    quadrature_resolution: int = 6
    sweep_strengths: list = field(default_factory=lambda: [0.014, 0.028, 0.042])

    def validate(self):
        if self.orbits < 2:
            raise ConfigError("need at least two orbits for error bars")
        if self.T < 10 * (self.stride or 1):
            raise ConfigError("T must be at least 10 strides")


@dataclass
class LeafSpec:
    base: list = field(default_factory=lambda: [0.3, 0.1, 0.7, 0.2])
    diameter: float = 50.0
    count: int = 10_000
    qi_pairs: int = 24
    thresholds: list = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0, 20.0])
    growth_edge: float = 10.0
    growth_resolution: int = 32
    n_max: int = 30

    def validate(self):
        if len(self.base) != 4:
            raise ConfigError("leaf base must have 4 coordinates")
        if self.diameter <= 0 or self.growth_edge <= 0:
            raise ConfigError("patch sizes must be positive")
        if self.count < 2 or self.growth_resolution < 1:
            raise ConfigError("patch too small")


@dataclass
class SemiconjSpec:
    grid: int = 32
    tol: float = 1e-6
    probe_samples: int = 200_000
    bins: int = 4
    plaques: int = 16
    box_size: float = 0.5
    patch_edge: float = 2.0
    patch_resolution: int = 12

    def validate(self):
        if self.grid < 2:
            raise ConfigError("grid must be >= 2")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")


@dataclass
class ExperimentConfig:
    name: str = "thmB"
    model: ModelSpec = field(default_factory=ModelSpec)
    cones: ConePlanSpec = field(default_factory=ConePlanSpec)
    orbits: OrbitPlanSpec = field(default_factory=OrbitPlanSpec)
    leaf: LeafSpec = field(default_factory=LeafSpec)
    semiconj: SemiconjSpec = field(default_factory=SemiconjSpec)
    seed: int = 0
    output_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for part in (self.model, self.cones, self.orbits, self.leaf, self.semiconj):
            part.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sub = {"model": ModelSpec, "cones": ConePlanSpec, "orbits": OrbitPlanSpec,
               "leaf": LeafSpec, "semiconj": SemiconjSpec}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k in sub:
                names = {f.name for f in fields(sub[k])}
                bad = set(v) - names
                if bad:
                    raise ConfigError(f"unknown keys in {k}: {sorted(bad)}")
                kw[k] = sub[k](**v)
            else:
                kw[k] = v
        return cls(**kw).validate()

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.loads(fh.read())

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)


def stage_seed(seed: int, stage: str) -> int:
    """Independent per-stage seed derived from the global seed and a stage label."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def theoremB_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    return _apply(cfg, overrides)


def theoremC_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(name="thmC")
    cfg.model = ModelSpec(family="thmC", n=0, strength=0.015, mix_c1=0.5, bump=False)
    cfg.orbits.sweep_strengths = []
    return _apply(cfg, overrides)


def _apply(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = cfg.to_dict()
    for key, val in overrides.items():
        parts = key.split(".")
        tgt = d
        for p in parts[:-1]:
            tgt = tgt[p]
        if parts[-1] not in tgt:
            raise ConfigError(f"unknown config key {key!r}")
        tgt[parts[-1]] = val
    return ExperimentConfig.from_dict(d)
