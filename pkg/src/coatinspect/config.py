"""Merged run configuration with per-section defaults."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentPolicy
from .flow import TrainConfig
from .preprocess import PreprocessConfig

SCHEMA_VERSION = 1


def _strict(cls, d: dict, section: str):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class AugmentSection:
    policy: str = "none"          # none | offline | train
    copies: int = 0
    seed: int = 0

    def make_policy(self) -> AugmentPolicy:
        from .augment import POLICIES

        if self.policy == "none":
            return AugmentPolicy(seed=self.seed)
        if self.policy not in POLICIES:
            raise ValueError(f"unknown augment policy {self.policy!r}")
        return POLICIES[self.policy](self.seed)


@dataclass(frozen=True)
class FeatureSection:
    n_levels: int = 3
    base_cell: int = 8


@dataclass(frozen=True)
class PostprocessSection:
    min_area: int = 20


@dataclass(frozen=True)
class EvalSection:
    val_fraction: float = 0.2
    folds: int = 5
    histogram_bins: int = 20
    seed: int = 0


@dataclass(frozen=True)
class ClusterSection:
    pca_dim: int = 16
    perplexity: float = 30.0
    iters: int = 1000
    seed: int = 0


_SECTIONS = {
    "preprocess": PreprocessConfig,
    "augment": AugmentSection,
    "features": FeatureSection,
    "flow": TrainConfig,
    "postprocess": PostprocessSection,
    "eval": EvalSection,
    "cluster": ClusterSection,
}


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    flow: TrainConfig = field(default_factory=TrainConfig)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    eval: EvalSection = field(default_factory=EvalSection)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS) - {"seed", "schema_version"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, sub in _SECTIONS.items():
            if name in d:
                if not isinstance(d[name], dict):
                    raise ValueError(f"config section [{name}] must be an object")
                if hasattr(sub, "from_dict"):
                    kw[name] = sub.from_dict(d[name])
                else:
                    kw[name] = _strict(sub, d[name], name)
        cfg = cls(**kw)
        if "seed" in d:
            cfg = cfg.with_seed(int(d["seed"]))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one global seed into every seeded section."""
        return replace(self, seed=seed,
                       preprocess=replace(self.preprocess, seed=seed),
                       augment=replace(self.augment, seed=seed),
                       flow=replace(self.flow, seed=seed),
                       eval=replace(self.eval, seed=seed),
                       cluster=replace(self.cluster, seed=seed))

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "seed": self.seed}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = sec.to_dict() if hasattr(sec, "to_dict") else {
                f.name: getattr(sec, f.name) for f in fields(sec)}
        return out

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()
