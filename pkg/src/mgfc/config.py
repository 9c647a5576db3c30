"""Flat key=value run configuration with a fixed, validated schema."""

from __future__ import annotations

import hashlib

from .backbone import BackboneConfig, ClusterConfig, ModelConfig
from .data import CLASS_NAMES, DatasetSpec, SceneConfig
from .errors import ConfigError


def _parse_eps(raw: str):
    if raw == "auto":
        return "auto"
    try:
        v = float(raw)
    except ValueError:
        raise ConfigError(f"cluster.eps must be 'auto' or a number, got '{raw}'")
    if v <= 0:
        raise ConfigError(f"cluster.eps must be positive, got {v}")
    return v


def _parse_enable(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if raw in ("", "none"):
        return ()
    parts = tuple(p.strip() for p in raw.split(","))
    bad = set(parts) - {"cgt", "mgt", "fgt"}
    if bad or len(set(parts)) != len(parts):
        raise ConfigError(f"tuners.enable must be a subset of cgt,mgt,fgt, got '{raw}'")
    return parts


def _pos_int(key):
    def parse(raw):
        try:
            v = int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got '{raw}'")
        if v < 1:
            raise ConfigError(f"{key} must be >= 1, got {v}")
        return v
    return parse


def _nonneg_int(key):
    def parse(raw):
        try:
            v = int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got '{raw}'")
        if v < 0:
            raise ConfigError(f"{key} must be >= 0, got {v}")
        return v
    return parse


def _pos_float(key):
    def parse(raw):
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got '{raw}'")
        if v <= 0:
            raise ConfigError(f"{key} must be positive, got {v}")
        return v
    return parse


def _nonneg_float(key):
    def parse(raw):
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got '{raw}'")
        if v < 0:
            raise ConfigError(f"{key} must be >= 0, got {v}")
        return v
    return parse


def _method(raw):
    if raw not in ("dbscan", "kmeans"):
        raise ConfigError(f"cluster.method must be dbscan or kmeans, got '{raw}'")
    return raw


# key -> (default, parser). Optimizer and clustering defaults follow the
# reference recipe (lr 1e-4, weight decay 0.05, batch 4, min_pts 4, k 5);
# iterations and resolution are sized for a desk-scale run.
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("0", _nonneg_int("seed")),
    "backbone.layers": ("4", _pos_int("backbone.layers")),
    "backbone.channels": ("64", _pos_int("backbone.channels")),
    "backbone.patch": ("4", _pos_int("backbone.patch")),
    "backbone.image": ("64", _pos_int("backbone.image")),
    "tokens.m": ("16", _pos_int("tokens.m")),
    "cluster.method": ("dbscan", _method),
    "cluster.eps": ("auto", _parse_eps),
    "cluster.min_pts": ("4", _pos_int("cluster.min_pts")),
    "cluster.k": ("5", _pos_int("cluster.k")),
    "tuners.enable": ("cgt,mgt,fgt", _parse_enable),
    "optim.lr": ("1e-4", _pos_float("optim.lr")),
    "optim.weight_decay": ("0.05", _nonneg_float("optim.weight_decay")),
    "train.iters": ("2000", _nonneg_int("train.iters")),
    "train.batch": ("4", _pos_int("train.batch")),
    "train.checkpoint_every": ("500", _pos_int("train.checkpoint_every")),
    "data.source_count": ("200", _pos_int("data.source_count")),
    "data.target_count": ("50", _pos_int("data.target_count")),
}


class RunConfig:
    """Resolved configuration; unknown keys are rejected at parse time."""

    def __init__(self, raw: dict[str, str] | None = None):
        merged = {k: default for k, (default, _) in SCHEMA.items()}
        for key, value in (raw or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = value
        self.raw = merged
        self.values = {k: SCHEMA[k][1](merged[k]) for k in SCHEMA}

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        raw: dict[str, str] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                raw[key.strip()] = value.strip()
        raw.update(overrides or {})
        return cls(raw)

    def resolved_text(self) -> str:
        lines = [f"{k}={self.raw[k]}" for k in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]

    # ---- factories ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            backbone=BackboneConfig(layers=v["backbone.layers"],
                                    channels=v["backbone.channels"],
                                    patch=v["backbone.patch"],
                                    image_size=v["backbone.image"],
                                    seed=v["seed"]),
            tokens_m=v["tokens.m"],
            num_classes=len(CLASS_NAMES),
            categories=CLASS_NAMES,
            enabled=v["tuners.enable"],
            cluster=ClusterConfig(method=v["cluster.method"],
                                  eps=v["cluster.eps"],
                                  min_pts=v["cluster.min_pts"],
                                  k=v["cluster.k"]),
            param_seed=v["seed"] + 1,
        )

    def dataset_spec(self) -> DatasetSpec:
        v = self.values
        return DatasetSpec(source_count=v["data.source_count"],
                           target_count=v["data.target_count"],
                           seed=v["seed"],
                           scene=SceneConfig(size=v["backbone.image"]))
