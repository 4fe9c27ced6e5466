"""Training configuration shared by the encoders, trainer and CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from typing import Any, Dict, Iterable, Tuple

from .errors import ConfigError

ROI_ENCODERS = ("gcn", "mlp")
FUSIONS = ("concat", "contra")
BRANCHES = ("joint", "img", "roi")
MASK_BRANCHES = ("none", "img", "roi")
MASK_TARGETS = ("input", "embedding")


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.5
    lam: float = 1.0
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    d_img: int = 32
    d_roi: int = 32
    d_p: int = 16
    img_channels: Tuple[int, int] = (8, 16)
    gcn_hidden: int = 16
    mlp_hidden: int = 32
    proj_hidden: int = 32
    roi_encoder: str = "gcn"
    fusion: str = "contra"
    branches: str = "joint"
    mask_branch: str = "none"
    mask_rate: float = 0.0
    mask_target: str = "input"
    seed: int = 0
    k_folds: int = 5
    quantiles: int = 8

    def __post_init__(self):
        object.__setattr__(self, "img_channels", tuple(int(c) for c in self.img_channels))
        self.validate()

    def validate(self) -> None:
        for name in ("tau", "lr", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("batch_size", "epochs", "d_img", "d_roi", "d_p", "gcn_hidden",
                     "mlp_hidden", "proj_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.img_channels) != 2 or min(self.img_channels) < 1:
            raise ConfigError(f"img_channels must be two positive ints, got {self.img_channels}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.quantiles < 2:
            raise ConfigError(f"quantiles must be >= 2, got {self.quantiles}")
        if not 0 <= self.mask_rate <= 1:
            raise ConfigError(f"mask_rate must lie in [0, 1], got {self.mask_rate}")
        for name, allowed in (("roi_encoder", ROI_ENCODERS), ("fusion", FUSIONS),
                              ("branches", BRANCHES), ("mask_branch", MASK_BRANCHES),
                              ("mask_target", MASK_TARGETS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {', '.join(allowed)}; "
                                  f"got {getattr(self, name)!r}")

    @property
    def effective_lam(self) -> float:
        """Contrastive weight actually applied: zero for concat or single-branch runs."""
        if self.fusion == "concat" or self.branches != "joint":
            return 0.0
        return float(self.lam)

    @property
    def uses_img(self) -> bool:
        return self.branches in ("joint", "img")

    @property
    def uses_roi(self) -> bool:
        return self.branches in ("joint", "roi")

    @property
    def d_fuse(self) -> int:
        return self.d_img * self.uses_img + self.d_roi * self.uses_roi

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["img_channels"] = list(self.img_channels)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, pairs: Iterable[str]) -> "TrainConfig":
        """Apply ``key=value`` strings, coercing values to the field's type."""
        types = {f.name: f.type for f in fields(self)}
        current = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            key = key.strip()
            if key not in types:
                raise ConfigError(f"override refers to unknown key {key!r}")
            current[key] = _coerce(current[key], raw.strip(), key)
        return TrainConfig.from_dict(current)


def _coerce(template, raw: str, key: str):
    try:
        if isinstance(template, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, list):
            return [int(x) for x in raw.strip("[]()").split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for {key}") from exc
    return raw
