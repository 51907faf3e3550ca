"""Training objective: penalized generalized dice loss plus focal loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import torch

from .exceptions import ConfigError, ContractError
from .metrics import _as_tensor, _check_pair, generalized_dice_score, inverse_area_weights

PROB_EPS = 1e-7
WEIGHT_POLICIES = ("ones", "inverse_squared_area")


@dataclass
class LossConfig:
    lambda_: float = 1.0
    k: float = 0.75
    gamma: float = 2.0
    alpha: float = 0.25
    weight_policy: str = "inverse_squared_area"
    class_alpha: Optional[Sequence[float]] = None

    def __post_init__(self):
        for name in ("lambda_", "k", "gamma", "alpha"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"loss.{name.rstrip('_')} must be a finite number, got {value!r}")
            if value < 0:
                raise ConfigError(f"loss.{name.rstrip('_')} must be >= 0, got {value}")
        if self.alpha > 1:
            raise ConfigError(f"loss.alpha must lie in [0, 1], got {self.alpha}")
        if self.weight_policy not in WEIGHT_POLICIES:
            raise ConfigError(f"loss.weight_policy must be one of {WEIGHT_POLICIES}, got {self.weight_policy!r}")
        if self.class_alpha is not None:
            self.class_alpha = [float(a) for a in self.class_alpha]
            if any(not 0 <= a <= 1 for a in self.class_alpha):
                raise ConfigError("loss.class_alpha entries must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown loss key(s): {', '.join(sorted(k.rstrip('_') for k in unknown))}")
        return cls(**d)


def gdl(g, p, weights=None, class_dim: int = 1) -> torch.Tensor:
    """Generalized dice loss, ``1 - GDS``."""
    return 1.0 - generalized_dice_score(g, p, weights, class_dim)


def penalize(gdl_value, k: float):
    """``GDL / (1 + k (1 - GDL))``; reduces to GDL when ``k == 0``."""
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    return gdl_value / (1.0 + k * (1.0 - gdl_value))


def pgdl(g, p, weights=None, k: float = 0.75, class_dim: int = 1) -> torch.Tensor:
    return penalize(gdl(g, p, weights, class_dim), k)


def focal_loss(g, p, gamma: float = 2.0, alpha=0.25, class_dim: int = 1, eps: float = PROB_EPS) -> torch.Tensor:
    """Mean over pixels of ``-a (1 - q)**gamma * log(q)``.

    ``q`` is the clamped probability the model assigns to each pixel's true
    class. ``alpha`` is either a scalar used for every class or a sequence
    indexed by the true class.
    """
    g = _as_tensor(g)
    p = _as_tensor(p)
    _check_pair(g, p)
    g = g.to(p.dtype)
    q = (g * p).sum(dim=class_dim).clamp(eps, 1.0 - eps)
    if isinstance(alpha, (int, float)):
        a = torch.as_tensor(float(alpha), dtype=p.dtype, device=p.device)
    else:
        a_c = torch.as_tensor(list(alpha), dtype=p.dtype, device=p.device)
        if a_c.numel() != p.shape[class_dim]:
            raise ContractError("per-class alpha must have one entry per class")
        shape = [1] * p.ndim
        shape[class_dim % p.ndim] = -1
        a = (g * a_c.view(shape)).sum(dim=class_dim)
    return (-a * (1.0 - q) ** gamma * torch.log(q)).mean()


def loss_weights(g, cfg: LossConfig, class_dim: int = 1):
    if cfg.weight_policy == "ones":
        return None
    return inverse_area_weights(g, class_dim)


def combined_loss(g, p, cfg: Optional[LossConfig] = None, class_dim: int = 1) -> torch.Tensor:
    """``pGDL + lambda * FL`` with class weights recomputed from ``g``."""
    cfg = cfg or LossConfig()
    g = _as_tensor(g)
    w = loss_weights(g, cfg, class_dim)
    if w is not None:
        w = w.to(_as_tensor(p).device)
    total = pgdl(g, p, w, cfg.k, class_dim)
    if cfg.lambda_:
        alpha = cfg.class_alpha if cfg.class_alpha is not None else cfg.alpha
        total = total + cfg.lambda_ * focal_loss(g, p, cfg.gamma, alpha, class_dim)
    return total
