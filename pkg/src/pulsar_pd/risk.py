"""Surrogate losses and the PN / unbiased PU / non-negative PU risks.

Scores are raw decision values ``g(x)``; a sample is classified positive
when its score is non-negative. Every risk accepts numpy arrays or
:class:`~pulsar_pd.autodiff.Tensor` scores; with tensors the returned
``objective`` is differentiable and can drive training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOSSES = ("sigmoid", "logistic")
MODES = ("pn", "pu_unbiased", "pu_nonneg")


@dataclass(frozen=True)
class RiskConfig:
    base_loss: str = "sigmoid"
    theta_p: float = 0.5
    mode: str = "pu_nonneg"

    def __post_init__(self):
        if self.base_loss not in LOSSES:
            raise ValueError(f"base_loss must be one of {LOSSES}, got {self.base_loss!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.theta_p <= 1 or (self.mode != "pn" and self.theta_p >= 1):
            raise ValueError(f"class prior theta_p out of range: {self.theta_p}")

    @property
    def theta_n(self):
        return 1.0 - self.theta_p

    @property
    def is_pu(self):
        return self.mode != "pn"


@dataclass
class RiskBreakdown:
    total: float
    positive_term: float
    unlabeled_or_negative_term: float
    clamped: bool = False
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {"total": self.total, "positive_term": self.positive_term,
                "unlabeled_or_negative_term": self.unlabeled_or_negative_term,
                "clamped": self.clamped}


def _stable_sigmoid(m):
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1 / (1 + e), e / (1 + e))


def base_loss(m, kind="sigmoid"):
    """Sigmoid loss 1/(1+e^m) or logistic loss ln(1+e^-m) of margin ``m``."""
    if kind not in LOSSES:
        raise ValueError(f"unknown loss {kind!r}")
    if isinstance(m, Tensor):
        return ad.sigmoid(ad.neg(m)) if kind == "sigmoid" else ad.softplus(ad.neg(m))
    m = np.asarray(m, dtype=float)
    return _stable_sigmoid(-m) if kind == "sigmoid" else np.logaddexp(0, -m)


def composite_loss(m, kind="sigmoid"):
    """l(m) - l(-m); odd in ``m``."""
    if isinstance(m, Tensor):
        return ad.sub(base_loss(m, kind), base_loss(ad.neg(m), kind))
    return base_loss(m, kind) - base_loss(-np.asarray(m, dtype=float), kind)


def _tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=float).reshape(-1))


def _mean_or_zero(x: Tensor, allow_empty, what):
    if x.data.size == 0:
        if not allow_empty:
            raise ValueError(f"{what} sample set is empty")
        return Tensor(np.zeros((), dtype=x.dtype))
    return ad.mean(x)


def risk_pn(scores_p, scores_n, cfg: RiskConfig, allow_empty=False) -> RiskBreakdown:
    """theta_P * mean_P[l(g)] + theta_N * mean_N[l(-g)]."""
    sp, sn = _tensor(scores_p), _tensor(scores_n)
    pos = ad.scale(_mean_or_zero(base_loss(sp, cfg.base_loss), allow_empty, "positive"), cfg.theta_p)
    negl = _mean_or_zero(base_loss(ad.neg(sn), cfg.base_loss), allow_empty, "negative")
    negt = ad.scale(negl, cfg.theta_n)
    total = ad.add(pos, negt)
    return RiskBreakdown(total.item(), pos.item(), negt.item(), False, total)


def risk_pu(scores_p, scores_u, cfg: RiskConfig, allow_empty=False) -> RiskBreakdown:
    """PU risk from positive and unlabeled scores.

    ``pu_unbiased``: theta_P * mean_P[l(g) - l(-g)] + mean_U[l(-g)].
    ``pu_nonneg``: theta_P * mean_P[l(g)] + max(0, mean_U[l(-g)] - theta_P * mean_P[l(-g)]);
    ``clamped`` reports whether the max was active.
    """
    if cfg.mode not in ("pu_unbiased", "pu_nonneg"):
        raise ValueError(f"risk_pu needs a PU mode, got {cfg.mode!r}")
    if not 0 < cfg.theta_p < 1:
        raise ValueError(f"theta_p must lie in (0, 1), got {cfg.theta_p}")
    sp, su = _tensor(scores_p), _tensor(scores_u)
    kind = cfg.base_loss
    unl = _mean_or_zero(base_loss(ad.neg(su), kind), allow_empty, "unlabeled")

    if cfg.mode == "pu_unbiased":
        pos = ad.scale(_mean_or_zero(composite_loss(sp, kind), allow_empty, "positive"), cfg.theta_p)
        total = ad.add(pos, unl)
        return RiskBreakdown(total.item(), pos.item(), unl.item(), False, total)

    pos = ad.scale(_mean_or_zero(base_loss(sp, kind), allow_empty, "positive"), cfg.theta_p)
    pos_as_neg = ad.scale(_mean_or_zero(base_loss(ad.neg(sp), kind), allow_empty, "positive"),
                          cfg.theta_p)
    neg = ad.sub(unl, pos_as_neg)
    clamped = neg.item() < 0
    total = ad.add(pos, ad.relu(neg))
    return RiskBreakdown(total.item(), pos.item(), neg.item(), clamped, total)


def risk(scores_p, scores_other, cfg: RiskConfig, allow_empty=False) -> RiskBreakdown:
    """Dispatch on ``cfg.mode``; ``scores_other`` is N for PN and U for PU."""
    if cfg.mode == "pn":
        return risk_pn(scores_p, scores_other, cfg, allow_empty)
    return risk_pu(scores_p, scores_other, cfg, allow_empty)
