"""Training objectives.

All pixel sums are reduced to means so the weights do not depend on image size.
Discriminator outputs are probabilities and are clamped to ``[PROB_EPS, 1 - PROB_EPS]``
before any logarithm.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .blend import IGNORE
from .errors import DomainError, EventFlyWarning, ShapeError, TrainingAbort

PROB_EPS = 1e-7


def _as_labels(labels) -> torch.Tensor:
    if not isinstance(labels, torch.Tensor):
        labels = torch.as_tensor(labels)
    return labels.long()


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is ``(B, C, H, W)`` and ``labels`` ``(B, H, W)``. All-ignored input
    gives a graph-connected zero and a warning.
    """
    labels = _as_labels(labels)
    if logits.dim() == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    c = logits.shape[1]
    bad = (labels >= c) & (labels != IGNORE) | (labels < 0)
    if bool(bad.any()):
        raise DomainError(f"label {int(labels[bad][0])} out of range for {c} classes")
    valid = labels != IGNORE
    if not bool(valid.any()):
        warnings.warn("every pixel is ignored; cross-entropy is 0", EventFlyWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits, labels, ignore_index=IGNORE, reduction="mean")


def entropy_map(probs: torch.Tensor) -> torch.Tensor:
    """Per-pixel ``-sum_c p log p`` over axis 1, with ``0 log 0 = 0``."""
    # clamping keeps 0 * log(0) at 0 without a branch
    return -(probs * probs.clamp_min(torch.finfo(probs.dtype).tiny).log()).sum(dim=1)


def masked_mean_entropy(probs: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    """Mean entropy over region pixels; ``region`` is ``(H, W)`` or ``(B, H, W)``."""
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    h = entropy_map(probs)
    region = torch.as_tensor(region, dtype=torch.bool)
    region = region.expand_as(h)
    n = int(region.sum())
    if n == 0:
        warnings.warn("empty entropy region; contribution is 0", EventFlyWarning, stacklevel=2)
        return probs.sum() * 0.0
    return (h * region.to(h.dtype)).sum() / n


def eap_loss(probs_tgt: torch.Tensor, region, lam: float) -> torch.Tensor:
    """``lam`` times the mean prediction entropy over the high-activation region."""
    return lam * masked_mean_entropy(probs_tgt, region)


def _nll(p: torch.Tensor) -> torch.Tensor:
    return -p.clamp(PROB_EPS, 1.0 - PROB_EPS).log().mean()


def _check_prob(*maps):
    for m in maps:
        if bool(((m < 0) | (m > 1)).any()) or not bool(torch.isfinite(m).all()):
            raise DomainError("discriminator outputs must be probabilities")


def bce_pair(p_one: torch.Tensor, p_zero: torch.Tensor) -> torch.Tensor:
    """Average binary cross-entropy of a positive map (label 1) and a negative map (label 0)."""
    _check_prob(p_one, p_zero)
    return 0.5 * (_nll(p_one) + _nll(1.0 - p_zero))


def d1_loss(p_src: torch.Tensor, p_blend: torch.Tensor) -> torch.Tensor:
    """First discriminator: source features are class 1, blended features class 0."""
    return bce_pair(p_src, p_blend)


def d2_loss(p_blend: torch.Tensor, p_tgt: torch.Tensor) -> torch.Tensor:
    """Second discriminator: target features are class 1, blended features class 0."""
    return bce_pair(p_tgt, p_blend)


def adv_loss(p1_on_blend: torch.Tensor, p2_on_blend: torch.Tensor, phi1: float, phi2: float) -> torch.Tensor:
    """Fool both discriminators on blended features: ``phi1*(-log p1) + phi2*(-log p2)``."""
    _check_prob(p1_on_blend, p2_on_blend)
    return phi1 * _nll(p1_on_blend) + phi2 * _nll(p2_on_blend)


@dataclass
class LossReport:
    ce_src: float = 0.0
    ce_blend: float = 0.0
    eap_entropy: float = 0.0
    d1: float = 0.0
    d2: float = 0.0
    adv: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)

    def recombine(self) -> float:
        return weighted_total(asdict(self), self.weights.get("lam", 0.0))

    def as_dict(self) -> dict:
        return asdict(self)


PARTS = ("ce_src", "ce_blend", "eap_entropy", "d1", "d2", "adv")


def weighted_total(parts, lam):
    """Generator objective: supervised terms + ``lam`` * entropy + weighted adversarial term.

    Works on floats and on tensors alike; ``d1``/``d2`` train the discriminators and
    are not part of it.
    """
    return parts["ce_src"] + parts["ce_blend"] + lam * parts["eap_entropy"] + parts["adv"]


def total_objective(parts: dict, weights: dict) -> LossReport:
    """Validate every term, then record it together with the weighted total."""
    values = {}
    for name in PARTS:
        v = parts.get(name, 0.0)
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise TrainingAbort(name, f"value {v}")
        values[name] = v
    lam = float(weights.get("lam", 0.0))
    total = weighted_total(values, lam)
    return LossReport(**values, total=total, weights={k: float(v) for k, v in weights.items()})
