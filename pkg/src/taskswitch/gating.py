"""Learnable soft gating over task vector magnitudes.

Two scalar logits place a pruning threshold inside each sign class's
magnitude range through a squashed arctan map; a pair of temperature-scaled
sigmoids turns the thresholds into a soft 0..1 mask, and a softplus scale
knob multiplies the surviving weights. All formulas run on plain arrays or
on the gradient tape (see autodiff).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .vectors import SignedBounds, signed_bounds

EPS_RANGE = 1e-12  # guards the sigmoid denominator when a class is degenerate

INIT_SCALE_LOGIT = math.log(math.e - 1.0)  # softplus(.) == 1 at init


@dataclass
class GateParams:
    """Per-module learnables: two threshold logits and the scale logit."""

    threshold_pos: float = 0.0
    threshold_neg: float = 0.0
    scale_logit: float = INIT_SCALE_LOGIT


@dataclass
class GateOutput:
    soft_mask: object        # M, unscaled, ndarray or Var
    scaled_mask: object      # softplus(scale_logit) * M
    temperature: float


def squash(s):
    """arctan(s)/pi + 0.5: monotone map of the real line onto (0, 1)."""
    return ad.add(ad.div(ad.arctan(s), math.pi), 0.5)


def map_threshold(logit, bounds: SignedBounds, sign: str):
    """Place a threshold magnitude inside one sign class's magnitude range.

    Returns (threshold, range_width). The threshold is
    v_min + squash(logit) * (v_max - v_min), always strictly inside the
    open interval for finite logits.
    """
    if sign == "+":
        if not bounds.has_pos:
            raise ValueError("positive class is empty")
        lo, hi = bounds.pos_min, bounds.pos_max
    elif sign == "-":
        if not bounds.has_neg:
            raise ValueError("negative class is empty")
        lo, hi = bounds.neg_min, bounds.neg_max
    else:
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    width = hi - lo
    return ad.add(lo, ad.mul(squash(logit), width)), width


def soft_gate(v: np.ndarray, params, temperature: float,
              bounds: SignedBounds | None = None) -> GateOutput:
    """Soft membership of every element in the retained set.

    M_j = sigmoid((v_j - t_+)/(rho * r_+)) + sigmoid((-t_- - v_j)/(rho * r_-))
    with one term per populated sign class; an empty class contributes
    nothing. params may carry plain floats or tape Vars.
    """
    v = np.asarray(v, dtype=np.float64)
    if bounds is None:
        bounds = signed_bounds(v)
    rho = float(temperature)
    terms = []
    if bounds.has_pos:
        t_pos, r_pos = map_threshold(params.threshold_pos, bounds, "+")
        denom = rho * max(r_pos, EPS_RANGE)
        terms.append(ad.sigmoid(ad.div(ad.sub(v, t_pos), denom)))
    if bounds.has_neg:
        t_neg, r_neg = map_threshold(params.threshold_neg, bounds, "-")
        denom = rho * max(r_neg, EPS_RANGE)
        terms.append(ad.sigmoid(ad.div(ad.sub(ad.mul(t_neg, -1.0), v), denom)))
    if not terms:
        soft = np.zeros_like(v)
    elif len(terms) == 1:
        soft = terms[0]
    else:
        soft = ad.add(terms[0], terms[1])
    scaled = ad.mul(ad.softplus(params.scale_logit), soft)
    return GateOutput(soft_mask=soft, scaled_mask=scaled, temperature=rho)


def sparsity_loss(soft_masks: list) -> object:
    """Mean soft activation over all modules: sum ||M^l||_1 / sum n_l.

    Uses the unscaled masks, so the scale knob cannot cheat the objective.
    """
    total_n = sum(ad._np(m).size for m in soft_masks)
    acc = None
    for m in soft_masks:
        s = ad.sum_(m)
        acc = s if acc is None else ad.add(acc, s)
    return ad.div(acc, float(total_n))


def harden(soft_mask) -> np.ndarray:
    """Final binary mask: strictly greater than 1/2 survives."""
    return ad._np(soft_mask) > 0.5


def temperature_schedule(step: int, initial: float = 1.0, decay: float = 0.9,
                         interval: int = 10) -> float:
    """Annealed gate temperature: initial * decay^(step // interval)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return initial * decay ** (step // interval)
