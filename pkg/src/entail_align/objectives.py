"""Training losses: embedding margin ranking, entailment BCE, prompt margin.

All losses are plain functions of numbers/vectors; gradient helpers used by
the training loop live alongside so the value and derivative definitions stay
in one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDivergedError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    margin_emb: float = 1.0
    margin_prompt: float = 0.5
    distance: str = "l2"
    prompt_margin_mode: str = "prob"  # hinge on positive probability or raw logit
    reduction: str = "sum"

    def __post_init__(self):
        if self.margin_emb < 0 or self.margin_prompt < 0:
            raise ValueError("margins must be >= 0")
        if self.distance != "l2":
            raise ValueError(f"only l2 distance is supported, got {self.distance!r}")
        if self.prompt_margin_mode not in ("prob", "logit"):
            raise ValueError(f"prompt_margin_mode must be prob/logit, got {self.prompt_margin_mode!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be sum/mean, got {self.reduction!r}")


@dataclass(frozen=True)
class TrainingTriple:
    anchor: str
    positive: str
    negative: str

    def __post_init__(self):
        if self.negative == self.positive:
            raise ValueError("negative entity must differ from the positive")


def margin_ranking_loss(batch, margin_emb, reduction="sum"):
    """sum/mean over (a, pos, neg) of max(0, ||a-pos|| - ||a-neg|| + margin)."""
    total = 0.0
    for emb_a, emb_pos, emb_neg in batch:
        emb_a, emb_pos, emb_neg = (np.asarray(v, dtype=float) for v in (emb_a, emb_pos, emb_neg))
        if not emb_a.shape == emb_pos.shape == emb_neg.shape:
            raise ValueError("embedding dimensions differ within a triple")
        d_pos = float(np.linalg.norm(emb_a - emb_pos))
        d_neg = float(np.linalg.norm(emb_a - emb_neg))
        total += max(0.0, d_pos - d_neg + margin_emb)
    if reduction == "mean" and batch:
        total /= len(batch)
    return total


def margin_ranking_grads(emb_a, emb_pos, emb_neg, margin_emb, dist_eps=1e-12):
    """Per-triple hinge value and gradients w.r.t. the three embeddings."""
    diff_pos = emb_a - emb_pos
    diff_neg = emb_a - emb_neg
    d_pos = float(np.linalg.norm(diff_pos))
    d_neg = float(np.linalg.norm(diff_neg))
    value = d_pos - d_neg + margin_emb
    if value <= 0.0:
        z = np.zeros_like(emb_a)
        return 0.0, z, z.copy(), z.copy()
    u_pos = diff_pos / max(d_pos, dist_eps)
    u_neg = diff_neg / max(d_neg, dist_eps)
    return value, u_pos - u_neg, -u_pos, u_neg


def entailment_bce(q_pos, q_neg, eps=BCE_EPS):
    """-log q_pos - log(1 - q_neg), probabilities clamped to (eps, 1-eps)."""
    q_pos = min(max(float(q_pos), eps), 1.0 - eps)
    q_neg = min(max(float(q_neg), eps), 1.0 - eps)
    return -math.log(q_pos) - math.log(1.0 - q_neg)


def bce_logit_grads(logits, target_positive):
    """Gradient of two-way-softmax BCE w.r.t. the two logits.

    ``target_positive`` is True for a positive pair (label word / next-class
    probability pushed to 1) and False for a negative pair.
    """
    z = logits - np.max(logits)
    e = np.exp(z)
    q = e / e.sum()
    y = np.array([1.0, 0.0]) if target_positive else np.array([0.0, 1.0])
    return q - y


def prompt_margin_loss(p_pos, p_neg, margin_prompt):
    """max(0, p_neg - p_pos + margin) on positive-class scores."""
    return max(0.0, float(p_neg) - float(p_pos) + margin_prompt)


def prompt_margin_grads(p_pos, p_neg, margin_prompt):
    """(value, d/dp_pos, d/dp_neg) of the prompt hinge."""
    value = float(p_neg) - float(p_pos) + margin_prompt
    if value <= 0.0:
        return 0.0, 0.0, 0.0
    return value, -1.0, 1.0


def positive_prob_logit_grad(logits):
    """(q_pos, dq_pos/dlogits) for the two-way softmax positive probability."""
    z = logits - np.max(logits)
    e = np.exp(z)
    q = e / e.sum()
    grad = q[0] * (np.array([1.0, 0.0]) - q)
    return float(q[0]), grad


def total_loss(l_mr, l_be, l_bm):
    """Sum of the three objectives; rejects non-finite inputs."""
    if not all(math.isfinite(x) for x in (l_mr, l_be, l_bm)):
        raise TrainingDivergedError(f"non-finite loss components: {(l_mr, l_be, l_bm)}")
    return l_mr + l_be + l_bm
