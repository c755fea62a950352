"""Training objectives. Every batch reduction is an arithmetic mean."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Tensor

_ONE = Tensor(1.0)


class MissingPart(KeyError):
    pass


@dataclass
class LossParts:
    cl: Tensor | None = None
    cm: Tensor | None = None
    adv: Tensor | None = None
    sc: Tensor | None = None


def semantic_consistency(r_s, f_sr) -> Tensor:
    """L1 distance between the frozen source feature and f^sr, batch mean."""
    r_s = E.as_tensor(r_s).detach()
    return E.tmean(E.l1_distance(E.as_tensor(f_sr), r_s))


def discrimination_loss(p_pos, p_neg) -> Tensor:
    """``-log p_pos - log(1 - p_neg)``, batch mean."""
    p_pos, p_neg = E.as_tensor(p_pos), E.as_tensor(p_neg)
    per = E.add(E.negate(E.log(p_pos)), E.negate(E.log(E.add(_ONE, E.negate(p_neg)))))
    return E.tmean(per)


def adversarial_loss(p_pos, p_neg) -> Tensor:
    return E.negate(discrimination_loss(p_pos, p_neg))


def cross_lingual(r_s, r_t) -> Tensor:
    """Squared Euclidean distance, batch mean."""
    return E.tmean(E.squared_l2(E.as_tensor(r_t), E.as_tensor(r_s).detach()))


def cosine_matrix(a, b) -> Tensor:
    return E.matmul(E.l2_normalize(E.as_tensor(a)), E.transpose(E.l2_normalize(E.as_tensor(b))))


def nce_from_similarity(sim, tau: float) -> Tensor:
    """Symmetric InfoNCE on a (B, B) similarity matrix whose diagonal holds the pairs."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    sim = E.as_tensor(sim)
    B = sim.shape[0]
    if sim.data.ndim != 2 or sim.shape[1] != B:
        raise E.ShapeMismatch(f"similarity must be square, got {sim.shape}")
    logits = E.scalar_mul(sim, 1.0 / tau)
    eye = Tensor(np.eye(B))
    rows = E.tsum(E.mul(E.log_softmax(logits, axis=1), eye), axis=1)
    cols = E.tsum(E.mul(E.log_softmax(logits, axis=0), eye), axis=0)
    return E.negate(E.tmean(E.add(rows, cols)))


def cross_modal_nce(r_t, r_v, tau: float) -> Tensor:
    """Bidirectional InfoNCE with cosine similarity scaled by 1/tau.

    Row ``i`` of ``r_t`` pairs with row ``i`` of ``r_v``.
    """
    r_t, r_v = E.as_tensor(r_t), E.as_tensor(r_v)
    if r_t.shape != r_v.shape:
        raise E.ShapeMismatch(f"{r_t.shape} vs {r_v.shape}")
    return nce_from_similarity(cosine_matrix(r_t, r_v), tau)


def total_loss(parts: LossParts | dict, weights, stage: str) -> Tensor:
    """Staged objective.

    ``cross_lingual``: L_CL + lambda_adv * L_adv + lambda_sc * L_sc.
    ``cross_modal``: L_CM. With ``weights.joint`` the full sum of all four is
    returned regardless of stage. Parts whose weight is zero may be omitted.
    """
    if isinstance(parts, dict):
        parts = LossParts(**parts)
    if stage not in ("cross_lingual", "cross_modal"):
        raise ValueError(f"unknown stage {stage!r}")

    def need(name):
        val = getattr(parts, name)
        if val is None:
            raise MissingPart(name)
        return E.as_tensor(val)

    terms: list[Tensor] = []
    if stage == "cross_lingual" or weights.joint:
        terms.append(need("cl"))
    if stage == "cross_modal" or weights.joint:
        terms.append(need("cm"))
    if stage == "cross_lingual" or weights.joint:
        if weights.lambda_adv != 0 or parts.adv is not None:
            terms.append(E.scalar_mul(need("adv"), weights.lambda_adv))
        if weights.lambda_sc != 0 or parts.sc is not None:
            terms.append(E.scalar_mul(need("sc"), weights.lambda_sc))
    out = terms[0]
    for t in terms[1:]:
        out = E.add(out, t)
    return out
