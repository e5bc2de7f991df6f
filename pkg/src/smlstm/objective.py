"""Bidirectional margin ranking loss and the attention-coverage penalty."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class InsufficientNegativesError(ValueError):
    pass


@dataclass
class LossBreakdown:
    hinge: float
    regularizer: float
    total: float
    margin: float
    lam: float

    def as_dict(self):
        return {"hinge": self.hinge, "regularizer": self.regularizer, "total": self.total}


def negative_mask(n: int, negatives_per_positive: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """[n, n] 0/1 mask; row i marks the sampled mismatched partners k != i.

    All n-1 partners are used when the request covers them (no RNG draw).
    """
    if n < 2:
        raise InsufficientNegativesError(f"need at least 2 pairs for negatives, got {n}")
    if negatives_per_positive < 1:
        raise ad.ContractError("negatives_per_positive must be >= 1")
    mask = np.zeros((n, n))
    if negatives_per_positive >= n - 1:
        mask[:] = 1.0
        np.fill_diagonal(mask, 0.0)
        return mask
    if rng is None:
        raise ad.ContractError("sampling fewer than n-1 negatives needs an rng")
    for i in range(n):
        others = np.delete(np.arange(n), i)
        picked = rng.choice(others, size=negatives_per_positive, replace=False)
        mask[i, picked] = 1.0
    return mask


def structured_hinge(scores, margin: float, negatives_per_positive: int = 100,
                     rng: Optional[np.random.Generator] = None, neg_mask: Optional[np.ndarray] = None) -> Tensor:
    """Sum over matched i and sampled k of
    max(0, m - s_ii + s_ik) + max(0, m - s_ii + s_ki).

    Rows are images and columns sentences; matched pairs sit on the diagonal.
    ``neg_mask`` overrides sampling when given.
    """
    scores = ad.as_tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ad.DimensionError(f"structured_hinge: need a square score matrix, got {scores.shape}")
    if margin <= 0:
        raise ad.ContractError(f"structured_hinge: margin must be > 0, got {margin}")
    n = scores.shape[0]
    if neg_mask is None:
        neg_mask = negative_mask(n, negatives_per_positive, rng)
    idx = np.arange(n)
    diag = ad.reshape(scores[idx, idx], (n, 1))
    sentence_side = ad.relu(scores - diag + margin)                  # [i, k]: s_ik
    image_side = ad.relu(ad.swapaxes(scores, 0, 1) - diag + margin)  # [i, k]: s_ki
    return ad.sum((sentence_side + image_side) * neg_mask)


def coverage_terms(image_trace, sentence_trace, sentence_mask) -> tuple:
    """Per-candidate (1 - sum_t saliency) for both modalities.

    Args:
        image_trace: sequence of T tensors [..., I].
        sentence_trace: sequence of T tensors [..., J].
        sentence_mask: bool [..., J]; padded words are excluded.
    """
    p_sum = image_trace[0]
    for p in image_trace[1:]:
        p_sum = p_sum + p
    q_sum = sentence_trace[0]
    for q in sentence_trace[1:]:
        q_sum = q_sum + q
    return 1.0 - p_sum, (1.0 - q_sum) * np.asarray(sentence_mask, dtype=np.float64)


def doubly_stochastic_penalty(image_trace: Sequence, sentence_trace: Sequence, sentence_mask, lam: float,
                              form: str = "signed") -> Tensor:
    """lam * (sum_i (1 - sum_t p_ti) + sum_j (1 - sum_t q_tj)), summed over pairs.

    ``form="signed"`` keeps the terms as printed; ``"squared"`` squares each
    term first. Traces may carry any leading pair axes.
    """
    if lam < 0:
        raise ad.ContractError(f"penalty weight must be >= 0, got {lam}")
    img_terms, sent_terms = coverage_terms(image_trace, sentence_trace, sentence_mask)
    if form == "squared":
        img_terms, sent_terms = ad.square(img_terms), ad.square(sent_terms)
    elif form != "signed":
        raise ad.ContractError(f"unknown regularizer form {form!r}")
    return (ad.sum(img_terms) + ad.sum(sent_terms)) * float(lam)


def total_loss(scores, image_trace, sentence_trace, sentence_mask, margin: float, lam: float,
               negatives_per_positive: int = 100, rng: Optional[np.random.Generator] = None,
               form: str = "signed", neg_mask: Optional[np.ndarray] = None):
    """Returns ``(loss_tensor, LossBreakdown)``.

    The traces passed here are those of the matched pairs only.
    """
    hinge = structured_hinge(scores, margin, negatives_per_positive, rng, neg_mask)
    if lam == 0:
        reg = Tensor(0.0)
        total = hinge
    else:
        reg = doubly_stochastic_penalty(image_trace, sentence_trace, sentence_mask, lam, form)
        total = hinge + reg
    return total, LossBreakdown(hinge.item(), reg.item(), total.item(), margin, lam)
