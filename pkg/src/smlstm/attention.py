"""Context-modulated instance attention.

Each modality scores its candidates from three inputs: the global context,
the candidate itself, and the previous aggregation state. The scores become
a saliency distribution over candidates.

Two fusions are available:

``joint`` (default)
    ``w_out . sigmoid(ctx W_c + b_c + cand W_a + b_a + h W_h + b_h) + b_out``

``separate``
    ``w_out . (sigmoid(ctx W_c + b_c) + sigmoid(cand W_a + b_a) + sigmoid(h W_h + b_h)) + b_out``

With ``separate`` the context and hidden branches add the same constant to
every candidate's logit, so they vanish under the softmax and the saliency
map depends on the candidates alone. ``joint`` lets all three inputs
interact before the readout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIDES = ("img", "sent")
ATTENTIVE_VARIANTS = ("full", "att")


@dataclass
class SaliencyMap:
    image: np.ndarray     # [I]
    sentence: np.ndarray  # [J]


def _side(params: Dict[str, Tensor], side: str) -> Dict[str, Tensor]:
    prefix = f"att.{side}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def project_static(context: Tensor, candidates: Tensor, p: Dict[str, Tensor], variant: str):
    """Context and candidate branches, which do not change across timesteps.

    Returns ``(ctx_pre, cand_pre)`` with shapes [..., 1, A] and [..., K, A];
    ``ctx_pre`` is None when the variant ignores global context.
    """
    cand_pre = ad.affine(candidates, p["W_candidate"], p["b_candidate"])
    if variant == "att":
        return None, cand_pre
    ctx_pre = ad.affine(context, p["W_context"], p["b_context"])
    return ad.expand_dims(ctx_pre, -2), cand_pre


def logits_from_static(ctx_pre: Optional[Tensor], cand_pre: Tensor, h_prev: Tensor,
                       p: Dict[str, Tensor], fusion: str = "joint") -> Tensor:
    hid_pre = ad.expand_dims(ad.affine(h_prev, p["W_hidden"], p["b_hidden"]), -2)
    w_out = ad.reshape(p["w_out"], (-1, 1))
    if fusion == "joint":
        pre = cand_pre + hid_pre if ctx_pre is None else cand_pre + ctx_pre + hid_pre
        act = ad.sigmoid(pre)
    elif fusion == "separate":
        act = ad.sigmoid(cand_pre) + ad.sigmoid(hid_pre)
        if ctx_pre is not None:
            act = act + ad.sigmoid(ctx_pre)
    else:
        raise ad.ContractError(f"unknown attention fusion {fusion!r}")
    logits = ad.linear(act, w_out)
    return ad.reshape(logits, logits.shape[:-1]) + p["b_out"]


def instance_logits(context, candidates, h_prev, params: Dict[str, Tensor], variant: str = "full",
                    fusion: str = "joint") -> Tensor:
    """Unnormalised attention scores for every candidate.

    Args:
        context: global context [..., Dc].
        candidates: instance candidates [..., K, C].
        h_prev: previous aggregation hidden state [..., H].
        params: the attention block of one side (keys without the
            ``att.<side>.`` prefix).
        variant: ``full`` or ``att``; ``ctx`` gives equal logits;
            ``mean`` has no logits.

    Returns:
        Tensor [..., K].
    """
    context, candidates, h_prev = ad.as_tensor(context), ad.as_tensor(candidates), ad.as_tensor(h_prev)
    if variant == "mean":
        raise ad.ContractError("instance_logits: the mean variant bypasses attention")
    _check_shapes(context, candidates, h_prev, params, variant)
    if variant == "ctx":
        return Tensor(np.zeros(np.broadcast_shapes(candidates.shape[:-1], h_prev.shape[:-1] + (1,))))
    ctx_pre, cand_pre = project_static(context, candidates, params, variant)
    return logits_from_static(ctx_pre, cand_pre, h_prev, params, fusion)


def _check_shapes(context, candidates, h_prev, p, variant):
    problems = []
    if candidates.shape[-1] != p["W_candidate"].shape[0]:
        problems.append(f"candidates{candidates.shape} vs W_candidate{p['W_candidate'].shape}")
    if h_prev.shape[-1] != p["W_hidden"].shape[0]:
        problems.append(f"h_prev{h_prev.shape} vs W_hidden{p['W_hidden'].shape}")
    if variant != "att" and "W_context" in p and context.shape[-1] != p["W_context"].shape[0]:
        problems.append(f"context{context.shape} vs W_context{p['W_context'].shape}")
    if problems:
        raise ad.DimensionError("instance_logits: " + "; ".join(problems))


def saliency(logits, mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked softmax over the last axis."""
    return ad.softmax_stable(logits, mask, axis=-1)


def uniform_saliency(shape: Tuple[int, ...], mask: Optional[np.ndarray] = None) -> Tensor:
    """Equal weight on every kept position (mean pooling)."""
    keep = np.ones(shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)
    counts = keep.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ad.DegenerateInputError("uniform_saliency: every position masked out")
    return Tensor(keep / counts)


def step_saliency(img_context, img_candidates, sent_context, sent_candidates, sent_mask, h_prev,
                  params: Dict[str, Tensor], variant: str = "full", fusion: str = "joint"):
    """Saliency over image regions and over words for one timestep.

    Returns ``(p, q)`` as tensors; see :func:`step_saliency_map` for the
    plain-array form.
    """
    if variant not in ATTENTIVE_VARIANTS:
        raise ad.ContractError(f"step_saliency: variant {variant!r} does not predict saliency")
    p = saliency(instance_logits(img_context, img_candidates, h_prev, _side(params, "img"), variant, fusion))
    q = saliency(instance_logits(sent_context, sent_candidates, h_prev, _side(params, "sent"), variant, fusion),
                 sent_mask)
    return p, q


def step_saliency_map(img, sent, h_prev, params, variant: str = "full", fusion: str = "joint") -> SaliencyMap:
    """Single-pair form taking a FeatureGrid and an EncodedSentence."""
    p, q = step_saliency(img.context, img.candidates, sent.context, sent.candidates, sent.mask,
                         h_prev, params, variant, fusion)
    return SaliencyMap(p.data.copy(), q.data.copy())


def init_attention_params(rng: np.random.Generator, cfg) -> Dict[str, Tensor]:
    A, H = cfg.attention_width, cfg.hidden
    dims = {"img": (cfg.image_context_dim, cfg.region_dim), "sent": (cfg.sentence_context_dim, cfg.word_dim)}
    out = {}
    for side, (ctx_dim, cand_dim) in dims.items():
        if cfg.variant == "full":
            out[f"att.{side}.W_context"] = ad.glorot_uniform(rng, ctx_dim, A)
            out[f"att.{side}.b_context"] = np.zeros(A)
        out[f"att.{side}.W_candidate"] = ad.glorot_uniform(rng, cand_dim, A)
        out[f"att.{side}.b_candidate"] = np.zeros(A)
        out[f"att.{side}.W_hidden"] = ad.glorot_uniform(rng, H, A)
        out[f"att.{side}.b_hidden"] = np.zeros(A)
        out[f"att.{side}.w_out"] = ad.glorot_uniform(rng, A, 1)[:, 0]
        out[f"att.{side}.b_out"] = np.zeros(())
    return {k: ad.parameter(v, k) for k, v in out.items()}
