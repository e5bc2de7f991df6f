"""Attended summaries, local similarity, similarity aggregation and scoring.

``forward_pairs`` scores every (image, sentence) combination of a batch at
once: tensors carry leading axes [N_img, N_sent] so a whole score matrix is
one vectorised unroll.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncodedSentence, FeatureGrid


@dataclass
class AggregatorState:
    h: Tensor
    c: Tensor


@dataclass
class PairForwardResult:
    """Scores and attention traces.

    For a single pair ``score`` is a scalar tensor, ``image_trace`` is
    [T, I] and ``sentence_trace`` is [T, J]. ``forward_pairs`` returns the
    batched shapes [Ni, Ns], [T, Ni, Ns, I] and [T, Ni, Ns, J].
    """

    score: Tensor
    image_trace: List[Tensor]
    sentence_trace: List[Tensor]
    local_similarities: List[Tensor]

    @property
    def timesteps(self) -> int:
        return len(self.image_trace)

    def trace_arrays(self):
        return np.stack([p.data for p in self.image_trace]), np.stack([q.data for q in self.sentence_trace])


def attended_summary(saliency, candidates) -> Tensor:
    """Saliency-weighted sum of candidate rows.

    Args:
        saliency: [..., K], non-negative and summing to one.
        candidates: [..., K, C]; leading axes broadcast with ``saliency``.
    """
    saliency, candidates = ad.as_tensor(saliency), ad.as_tensor(candidates)
    if saliency.shape[-1] != candidates.shape[-2]:
        raise ad.DimensionError(
            f"attended_summary: {saliency.shape[-1]} weights for {candidates.shape[-2]} candidates"
        )
    out = ad.matmul(ad.expand_dims(saliency, -2), candidates)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def local_similarity(image_summary, sentence_summary, params: Dict[str, Tensor]) -> Tensor:
    """sigmoid(a' W_img + w' W_sent + b_sim)."""
    return ad.sigmoid(
        ad.linear(image_summary, params["agg.sim.W_img"])
        + ad.affine(sentence_summary, params["agg.sim.W_sent"], params["agg.sim.b"])
    )


_GATES = ("i", "f", "c", "o")

# gate letter whose sigmoid gets a wrong local gradient; mutation testing only
CORRUPT_GATE = None


def _gate(x: Tensor, gate: str) -> Tensor:
    out = ad.sigmoid(x)
    if gate == CORRUPT_GATE and out.requires_grad:
        s = out.data
        out._backward = lambda g: (g * s,)
    return out


def aggregate_step(s_t, state: AggregatorState, params: Dict[str, Tensor]) -> AggregatorState:
    """One step of the gated aggregation cell.

    i = sig(s W_si + h W_hi + b_i), f and o likewise,
    c' = f * c + i * tanh(s W_sc + h W_hc + b_c), h' = o * tanh(c').
    """
    pre = {}
    for g in _GATES:
        pre[g] = ad.linear(s_t, params[f"agg.cell.W_s{g}"]) + ad.affine(
            state.h, params[f"agg.cell.W_h{g}"], params[f"agg.cell.b_{g}"]
        )
    i, f, o = _gate(pre["i"], "i"), _gate(pre["f"], "f"), _gate(pre["o"], "o")
    c = f * state.c + i * ad.tanh(pre["c"])
    return AggregatorState(o * ad.tanh(c), c)


def matching_score(h_T, params: Dict[str, Tensor]) -> Tensor:
    """s = w_hs . sigmoid(h_T W_hh + b_h) + b_s, over the last axis of h_T."""
    hidden = ad.sigmoid(ad.affine(h_T, params["agg.score.W_hh"], params["agg.score.b_h"]))
    s = ad.linear(hidden, ad.reshape(params["agg.score.w_hs"], (-1, 1)))
    return ad.reshape(s, s.shape[:-1]) + params["agg.score.b_s"]


def initial_state(img_context: Tensor, sent_context: Tensor, params, variant: str, lead) -> AggregatorState:
    """Zero state, except the context-only variant seeds h_0 from both global contexts."""
    H = params["agg.cell.W_hi"].shape[0]
    zeros = Tensor(np.zeros(tuple(lead) + (H,)))
    if variant != "ctx":
        return AggregatorState(zeros, zeros)
    pre = (
        ad.linear(img_context, params["agg.init.W_img"])
        + ad.affine(sent_context, params["agg.init.W_sent"], params["agg.init.b"])
    )
    h0 = ad.sigmoid(pre) + zeros
    return AggregatorState(h0, zeros)


def forward_pairs(img_candidates, img_context, sentences: EncodedSentence, params: Dict[str, Tensor],
                  timesteps: int, variant: str = "full", fusion: str = "joint") -> PairForwardResult:
    """Score every image against every sentence.

    Args:
        img_candidates: [Ni, I, F] region features.
        img_context: [Ni, D] image global contexts.
        sentences: batch encoding with candidates [Ns, J, G], context [Ns, E].
        timesteps: number of attend-compare-aggregate steps T >= 1.

    Returns:
        PairForwardResult with score [Ni, Ns] and per-step traces
        [Ni, Ns, I] / [Ni, Ns, J].
    """
    if timesteps < 1:
        raise ad.ContractError(f"forward_pairs: timesteps must be >= 1, got {timesteps}")
    a = ad.as_tensor(img_candidates)
    m = ad.as_tensor(img_context)
    w, n, mask = sentences.candidates, sentences.context, sentences.mask
    ni, I = a.shape[0], a.shape[1]
    ns, J = w.shape[0], w.shape[1]
    if m.shape[0] != ni or n.shape[0] != ns or mask.shape != (ns, J):
        raise ad.DimensionError("forward_pairs: batch axes of candidates, contexts and mask disagree")

    # broadcast layout: image tensors [Ni, 1, ...], sentence tensors [1, Ns, ...]
    a_b = ad.expand_dims(a, 1)
    w_b = ad.expand_dims(w, 0)
    m_b = ad.expand_dims(m, 1)
    n_b = ad.expand_dims(n, 0)
    word_mask = mask[None, :, :]

    state = initial_state(m_b, n_b, params, variant, (ni, ns))
    attentive = variant in att.ATTENTIVE_VARIANTS
    if attentive:
        img_p, sent_p = att._side(params, "img"), att._side(params, "sent")
        img_static = att.project_static(m_b, a_b, img_p, variant)
        sent_static = att.project_static(n_b, w_b, sent_p, variant)
    else:
        p_fixed = att.uniform_saliency((ni, ns, I))
        q_fixed = att.uniform_saliency((ni, ns, J), word_mask)
        a_fixed = attended_summary(p_fixed, a_b)
        w_fixed = attended_summary(q_fixed, w_b)
        s_fixed = local_similarity(a_fixed, w_fixed, params)

    p_trace, q_trace, sims = [], [], []
    for _ in range(timesteps):
        if attentive:
            p = att.saliency(att.logits_from_static(*img_static, state.h, img_p, fusion))
            q = att.saliency(att.logits_from_static(*sent_static, state.h, sent_p, fusion), word_mask)
            s_t = local_similarity(attended_summary(p, a_b), attended_summary(q, w_b), params)
        else:
            p, q, s_t = p_fixed, q_fixed, s_fixed
        state = aggregate_step(s_t, state, params)
        p_trace.append(p)
        q_trace.append(q)
        sims.append(s_t)
    return PairForwardResult(matching_score(state.h, params), p_trace, q_trace, sims)


def forward_pair(img: FeatureGrid, sent: EncodedSentence, params: Dict[str, Tensor], timesteps: int,
                 variant: str = "full", fusion: str = "joint") -> PairForwardResult:
    """Score one image against one (already encoded) sentence."""
    cand = sent.candidates if sent.candidates.ndim == 3 else ad.expand_dims(sent.candidates, 0)
    ctx = sent.context if sent.context.ndim == 2 else ad.expand_dims(sent.context, 0)
    mask = sent.mask if sent.mask.ndim == 2 else sent.mask[None, :]
    res = forward_pairs(img.candidates[None], img.context[None], EncodedSentence(cand, ctx, mask), params,
                        timesteps, variant, fusion)
    return PairForwardResult(
        res.score[0, 0],
        [p[0, 0] for p in res.image_trace],
        [q[0, 0] for q in res.sentence_trace],
        [s[0, 0] for s in res.local_similarities],
    )


def init_aggregator_params(rng: np.random.Generator, cfg) -> Dict[str, Tensor]:
    S, H, Hs = cfg.similarity_width, cfg.hidden, cfg.score_hidden
    g = ad.glorot_uniform
    out = {
        "agg.sim.W_img": g(rng, cfg.region_dim, S),
        "agg.sim.W_sent": g(rng, cfg.word_dim, S),
        "agg.sim.b": np.zeros(S),
    }
    for gate in _GATES:
        out[f"agg.cell.W_s{gate}"] = g(rng, S, H)
        out[f"agg.cell.W_h{gate}"] = g(rng, H, H)
        out[f"agg.cell.b_{gate}"] = np.zeros(H)
    out["agg.score.W_hh"] = g(rng, H, Hs)
    out["agg.score.b_h"] = np.zeros(Hs)
    out["agg.score.w_hs"] = g(rng, Hs, 1)[:, 0]
    out["agg.score.b_s"] = np.zeros(())
    if cfg.variant == "ctx":
        out["agg.init.W_img"] = g(rng, cfg.image_context_dim, H)
        out["agg.init.W_sent"] = g(rng, cfg.sentence_context_dim, H)
        out["agg.init.b"] = np.zeros(H)
    return {k: ad.parameter(v, k) for k, v in out.items()}
