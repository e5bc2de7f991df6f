import numpy as np
import pytest

from smlstm import attention as att
from smlstm import autodiff as ad
from smlstm.config import FUSIONS, tiny_profile


def sig(z):
    return 1.0 / (1.0 + np.exp(-z))


def _side_params(rng, ctx_dim=2, cand_dim=2, H=2, A=3, zero=False):
    def w(*shape):
        return np.zeros(shape) if zero else rng.normal(size=shape)

    raw = {"W_context": w(ctx_dim, A), "b_context": w(A), "W_candidate": w(cand_dim, A), "b_candidate": w(A),
           "W_hidden": w(H, A), "b_hidden": w(A), "w_out": w(A), "b_out": np.zeros(())}
    return {k: ad.parameter(v, k) for k, v in raw.items()}


def test_zero_weights_give_zero_logits(rng):
    p = _side_params(rng, zero=True)
    for fusion in FUSIONS:
        out = att.instance_logits(rng.normal(size=2), rng.normal(size=(3, 2)), rng.normal(size=2), p, "full", fusion)
        assert np.array_equal(out.data, np.zeros(3))


def test_identical_candidates_identical_logits(rng):
    p = _side_params(rng)
    cand = np.repeat(rng.normal(size=(1, 2)), 4, axis=0)
    out = att.instance_logits(rng.normal(size=2), cand, rng.normal(size=2), p).data
    assert np.allclose(out, out[0], rtol=0, atol=0)


def test_hand_evaluated_logits():
    rng = np.random.default_rng(11)
    p = _side_params(rng)
    m, h = np.array([0.3, -1.2]), np.array([0.5, 0.1])
    cand = np.array([[1.0, 0.0], [0.0, 1.0], [-0.5, 2.0]])
    g = {k: v.data for k, v in p.items()}
    joint, separate = [], []
    for a in cand:
        ctx = m @ g["W_context"] + g["b_context"]
        cnd = a @ g["W_candidate"] + g["b_candidate"]
        hid = h @ g["W_hidden"] + g["b_hidden"]
        joint.append(g["w_out"] @ sig(ctx + cnd + hid) + g["b_out"])
        separate.append(g["w_out"] @ (sig(ctx) + sig(cnd) + sig(hid)) + g["b_out"])
    assert np.allclose(att.instance_logits(m, cand, h, p, "full", "joint").data, joint, atol=1e-15)
    assert np.allclose(att.instance_logits(m, cand, h, p, "full", "separate").data, separate, atol=1e-15)


def test_separate_fusion_ignores_context_and_state(rng):
    # the context and hidden branches shift every logit equally
    p = _side_params(rng)
    cand = rng.normal(size=(5, 2))
    base = att.saliency(att.instance_logits(rng.normal(size=2), cand, rng.normal(size=2), p, "full", "separate"))
    other = att.saliency(att.instance_logits(rng.normal(size=2), cand, rng.normal(size=2), p, "full", "separate"))
    assert np.allclose(base.data, other.data, atol=1e-14)
    joint_a = att.saliency(att.instance_logits(np.zeros(2), cand, np.zeros(2), p, "full", "joint"))
    joint_b = att.saliency(att.instance_logits(3 * np.ones(2), cand, np.zeros(2), p, "full", "joint"))
    assert not np.allclose(joint_a.data, joint_b.data)


def test_saliency_examples():
    assert np.allclose(att.saliency(np.zeros(196)).data, 1.0 / 196)
    one_hot = att.saliency(np.array([0.0, 1000.0, 0.0])).data
    assert one_hot[1] == pytest.approx(1.0) and one_hot[0] < 1e-300
    ratios = att.saliency(np.log([1.0, 2.0, 4.0])).data
    assert np.allclose(ratios, [1 / 7, 2 / 7, 4 / 7], atol=1e-15)


def test_mean_variant_rejected(rng):
    p = _side_params(rng)
    with pytest.raises(ad.ContractError):
        att.instance_logits(np.zeros(2), np.zeros((3, 2)), np.zeros(2), p, "mean")
    with pytest.raises(ad.ContractError):
        att.step_saliency(np.zeros(2), np.zeros((3, 2)), np.zeros(2), np.zeros((3, 2)), np.ones(3, bool),
                          np.zeros(2), {}, "mean")


def test_dimension_mismatch_named(rng):
    p = _side_params(rng)
    with pytest.raises(ad.DimensionError, match="W_candidate"):
        att.instance_logits(np.zeros(2), np.zeros((3, 5)), np.zeros(2), p)


def _model_params(cfg, seed=0):
    return att.init_attention_params(np.random.default_rng(seed), cfg)


def test_symmetric_inputs_uniform_maps(rng):
    cfg = tiny_profile()
    params = _model_params(cfg)
    img_c = np.repeat(rng.normal(size=(1, cfg.region_dim)), cfg.num_regions, axis=0)
    sent_c = np.repeat(rng.normal(size=(1, cfg.word_dim)), cfg.max_words, axis=0)
    mask = np.array([True, True, False])
    p, q = att.step_saliency(rng.normal(size=cfg.image_context_dim), img_c, rng.normal(size=cfg.sentence_context_dim),
                             sent_c, mask, rng.normal(size=cfg.hidden), params)
    assert np.allclose(p.data, 1 / cfg.num_regions, atol=1e-15)
    assert np.allclose(q.data, [0.5, 0.5, 0.0], atol=1e-15) and q.data[2] == 0.0


def test_step_saliency_hand_evaluated():
    cfg = tiny_profile()
    rng = np.random.default_rng(4)
    params = _model_params(cfg, 4)
    m, n = rng.normal(size=cfg.image_context_dim), rng.normal(size=cfg.sentence_context_dim)
    a, w = rng.normal(size=(4, cfg.region_dim)), rng.normal(size=(3, cfg.word_dim))
    h = rng.normal(size=cfg.hidden)
    mask = np.array([True, True, False])
    p, q = att.step_saliency(m, a, n, w, mask, h, params)

    def hand(side, ctx, cand, keep):
        g = {k.split(".")[-1]: v.data for k, v in params.items() if k.startswith(f"att.{side}.")}
        z = np.array([g["w_out"] @ sig(ctx @ g["W_context"] + g["b_context"] + c @ g["W_candidate"]
                                       + g["b_candidate"] + h @ g["W_hidden"] + g["b_hidden"]) + g["b_out"]
                      for c in cand])
        e = np.where(keep, np.exp(z - z[keep].max()), 0.0)
        return e / e.sum()

    assert np.allclose(p.data, hand("img", m, a, np.ones(4, bool)), atol=1e-15)
    assert np.allclose(q.data, hand("sent", n, w, mask), atol=1e-15)


def test_att_variant_has_no_context_params():
    params = _model_params(tiny_profile(variant="att"))
    assert not any("context" in k for k in params)
    assert any("W_candidate" in k for k in params)


def test_ctx_variant_equal_logits(rng):
    p = _side_params(rng)
    out = att.instance_logits(np.zeros(2), rng.normal(size=(4, 2)), np.zeros(2), p, "ctx")
    assert np.array_equal(out.data, np.zeros(4))


def test_uniform_saliency_masked():
    u = att.uniform_saliency((2, 4), np.array([[1, 1, 0, 0], [1, 1, 1, 1]], bool)).data
    assert u.tolist() == [[0.5, 0.5, 0.0, 0.0], [0.25] * 4]
    with pytest.raises(ad.DegenerateInputError):
        att.uniform_saliency((3,), np.zeros(3, bool))
