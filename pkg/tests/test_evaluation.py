import numpy as np
import pytest

from smlstm import aggregator as agg
from smlstm.autodiff import ContractError, DimensionError
from smlstm.config import tiny_profile
from smlstm.encoders import FeatureGrid
from smlstm.evaluation import (
    GroundTruth,
    average_traces,
    ensemble,
    export_saliency,
    first_hit_ranks,
    median_rank,
    metrics_report,
    parse_grid,
    read_pgm,
    recall_at_k,
    score_all,
    to_pgm,
)
from smlstm.model import SmLSTM


def oracle_ranks(scores, truth, direction):
    """Rank by sorting (score desc, index asc) tuples."""
    S = np.asarray(scores)
    if direction == "retrieval":
        S = S.T
        targets = [[i] for i in truth.sentence_to_image]
    else:
        targets = truth.image_to_sentences
    out = []
    for q, row in enumerate(S):
        ranked = sorted(range(len(row)), key=lambda j: (-row[j], j))
        out.append(min(ranked.index(t) + 1 for t in targets[q]))
    return out


def test_diagonal_dominant_recall():
    S = np.eye(4) * 5 + 0.1
    truth = GroundTruth.identity(4)
    assert recall_at_k(S, truth, 1, "annotation") == 100.0
    assert recall_at_k(S, truth, 1, "retrieval") == 100.0
    anti = GroundTruth.from_owners([3, 2, 1, 0])
    assert recall_at_k(S, anti, 1, "annotation") == 0.0


def test_hand_built_five_by_five():
    S = np.array([
        [0.9, 0.1, 0.3, 0.2, 0.0],
        [0.8, 0.5, 0.1, 0.0, 0.2],
        [0.0, 0.1, 0.2, 0.9, 0.3],
        [0.1, 0.2, 0.3, 0.4, 0.5],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ])
    truth = GroundTruth.identity(5)
    assert first_hit_ranks(S, truth, "annotation").tolist() == [1, 2, 3, 2, 1]
    assert first_hit_ranks(S, truth, "retrieval").tolist() == [1, 1, 3, 2, 1]
    assert recall_at_k(S, truth, 1, "annotation") == 40.0
    assert recall_at_k(S, truth, 2, "annotation") == 80.0
    assert recall_at_k(S, truth, 1, "retrieval") == 60.0


def test_median_rank_examples():
    assert median_rank(np.eye(3), GroundTruth.identity(3), "annotation") == 1.0
    S3 = np.array([[0.9, 0.1, 0.0], [0.8, 0.7, 0.1]])
    truth = GroundTruth([[0], [2]], np.array([0, 0, 1]))
    assert first_hit_ranks(S3, truth, "annotation").tolist() == [1, 3]
    assert median_rank(S3, truth, "annotation") == 2.0


def test_ties_break_toward_lower_index():
    S = np.zeros((3, 3))
    truth = GroundTruth.identity(3)
    assert first_hit_ranks(S, truth, "annotation").tolist() == [1, 2, 3]


def test_randomised_against_oracle(rng):
    for _ in range(30):
        ni, per = int(rng.integers(1, 6)), int(rng.integers(1, 3))
        owner = np.repeat(np.arange(ni), per)
        rng.shuffle(owner)
        S = rng.integers(0, 3, size=(ni, len(owner))).astype(float)  # many ties
        truth = GroundTruth.from_owners(owner, ni)
        for d in ("annotation", "retrieval"):
            ranks = oracle_ranks(S, truth, d)
            assert first_hit_ranks(S, truth, d).tolist() == ranks
            assert median_rank(S, truth, d) == float(np.median(ranks))


def test_recall_k_out_of_range():
    with pytest.raises(ContractError):
        recall_at_k(np.eye(3), GroundTruth.identity(3), 4, "annotation")
    with pytest.raises(ContractError):
        recall_at_k(np.eye(3), GroundTruth.identity(3), 1, "sideways")


def test_truth_shape_checked():
    with pytest.raises(DimensionError):
        recall_at_k(np.eye(3), GroundTruth.identity(4), 1, "annotation")


def test_metrics_report_sum_and_clamp():
    rep = metrics_report(np.eye(4), GroundTruth.identity(4))
    assert rep.annotation["R@1"] == 100.0 and rep.annotation["R@10"] == 100.0
    assert rep.sum == 600.0
    assert rep.to_dict()["Sum"] == 600.0


def test_ensemble_examples(rng):
    M = rng.normal(size=(3, 4))
    assert np.array_equal(ensemble([M]), M)
    assert np.array_equal(ensemble([M, -M]), np.zeros((3, 4)))
    with pytest.raises(DimensionError):
        ensemble([M, np.zeros((4, 3))])
    with pytest.raises(ContractError):
        ensemble([])


def _model():
    cfg = tiny_profile()
    return SmLSTM.initialize(cfg, seed=3), cfg


def _inputs(cfg, rng, n):
    cand = rng.normal(size=(n, cfg.num_regions, cfg.region_dim))
    ctx = rng.normal(size=(n, cfg.image_context_dim))
    mask = np.arange(cfg.max_words)[None, :] < rng.integers(1, cfg.max_words + 1, size=n)[:, None]
    ids = np.where(mask, rng.integers(2, cfg.vocab_size, size=(n, cfg.max_words)), 0)
    return cand, ctx, ids, mask


def test_score_all_matches_looped_single_calls(rng):
    model, cfg = _model()
    cand, ctx, ids, mask = _inputs(cfg, rng, 3)
    S = score_all(model, cand, ctx, ids, mask)
    for i in range(3):
        img = FeatureGrid(cand[i], ctx[i], cfg.grid_rows, cfg.grid_cols)
        for j in range(3):
            one = model.encode(ids[j:j + 1], mask[j:j + 1])
            single = agg.forward_pair(img, one, model.params, cfg.timesteps, cfg.variant).score.item()
            assert S[i, j] == pytest.approx(single, abs=1e-13)


def test_score_all_one_by_one_and_duplicate_columns(rng):
    model, cfg = _model()
    cand, ctx, ids, mask = _inputs(cfg, rng, 2)
    assert score_all(model, cand[:1], ctx[:1], ids[:1], mask[:1]).shape == (1, 1)
    dup_ids, dup_mask = np.concatenate([ids, ids[:1]]), np.concatenate([mask, mask[:1]])
    S = score_all(model, cand, ctx, dup_ids, dup_mask)
    assert np.array_equal(S[:, 0], S[:, 2])


def test_score_matrix_chunking_is_exact(rng):
    model, cfg = _model()
    cand, ctx, ids, mask = _inputs(cfg, rng, 5)
    full = model.score_matrix(cand, ctx, ids, mask, chunk=64)
    chunked = model.score_matrix(cand, ctx, ids, mask, chunk=2)
    assert np.allclose(full, chunked, atol=1e-14)


# ---------------------------------------------------------------- saliency export


def test_uniform_map_constant_gray(tmp_path):
    trace = np.full((1, 4), 0.25)
    export_saliency(trace, np.zeros((1, 0)), 2, 2, [], tmp_path, "u")
    px = read_pgm((tmp_path / "u_t1.pgm").read_bytes())
    assert px.shape == (2, 2) and np.all(px == px[0, 0])


def test_one_hot_map_single_bright_cell(tmp_path):
    trace = np.eye(4)[:1]
    export_saliency(trace, np.array([[0.1, 0.7, 0.2]]), 2, 2, ["a", "dog", "runs"], tmp_path, "h")
    px = read_pgm((tmp_path / "h_t1.pgm").read_bytes())
    assert px[0, 0] == 255 and px.sum() == 255
    assert (tmp_path / "h_words.txt").read_text() == "t1\tdog runs\n"


def test_pgm_upsampling():
    px = read_pgm(to_pgm(np.array([[1.0, 0.0], [0.0, 0.5]]), size=(4, 6)))
    assert px.shape == (4, 6)
    assert np.all(px[:2, :3] == 255) and np.all(px[2:, 3:] == 128) and np.all(px[:2, 3:] == 0)


def test_average_export_equals_mean_of_exports(tmp_path, rng):
    traces = [rng.dirichlet(np.ones(4), size=3) for _ in range(5)]
    for k, t in enumerate(traces):
        export_saliency(t, np.zeros((3, 0)), 2, 2, [], tmp_path, f"p{k}")
    export_saliency(average_traces(traces), np.zeros((3, 0)), 2, 2, [], tmp_path, "avg")
    for t in range(1, 4):
        grids = [parse_grid((tmp_path / f"p{k}_t{t}.txt").read_text()) for k in range(5)]
        avg = parse_grid((tmp_path / f"avg_t{t}.txt").read_text())
        assert np.allclose(avg, np.mean(grids, axis=0), atol=1e-15)


def test_export_geometry_mismatch(tmp_path):
    with pytest.raises(DimensionError):
        export_saliency(np.full((1, 5), 0.2), np.zeros((1, 0)), 2, 2, [], tmp_path, "x")
