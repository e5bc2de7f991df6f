"""Retrieval metrics, score-matrix ensembling and saliency export.

Rows of a score matrix are images and columns are sentences. Annotation
ranks sentences for each image; retrieval ranks images for each sentence.
Ties are broken by ascending candidate index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import ContractError, DimensionError

DIRECTIONS = ("annotation", "retrieval")
KS = (1, 5, 10)


@dataclass
class GroundTruth:
    """image -> matching sentence indices, and sentence -> image."""

    image_to_sentences: List[List[int]]
    sentence_to_image: np.ndarray

    @classmethod
    def from_owners(cls, owner: Sequence[int], num_images: Optional[int] = None) -> "GroundTruth":
        owner = np.asarray(owner, dtype=np.int64)
        n = int(owner.max()) + 1 if num_images is None else num_images
        groups: List[List[int]] = [[] for _ in range(n)]
        for s, i in enumerate(owner):
            groups[int(i)].append(s)
        return cls(groups, owner)

    @classmethod
    def identity(cls, n: int) -> "GroundTruth":
        return cls.from_owners(np.arange(n), n)

    def validate(self, shape) -> None:
        ni, ns = shape
        if len(self.image_to_sentences) != ni or len(self.sentence_to_image) != ns:
            raise DimensionError(f"ground truth covers {len(self.image_to_sentences)}x{len(self.sentence_to_image)}"
                                 f" but scores are {ni}x{ns}")
        for i, sents in enumerate(self.image_to_sentences):
            for s in sents:
                if self.sentence_to_image[s] != i:
                    raise ContractError(f"ground truth maps disagree at image {i}, sentence {s}")


def first_hit_ranks(scores: np.ndarray, truth: GroundTruth, direction: str) -> np.ndarray:
    """1-based rank of the best-ranked ground-truth item for every query."""
    scores = np.asarray(scores, dtype=np.float64)
    truth.validate(scores.shape)
    if direction == "annotation":
        queries = scores
        targets = truth.image_to_sentences
    elif direction == "retrieval":
        queries = scores.T
        targets = [[int(i)] for i in truth.sentence_to_image]
    else:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    ranks = np.empty(len(queries), dtype=np.int64)
    for q, row in enumerate(queries):
        order = np.argsort(-row, kind="stable")
        position = np.empty_like(order)
        position[order] = np.arange(1, len(order) + 1)
        ranks[q] = position[targets[q]].min()
    return ranks


def _percent(hits: np.ndarray) -> float:
    # 100 * hits / n, a single rounding
    return 100.0 * int(np.count_nonzero(hits)) / hits.size


def recall_at_k(scores, truth: GroundTruth, k: int, direction: str) -> float:
    """Percentage of queries with a ground-truth item in the top ``k``."""
    scores = np.asarray(scores)
    count = scores.shape[1] if direction == "annotation" else scores.shape[0]
    if k < 1 or k > count:
        raise ContractError(f"recall_at_k: k={k} outside [1, {count}]")
    ranks = first_hit_ranks(scores, truth, direction)
    return _percent(ranks <= k)


def median_rank(scores, truth: GroundTruth, direction: str) -> float:
    return float(np.median(first_hit_ranks(scores, truth, direction)))


@dataclass
class MetricsReport:
    annotation: Dict[str, float]
    retrieval: Dict[str, float]
    sum: float

    def to_dict(self) -> dict:
        return {"annotation": self.annotation, "retrieval": self.retrieval, "Sum": self.sum}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def metrics_report(scores, truth: GroundTruth) -> MetricsReport:
    """R@1/5/10 and Med r in both directions plus Sum.

    When a direction has fewer than K candidates, R@K is taken at the full
    candidate count (every query then scores 100).
    """
    scores = np.asarray(scores, dtype=np.float64)
    out = {}
    for direction in DIRECTIONS:
        count = scores.shape[1] if direction == "annotation" else scores.shape[0]
        ranks = first_hit_ranks(scores, truth, direction)
        block = {f"R@{k}": _percent(ranks <= min(k, count)) for k in KS}
        block["Med r"] = float(np.median(ranks))
        out[direction] = block
    total = sum(out[d][f"R@{k}"] for d in DIRECTIONS for k in KS)
    return MetricsReport(out["annotation"], out["retrieval"], total)


def ensemble(matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum of score matrices of identical shape."""
    if not matrices:
        raise ContractError("ensemble: no matrices")
    first = np.asarray(matrices[0], dtype=np.float64)
    out = first.copy()
    for m in matrices[1:]:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != first.shape:
            raise DimensionError(f"ensemble: shape {m.shape} differs from {first.shape}")
        out += m
    return out


def score_all(model, img_candidates, img_context, ids, mask, timesteps: Optional[int] = None) -> np.ndarray:
    """Scores of every image against every sentence."""
    return model.score_matrix(img_candidates, img_context, ids, mask, timesteps)


def evaluate(model, dataset, timesteps: Optional[int] = None):
    """Score a dataset split; returns ``(scores, truth, report)``."""
    cand, ctx = dataset.all_images()
    ids, mask, owner = dataset.all_sentences()
    scores = score_all(model, cand, ctx, ids, mask, timesteps)
    truth = GroundTruth.from_owners(owner, len(dataset))
    return scores, truth, metrics_report(scores, truth)


# ---------------------------------------------------------------- saliency export


def saliency_grid(image_saliency: np.ndarray, rows: int, cols: int) -> np.ndarray:
    image_saliency = np.asarray(image_saliency, dtype=np.float64)
    if image_saliency.size != rows * cols:
        raise DimensionError(f"{image_saliency.size} saliency values for a {rows}x{cols} grid")
    return image_saliency.reshape(rows, cols)


def to_pgm(grid: np.ndarray, size: Optional[tuple] = None) -> bytes:
    """Binary P5 graymap, scaled so the grid maximum is white.

    ``size=(height, width)`` upsamples by nearest neighbour.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if size is not None:
        h, w = size
        r = (np.arange(h) * grid.shape[0]) // h
        c = (np.arange(w) * grid.shape[1]) // w
        grid = grid[r][:, c]
    peak = grid.max()
    gray = np.zeros(grid.shape) if peak <= 0 else grid / peak
    pixels = np.rint(gray * 255.0).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def top_words(sentence_saliency: np.ndarray, words: Sequence[str], k: int = 2) -> List[str]:
    """The ``k`` highest-saliency words (ties by position)."""
    q = np.asarray(sentence_saliency)[: len(words)]
    order = np.argsort(-q, kind="stable")[:k]
    return [words[j] for j in order]


def export_saliency(image_trace: np.ndarray, sentence_trace: np.ndarray, rows: int, cols: int,
                    words: Sequence[str], out_dir, pair_id: str, size: Optional[tuple] = None) -> List[Path]:
    """Write ``<pair_id>_t<step>.pgm`` / ``.txt`` per timestep and ``<pair_id>_words.txt``.

    The ``.txt`` grids hold the raw saliency values, one grid row per line.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    image_trace = np.asarray(image_trace, dtype=np.float64)
    sentence_trace = np.asarray(sentence_trace, dtype=np.float64)
    written = []
    lines = []
    for t in range(image_trace.shape[0]):
        grid = saliency_grid(image_trace[t], rows, cols)
        stem = out_dir / f"{pair_id}_t{t + 1}"
        _write(stem.with_suffix(".pgm"), to_pgm(grid, size))
        _write(stem.with_suffix(".txt"), format_grid(grid).encode("ascii"))
        written += [stem.with_suffix(".pgm"), stem.with_suffix(".txt")]
        if len(words):
            lines.append(f"t{t + 1}\t" + " ".join(top_words(sentence_trace[t], words)))
    if len(words):
        path = out_dir / f"{pair_id}_words.txt"
        _write(path, ("\n".join(lines) + "\n").encode("utf-8"))
        written.append(path)
    return written


def format_grid(grid: np.ndarray) -> str:
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in grid) + "\n"


def parse_grid(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split()] for line in text.strip().splitlines()])


def _write(path: Path, payload: bytes) -> None:
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def average_traces(traces: Sequence[np.ndarray]) -> np.ndarray:
    """Per-timestep mean of saliency traces [T, K] over pairs."""
    return np.mean(np.stack([np.asarray(t, dtype=np.float64) for t in traces]), axis=0)
