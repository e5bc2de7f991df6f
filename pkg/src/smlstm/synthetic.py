"""Synthetic paired data with planted cross-modal instances.

A bank of concepts, each with a latent region vector and a word. Every
pair draws ``instances`` distinct concepts; their latent vectors (plus
noise) are written into that many random cells of the image grid and their
words, mixed with filler words, form the sentence. All other cells hold
background clutter. The image context is a fixed random projection of the
planted latents (plus noise), standing in for a global scene descriptor.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .data import Record, write_manifest
from .encoders import FeatureGrid, Vocabulary, write_feature_grid

CONCEPT_WORDS = (
    "dog cat horse bird man woman child car bike boat tree grass "
    "beach ball hat kite bench train bus sign table cup giraffe cow"
).split()
FILLER_WORDS = "a the with on in near of and is at by".split()


@dataclass
class SyntheticSpec:
    n_pairs: int = 80
    n_val: int = 0
    n_test: int = 16
    grid_rows: int = 4
    grid_cols: int = 4
    region_dim: int = 64
    context_dim: int = 16
    instances: int = 3
    concepts: int = 12
    noise: float = 0.1
    clutter: float = 1.5
    backgrounds: int = 4
    context_noise: float = 0.1
    max_fillers: int = 2
    sentences_per_image: int = 5
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        if self.n_pairs < 2:
            raise ValueError(f"n_pairs must be >= 2, got {self.n_pairs}")
        if self.n_val + self.n_test >= self.n_pairs:
            raise ValueError("n_val + n_test must leave at least one training pair")
        if not 1 <= self.instances <= min(self.concepts, self.grid_rows * self.grid_cols):
            raise ValueError("instances must fit in the concept bank and the grid")
        if self.concepts > len(CONCEPT_WORDS):
            raise ValueError(f"at most {len(CONCEPT_WORDS)} concepts available")
        if self.sentences_per_image < 1:
            raise ValueError("sentences_per_image must be >= 1")
        if self.backgrounds < 1:
            raise ValueError("backgrounds must be >= 1")
        if self.noise < 0 or self.clutter < 0:
            raise ValueError("noise and clutter must be >= 0")
        return self


def _f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def generate(spec: SyntheticSpec, out_dir) -> dict:
    """Write features/, vocab.txt, manifest.jsonl and synthetic_meta.json.

    Returns the metadata dict (concept latents, planted cells and concepts
    per pair).
    """
    spec.validate()
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    I = spec.grid_rows * spec.grid_cols
    words = CONCEPT_WORDS[: spec.concepts]
    latents = _f32(rng.normal(size=(spec.concepts, spec.region_dim)))
    bank = rng.normal(size=(spec.backgrounds, spec.region_dim))
    projection = rng.normal(size=(spec.region_dim, spec.context_dim)) / np.sqrt(spec.region_dim)

    n_train = spec.n_pairs - spec.n_val - spec.n_test
    splits = ["train"] * n_train + ["val"] * spec.n_val + ["test"] * spec.n_test
    width = len(str(spec.n_pairs - 1))
    records: List[Record] = []
    planted = []
    used = set()
    n_sets = math.comb(spec.concepts, spec.instances)
    for idx, split in enumerate(splits):
        pair_id = f"pair{idx:0{width}d}"
        chosen = rng.choice(spec.concepts, size=spec.instances, replace=False)
        # distinct concept sets keep every pair identifiable, while combinations last
        while frozenset(chosen.tolist()) in used and len(used) < n_sets:
            chosen = rng.choice(spec.concepts, size=spec.instances, replace=False)
        used.add(frozenset(chosen.tolist()))
        cells = rng.choice(I, size=spec.instances, replace=False)
        grid = spec.clutter * bank[rng.integers(0, spec.backgrounds, size=I)]
        grid += spec.noise * rng.normal(size=grid.shape)
        grid[cells] = latents[chosen] + spec.noise * rng.normal(size=(spec.instances, spec.region_dim))
        context = latents[chosen].sum(axis=0) @ projection
        context = context + spec.context_noise * rng.normal(size=spec.context_dim)
        sentences = []
        for _ in range(spec.sentences_per_image):
            tokens = [words[c] for c in chosen]
            tokens += list(rng.choice(FILLER_WORDS, size=int(rng.integers(1, spec.max_fillers + 1))))
            sentences.append(" ".join(tokens[k] for k in rng.permutation(len(tokens))))
        path = feat_dir / f"{pair_id}.smfg"
        write_feature_grid(path, FeatureGrid(grid, context, spec.grid_rows, spec.grid_cols))
        records.append(Record(pair_id, str(path), sentences, split))
        planted.append({"id": pair_id, "cells": [int(c) for c in cells], "concepts": [int(c) for c in chosen]})

    vocab = Vocabulary(list(words) + FILLER_WORDS)
    vocab.save(out / "vocab.txt")
    write_manifest(out / "manifest.jsonl", records)
    meta = {
        "spec": spec.__dict__,
        "concept_words": list(words),
        "latents": latents.tolist(),
        "pairs": planted,
    }
    (out / "synthetic_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return meta
