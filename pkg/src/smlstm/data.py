"""Manifests, datasets and batch assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .encoders import FeatureGrid, FormatError, TokenizedSentence, Vocabulary, load_feature_grid, tokenize

MANIFEST_KEYS = {"id", "features", "sentences", "split"}
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """A dataset item is missing or unreadable."""


@dataclass
class Record:
    id: str
    features: str
    sentences: List[str]
    split: str


def read_manifest(path) -> List[Record]:
    """Parse a JSON-lines manifest; feature paths resolve against its directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records, seen = [], set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        if set(obj) != MANIFEST_KEYS:
            raise DataError(f"{path}:{lineno}: keys {sorted(obj)} must be exactly {sorted(MANIFEST_KEYS)}")
        if obj["split"] not in SPLITS:
            raise DataError(f"{path}:{lineno}: split {obj['split']!r} not in {SPLITS}")
        if not isinstance(obj["sentences"], list) or not obj["sentences"]:
            raise DataError(f"{path}:{lineno}: record {obj['id']!r} needs at least one sentence")
        if obj["id"] in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        features = obj["features"]
        if not Path(features).is_absolute():
            features = str(path.parent / features)
        records.append(Record(str(obj["id"]), features, list(obj["sentences"]), obj["split"]))
    return records


def write_manifest(path, records: Sequence[Record], relative_to: Optional[Path] = None) -> None:
    base = Path(relative_to) if relative_to else Path(path).parent
    lines = []
    for r in records:
        feat = Path(r.features)
        try:
            feat = feat.relative_to(base)
        except ValueError:
            pass
        lines.append(json.dumps({"id": r.id, "features": str(feat), "sentences": r.sentences, "split": r.split},
                                sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Batch:
    img_candidates: np.ndarray  # [n, I, F]
    img_context: np.ndarray     # [n, D]
    ids: np.ndarray             # [n, J]
    mask: np.ndarray            # [n, J]
    items: List[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Dataset:
    """Records of one split with tokenized sentences and lazily loaded grids."""

    records: List[Record]
    tokens: List[List[TokenizedSentence]]
    expect: Dict[str, int] = field(default_factory=dict)
    _grids: Dict[int, FeatureGrid] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def grid(self, i: int) -> FeatureGrid:
        if i not in self._grids:
            rec = self.records[i]
            try:
                self._grids[i] = load_feature_grid(rec.features, self.expect)
            except FileNotFoundError:
                raise DataError(f"item {rec.id!r}: feature file not found: {rec.features}") from None
            except FormatError as exc:
                raise DataError(f"item {rec.id!r}: {exc}") from None
        return self._grids[i]

    def all_images(self):
        grids = [self.grid(i) for i in range(len(self))]
        return np.stack([g.candidates for g in grids]), np.stack([g.context for g in grids])

    def all_sentences(self):
        """Flattened sentences: ids [M, J], mask [M, J], owner image index [M]."""
        ids, mask, owner = [], [], []
        for i, toks in enumerate(self.tokens):
            for t in toks:
                ids.append(t.ids)
                mask.append(t.mask)
                owner.append(i)
        return np.stack(ids), np.stack(mask), np.asarray(owner)


def load_dataset(records: Sequence[Record], vocab: Vocabulary, max_words: int,
                 expect: Optional[Dict[str, int]] = None, split: Optional[str] = None) -> Dataset:
    chosen = [r for r in records if split is None or r.split == split]
    tokens = [[tokenize(s, vocab, max_words) for s in r.sentences] for r in chosen]
    return Dataset(chosen, tokens, dict(expect or {}))


def assemble_batch(dataset: Dataset, indices: Sequence[int], sentence_choice: Optional[Sequence[int]] = None) -> Batch:
    """Aligned batch: image ``indices[r]`` is paired with one of its own sentences.

    ``sentence_choice[r]`` picks which sentence of that record (default 0).
    """
    indices = [int(i) for i in indices]
    if not indices:
        raise ad.ContractError("assemble_batch: empty batch")
    if len(set(indices)) != len(indices):
        raise ad.ContractError("assemble_batch: duplicate indices would create false negatives")
    for i in indices:
        if not 0 <= i < len(dataset):
            raise ad.ContractError(f"assemble_batch: index {i} out of range for {len(dataset)} items")
    grids = [dataset.grid(i) for i in indices]
    picks = [0] * len(indices) if sentence_choice is None else [int(c) for c in sentence_choice]
    toks = [dataset.tokens[i][c % len(dataset.tokens[i])] for i, c in zip(indices, picks)]
    return Batch(
        np.stack([g.candidates for g in grids]),
        np.stack([g.context for g in grids]),
        np.stack([t.ids for t in toks]),
        np.stack([t.mask for t in toks]),
        indices,
    )
