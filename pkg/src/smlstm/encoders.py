"""Instance candidates and global contexts for both modalities.

Sentences become BLSTM word candidates plus a sentence-context vector;
images arrive as precomputed feature grids stored in SMFG files.
"""
from __future__ import annotations

import string
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_ID = 0
UNK_ID = 1
_PUNCT = str.maketrans("", "", string.punctuation)


class EmptySentenceError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------- vocabulary


class Vocabulary:
    """token -> id with 0 reserved for padding and 1 for unknown tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: List[str] = []
        self._ids: Dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid vocabulary token {token!r}")
        idx = len(self.tokens) + 2
        self.tokens.append(token)
        self._ids[token] = idx
        return idx

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if idx == PAD_ID:
            return "<pad>"
        if idx == UNK_ID:
            return "<unk>"
        return self.tokens[idx - 2]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines)

    @classmethod
    def build(cls, sentences: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for s in sentences:
            for tok in split_words(s):
                vocab.add(tok)
        return vocab


def split_words(raw: str) -> List[str]:
    """Lowercase, split on whitespace, strip ASCII punctuation, drop empties."""
    words = (w.translate(_PUNCT) for w in raw.lower().split())
    return [w for w in words if w]


@dataclass
class TokenizedSentence:
    ids: np.ndarray   # int64 [J]
    mask: np.ndarray  # bool [J], a true-prefix

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def tokenize(raw: str, vocab: Vocabulary, max_words: int = 50) -> TokenizedSentence:
    words = split_words(raw)
    if not words:
        raise EmptySentenceError(f"sentence has no tokens after cleaning: {raw!r}")
    words = words[:max_words]
    ids = np.zeros(max_words, dtype=np.int64)
    ids[: len(words)] = [vocab.id(w) for w in words]
    mask = np.zeros(max_words, dtype=bool)
    mask[: len(words)] = True
    return TokenizedSentence(ids, mask)


def stack_tokens(sentences: Sequence[TokenizedSentence]):
    ids = np.stack([s.ids for s in sentences])
    mask = np.stack([s.mask for s in sentences])
    return ids, mask


# ---------------------------------------------------------------- recurrent encoders


@dataclass
class EncodedSentence:
    """Word candidates [..., J, G], sentence context [..., E] and mask [..., J].

    Used both for one sentence and for a batch (leading axis N).
    """

    candidates: Tensor
    context: Tensor
    mask: np.ndarray


def lstm_gates(z: Tensor, c_prev: Tensor, size: int):
    """Standard LSTM update from pre-activations z = [i | f | g | o]."""
    i = ad.sigmoid(z[..., 0:size])
    f = ad.sigmoid(z[..., size:2 * size])
    g = ad.tanh(z[..., 2 * size:3 * size])
    o = ad.sigmoid(z[..., 3 * size:4 * size])
    c = f * c_prev + i * g
    h = o * ad.tanh(c)
    return h, c


def run_lstm(x: Tensor, W_x: Tensor, W_h: Tensor, b: Tensor, steps: int) -> List[Tensor]:
    """Unroll a zero-initialised LSTM over x[:, t] for t < steps; returns h_t."""
    n = x.shape[0]
    size = W_h.shape[0]
    xw = ad.affine(x, W_x, b)
    h = Tensor(np.zeros((n, size)))
    c = Tensor(np.zeros((n, size)))
    outputs = []
    for t in range(steps):
        z = xw[:, t, :] + ad.linear(h, W_h)
        h, c = lstm_gates(z, c, size)
        outputs.append(h)
    return outputs


def reversal_index(mask: np.ndarray) -> np.ndarray:
    """Per-row permutation that reverses the true-prefix and fixes padding."""
    n, J = mask.shape
    lengths = mask.sum(axis=1)
    pos = np.arange(J)[None, :].repeat(n, axis=0)
    return np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)


def encode_sentences(ids: np.ndarray, mask: np.ndarray, params: Dict[str, Tensor]) -> EncodedSentence:
    """Encode a batch of tokenized sentences.

    Args:
        ids: int array [N, J].
        mask: bool array [N, J]; each row a non-empty true-prefix.
        params: must hold ``enc.embed`` and the ``enc.fwd.*``, ``enc.bwd.*``,
            ``enc.ctx.*`` LSTM blocks.

    The backward direction reads only the real tokens of each row, and padded
    rows of the output are exactly zero.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise ad.DimensionError(f"encode_sentences: ids{ids.shape} / mask{mask.shape} must be equal 2-D")
    if not mask[:, 0].all():
        raise ad.ContractError("encode_sentences: every sentence needs at least one token")
    n, J = ids.shape
    lengths = mask.sum(axis=1)
    steps = int(lengths.max())
    embed = params["enc.embed"]
    # padding ids are never read by anything that reaches the output
    clean = np.where(mask, ids, PAD_ID)

    fwd_x = ad.take_rows(embed, clean[:, :steps])
    fwd = run_lstm(fwd_x, params["enc.fwd.W_x"], params["enc.fwd.W_h"], params["enc.fwd.b"], steps)

    rev = reversal_index(mask)[:, :steps]
    bwd_x = ad.take_rows(embed, np.take_along_axis(clean[:, :steps], rev, axis=1))
    bwd = run_lstm(bwd_x, params["enc.bwd.W_x"], params["enc.bwd.W_h"], params["enc.bwd.b"], steps)
    bwd_seq = ad.take_along(ad.stack(bwd, axis=1), rev[:, :, None], axis=1)

    both = ad.concat([ad.stack(fwd, axis=1), bwd_seq], axis=-1)
    step_mask = mask[:, :steps, None].astype(np.float64)
    both = both * step_mask
    if steps < J:
        both = ad.concat([both, Tensor(np.zeros((n, J - steps, both.shape[-1])))], axis=1)

    ctx = run_lstm(fwd_x, params["enc.ctx.W_x"], params["enc.ctx.W_h"], params["enc.ctx.b"], steps)
    last = (lengths - 1)[:, None, None]
    context = ad.reshape(ad.take_along(ad.stack(ctx, axis=1), last, axis=1), (n, -1))
    return EncodedSentence(both, context, mask)


def encode_sentence(tokens: TokenizedSentence, params: Dict[str, Tensor]) -> EncodedSentence:
    """Single-sentence convenience wrapper around :func:`encode_sentences`."""
    enc = encode_sentences(tokens.ids[None, :], tokens.mask[None, :], params)
    return EncodedSentence(enc.candidates[0], enc.context[0], tokens.mask)


# ---------------------------------------------------------------- feature grids

MAGIC = b"SMFG"
VERSION = 1
_HEADER_FULL = struct.Struct("<4s6I")


@dataclass
class FeatureGrid:
    candidates: np.ndarray  # float64 [I, F]
    context: np.ndarray     # float64 [D]
    grid_rows: int
    grid_cols: int

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates, dtype=np.float64)
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.candidates.ndim != 2 or self.context.ndim != 1:
            raise ad.DimensionError(
                f"FeatureGrid: candidates{self.candidates.shape} must be 2-D and context{self.context.shape} 1-D"
            )
        if self.grid_rows * self.grid_cols != self.candidates.shape[0]:
            raise ad.DimensionError(
                f"FeatureGrid: {self.grid_rows}x{self.grid_cols} grid does not hold {self.candidates.shape[0]} regions"
            )

    @property
    def num_regions(self) -> int:
        return self.candidates.shape[0]

    @property
    def region_dim(self) -> int:
        return self.candidates.shape[1]

    @property
    def context_dim(self) -> int:
        return self.context.shape[0]


def grid_to_bytes(grid: FeatureGrid) -> bytes:
    I, F = grid.candidates.shape
    header = _HEADER_FULL.pack(MAGIC, VERSION, I, F, grid.context.shape[0], grid.grid_rows, grid.grid_cols)
    return (
        header
        + grid.candidates.astype("<f4").tobytes(order="C")
        + grid.context.astype("<f4").tobytes(order="C")
    )


def grid_from_bytes(buf: bytes) -> FeatureGrid:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'SMFG'", 0)
    if len(buf) < _HEADER_FULL.size:
        raise FormatError(f"truncated header ({len(buf)} of {_HEADER_FULL.size} bytes)", len(buf))
    _, version, I, F, D, rows, cols = _HEADER_FULL.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if I == 0 or F == 0 or D == 0:
        raise FormatError(f"zero dimension in header I={I} F={F} D={D}", 8)
    if rows * cols != I:
        raise FormatError(f"grid {rows}x{cols} does not match I={I}", 20)
    offset = _HEADER_FULL.size
    need = offset + 4 * (I * F + D)
    if len(buf) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    cand = np.frombuffer(buf, dtype="<f4", count=I * F, offset=offset).reshape(I, F)
    ctx = np.frombuffer(buf, dtype="<f4", count=D, offset=offset + 4 * I * F)
    return FeatureGrid(cand.astype(np.float64), ctx.astype(np.float64), rows, cols)


def write_feature_grid(path, grid: FeatureGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_feature_grid(path, expect: Optional[Dict[str, int]] = None) -> FeatureGrid:
    """Read an SMFG file, optionally checking I/F/D against ``expect``."""
    grid = grid_from_bytes(Path(path).read_bytes())
    if expect:
        got = {"num_regions": grid.num_regions, "region_dim": grid.region_dim, "image_context_dim": grid.context_dim}
        for key, want in expect.items():
            if key in got and got[key] != want:
                raise FormatError(f"{path}: {key}={got[key]} but configuration expects {want}", 8)
    return grid


# ---------------------------------------------------------------- parameter init


def init_encoder_params(rng: np.random.Generator, vocab_size: int, embed_dim: int, blstm_hidden: int,
                        context_dim: int, scale: float) -> Dict[str, Tensor]:
    def u(*shape):
        return rng.uniform(-scale, scale, size=shape)

    out = {"enc.embed": u(vocab_size, embed_dim)}
    for side, size in (("fwd", blstm_hidden), ("bwd", blstm_hidden), ("ctx", context_dim)):
        out[f"enc.{side}.W_x"] = u(embed_dim, 4 * size)
        out[f"enc.{side}.W_h"] = u(size, 4 * size)
        out[f"enc.{side}.b"] = np.zeros(4 * size)
    return {k: ad.parameter(v, k) for k, v in out.items()}
