"""Parameter container tying encoders, attention and aggregator together."""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import aggregator as agg
from . import attention as att
from . import autodiff as ad
from . import encoders as enc
from .autodiff import Tensor
from .config import TrainingConfig


class SmLSTM:
    """Image-sentence matching model: config plus an ordered dict of named parameters."""

    def __init__(self, config: TrainingConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: TrainingConfig, seed: Optional[int] = None) -> "SmLSTM":
        cfg = config.validate()
        if cfg.vocab_size < 3:
            raise ad.ContractError(f"vocab_size must be >= 3 (pad, unk, one token), got {cfg.vocab_size}")
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        params: Dict[str, Tensor] = {}
        params.update(enc.init_encoder_params(
            rng, cfg.vocab_size, cfg.embed_dim, cfg.blstm_hidden, cfg.sentence_context_dim, cfg.init_scale))
        if cfg.variant in att.ATTENTIVE_VARIANTS:
            params.update(att.init_attention_params(rng, cfg))
        params.update(agg.init_aggregator_params(rng, cfg))
        return cls(cfg, params)

    def parameter_list(self):
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> enc.EncodedSentence:
        return enc.encode_sentences(ids, mask, self.params)

    def forward(self, img_candidates, img_context, ids, mask, timesteps: Optional[int] = None):
        """All-pairs forward for a batch of images and tokenized sentences."""
        cfg = self.config
        sentences = self.encode(ids, mask)
        return agg.forward_pairs(img_candidates, img_context, sentences, self.params,
                                 cfg.timesteps if timesteps is None else timesteps,
                                 cfg.variant, cfg.attention_fusion)

    def score_matrix(self, img_candidates, img_context, ids, mask, timesteps: Optional[int] = None,
                     chunk: int = 64) -> np.ndarray:
        """Plain-array scores [Ni, Ns], evaluated in blocks to bound memory."""
        ni, ns = len(img_candidates), len(ids)
        out = np.empty((ni, ns))
        for r in range(0, ni, chunk):
            for c in range(0, ns, chunk):
                res = self.forward(img_candidates[r:r + chunk], img_context[r:r + chunk],
                                   ids[c:c + chunk], mask[c:c + chunk], timesteps)
                out[r:r + chunk, c:c + chunk] = res.score.data
        return out

    def check_compatible(self, grid: enc.FeatureGrid) -> None:
        cfg = self.config
        got = (grid.num_regions, grid.region_dim, grid.context_dim)
        want = (cfg.num_regions, cfg.region_dim, cfg.image_context_dim)
        if got != want:
            raise ad.DimensionError(f"feature grid (I, F, D) = {got} but the model expects {want}")
