"""End-to-end question answering network.

image -> CNN -> per-cell embedding ─┐
                                    ├─ add -> alignment layers -> attention -> aggregation -> classifier
question -> LSTM -> embedding ──────┘
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggregation import NonLocalPairwise, RelationNetwork, sum_pool
from .attention import (
    Alignment,
    ImageEmbedding,
    MultimodalMap,
    QuestionEmbedding,
    Selection,
    SoftAttention,
    StraightThrough,
    fraction_to_k,
    fuse,
    select_adahan,
    select_han,
)
from .config import ENCODER_LAYERS, RunConfig
from .data import normalize_images
from .errors import ShapeError
from .layers import MLP, ConvStack, Module, QuestionEncoder
from .tensor import Tensor


@dataclass
class ForwardResult:
    logits: Tensor
    fused: MultimodalMap
    selection: Selection | None = None
    st_mask: np.ndarray | None = None
    soft_weights: list | None = None

    def selected_fraction(self) -> np.ndarray:
        """Fraction of cells attended, per sample."""
        B = self.logits.shape[0]
        if self.selection is not None:
            return self.selection.fraction.astype(np.float64)
        if self.st_mask is not None:
            return self.st_mask.reshape(B, -1).mean(axis=1).astype(np.float64)
        return np.ones(B)


def coordinate_channels(w: int, h: int, dtype) -> np.ndarray:
    """``[w, h, 2]`` cell coordinates in [-1, 1]."""
    rows = np.linspace(-1, 1, w) if w > 1 else np.zeros(1)
    cols = np.linspace(-1, 1, h) if h > 1 else np.zeros(1)
    r, c = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([r, c], axis=-1).astype(dtype)


class VQAModel(Module):
    def __init__(self, config: RunConfig, question_vocab: int, n_answers: int, dtype=np.float32):
        super().__init__()
        config.validate()
        object.__setattr__(self, "config", config)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([config.train.seed, 1])
        mc, ac, gc = config.model, config.attention, config.aggregation
        if mc.encoder == "features":
            channels = mc.feature_channels
        else:
            self.cnn = ConvStack(3, ENCODER_LAYERS[mc.encoder], rng, dtype, mc.batch_norm)
            channels = self.cnn.out_channels
        d = mc.d
        self.image_embed = ImageEmbedding(channels + (2 if mc.coords else 0), d, rng, dtype)
        self.question = QuestionEncoder(question_vocab, mc.embed_dim, mc.lstm_hidden, rng, dtype)
        self.question_embed = QuestionEmbedding(mc.lstm_hidden, d, rng, dtype)
        self.alignment = Alignment(d, mc.alignment_depth, rng, dtype)
        if ac.mode == "soft":
            self.soft = SoftAttention(d, ac.hops, rng, dtype)
        elif ac.mode == "straight_through":
            self.st = StraightThrough(d, rng, dtype, ac.st_normalizer)
        if gc.kind == "pairwise":
            self.pairwise = NonLocalPairwise(d, gc.heads, gc.head_dim, rng, dtype, gc.scaled)
        elif gc.kind == "rn":
            self.rn = RelationNetwork(d, mc.lstm_hidden, gc.rn_hidden, gc.rn_layers, d, rng, dtype)
        self.classifier = MLP([d, mc.classifier_hidden, n_answers], rng, dtype, dropout=mc.dropout)
        self.n_answers = n_answers

    def k_for(self, n_cells: int) -> int:
        ac = self.config.attention
        if ac.k:
            if ac.k > n_cells:
                raise ValueError(f"attention.k={ac.k} exceeds the {n_cells} available cells")
            return ac.k
        return fraction_to_k(ac.fraction, n_cells)

    def encode_image(self, images) -> Tensor:
        x = np.asarray(images.data if isinstance(images, Tensor) else images)
        if x.ndim != 4:
            raise ShapeError(f"expected a [B, H, W, C] batch, got {x.shape}")
        if self.config.model.encoder == "features":
            feats = Tensor(x.astype(self.dtype))
        else:
            # unit-norm images have tiny pixels; rescale to unit RMS so the
            # first batch norm's epsilon does not swamp the batch variance
            scale = np.sqrt(np.prod(x.shape[1:])).astype(self.dtype)
            feats = self.cnn(Tensor(normalize_images(x.astype(self.dtype)) * scale))
        if self.config.model.coords:
            B, w, h, _ = feats.shape
            coords = np.broadcast_to(coordinate_channels(w, h, self.dtype), (B, w, h, 2))
            feats = T.concat([feats, Tensor(np.ascontiguousarray(coords))], axis=-1)
        return feats

    def __call__(self, images, tokens, lengths=None) -> ForwardResult:
        feats = self.encode_image(images)
        q = self.question(tokens, lengths)
        q_hat = self.question_embed(q)
        fused = fuse(self.image_embed(feats), q_hat, self.alignment)
        m = fused.m
        B, w, h, d = m.shape
        mode = self.config.attention.mode
        valid = None
        selection = st_mask = weights = None
        if mode == "han":
            selection, kept = select_han(m, self.k_for(w * h))
        elif mode == "adahan":
            selection, kept, valid = select_adahan(m, tau=self.config.attention.tau or None)
        elif mode == "straight_through":
            kept, st_mask = self.st(m.reshape(B, w * h, d), self.k_for(w * h))
        else:
            pooled = self.soft(m, q_hat)
            weights = self.soft.last_weights
        if mode != "soft":
            pooled = self.aggregate(kept, q, valid)
        logits = self.classifier(pooled)
        return ForwardResult(logits, fused, selection, st_mask, weights)

    def aggregate(self, kept: Tensor, q: Tensor, valid=None) -> Tensor:
        kind = self.config.aggregation.kind
        if kind == "sum":
            return sum_pool(kept, valid)
        if kind == "pairwise":
            return self.pairwise(kept, valid)
        return self.rn(kept, q, valid)
