"""Multimodal fusion and spatial attention.

Hard attention keeps the cells of the fused map whose embeddings have the
largest L2 norms; the adaptive variant keeps every cell whose softmax-
normalized norm beats the uniform level ``1 / (w * h)``. Soft attention and
a straight-through top-k mask are provided as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import MLP, Dense, Module
from .tensor import Tensor, no_grad

MODES = ("han", "adahan", "soft", "straight_through")


@dataclass
class MultimodalMap:
    """Fused image/question embedding over the spatial grid."""

    m: Tensor
    alignment_depth: int = 0
    provenance: str = ""

    @property
    def grid(self) -> tuple[int, int]:
        return self.m.shape[-3], self.m.shape[-2]

    @property
    def dim(self) -> int:
        return self.m.shape[-1]


@dataclass
class Selection:
    """Cells kept by an attention step.

    ``indices`` lists the kept flat cell indices in the order they were
    ranked (descending presence). Batched selections are ``[B, k_max]``,
    padded with -1 where a sample kept fewer cells; ``counts`` holds the
    real k of every sample.
    """

    indices: np.ndarray
    presence: np.ndarray
    mode: str
    threshold: float | None = None
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.presence.shape[-2:]))

    @property
    def fraction(self) -> np.ndarray:
        return self.counts / self.n_cells

    def cell_mask(self) -> np.ndarray:
        """Boolean ``[..., w*h]`` map of kept cells."""
        idx = np.atleast_2d(self.indices)
        mask = np.zeros((idx.shape[0], self.n_cells), dtype=bool)
        for b, row in enumerate(idx):
            mask[b, row[row >= 0]] = True
        return mask if self.indices.ndim == 2 else mask[0]


def fraction_to_k(fraction: float, n: int) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    return int(min(max(round(fraction * n), 1), n))


def adahan_threshold(w: int, h: int) -> float:
    """Softmax mass of one cell under a uniform presence map."""
    return 1.0 / (w * h)


# --------------------------------------------------------------------------
# Embedding and fusion
# --------------------------------------------------------------------------


class ImageEmbedding(Module):
    """Per-cell (1x1) ReLU layers mapping CNN features to ``d`` dimensions."""

    def __init__(self, c_in: int, d: int, rng, dtype=np.float32, layers: int = 2):
        super().__init__()
        self.net = MLP([c_in] + [d] * layers, rng, dtype, final_activation=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)


class QuestionEmbedding(Module):
    def __init__(self, q_dim: int, d: int, rng, dtype=np.float32, layers: int = 2):
        super().__init__()
        self.net = MLP([q_dim] + [d] * layers, rng, dtype, final_activation=True)

    def __call__(self, q: Tensor) -> Tensor:
        return self.net(q)


def embed_image(x: Tensor, params: ImageEmbedding) -> Tensor:
    return params(x)


def embed_question(q: Tensor, params: QuestionEmbedding) -> Tensor:
    return params(q)


class Alignment(Module):
    """Extra per-cell ReLU layers applied to the fused map."""

    def __init__(self, d: int, depth: int, rng, dtype=np.float32):
        super().__init__()
        self.depth = depth
        if depth:
            self.net = MLP([d] * (depth + 1), rng, dtype, final_activation=True)

    def __call__(self, m: Tensor) -> Tensor:
        return self.net(m) if self.depth else m


def fuse(x_hat: Tensor, q_hat: Tensor, alignment: Alignment | None = None) -> MultimodalMap:
    """Add the question embedding to every cell of the image embedding.

    ``x_hat`` is ``[w, h, d]`` with ``q_hat`` ``[d]``, or batched
    ``[B, w, h, d]`` with ``[B, d]``.
    """
    if x_hat.shape[-1] != q_hat.shape[-1]:
        raise ShapeError(f"embedding sizes differ: {x_hat.shape[-1]} vs {q_hat.shape[-1]}")
    if x_hat.ndim == 4:
        if q_hat.ndim != 2 or q_hat.shape[0] != x_hat.shape[0]:
            raise ShapeError(f"batched fusion needs q_hat [B, d], got {q_hat.shape}")
        q = q_hat.reshape(q_hat.shape[0], 1, 1, q_hat.shape[1])
    else:
        q = q_hat
    m = x_hat + q
    depth = 0
    if alignment is not None:
        m = alignment(m)
        depth = alignment.depth
    return MultimodalMap(m, depth, "fuse")


def _map_tensor(m) -> Tensor:
    if isinstance(m, MultimodalMap):
        return m.m
    return m if isinstance(m, Tensor) else Tensor(np.asarray(m))


def presence(m) -> Tensor:
    """Per-cell L2 norm of the fused map."""
    return T.l2_norm_map(_map_tensor(m))


# --------------------------------------------------------------------------
# Hard selection
# --------------------------------------------------------------------------


def _presence_array(m: Tensor, p) -> np.ndarray:
    if p is None:
        with no_grad():
            p = presence(m)
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def _check_map(m: Tensor):
    if m.ndim not in (3, 4):
        raise ShapeError(f"expected a [w,h,d] or [B,w,h,d] map, got {m.shape}")


def select_han(m, k: int, p=None) -> tuple[Selection, Tensor]:
    """Keep the ``k`` cells with the largest presence.

    Returns the selection and the kept embeddings, ``[k, d]`` (or
    ``[B, k, d]``). Rows are gathered in ascending cell order so a full
    selection sums in the same order as the map itself. The embeddings are
    passed on unscaled; only they receive gradient.
    """
    m = _map_tensor(m)
    _check_map(m)
    pa = _presence_array(m, p)
    n = m.shape[-3] * m.shape[-2]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if m.ndim == 3:
        idx = T.top_k_indices(pa, k)
        sel = Selection(idx, pa, "han", None, np.zeros(1, bool), np.array([k]))
        return sel, T.gather_cells(m, np.sort(idx))
    B = m.shape[0]
    idx = T.top_k_batched(pa.reshape(B, n), k)
    sel = Selection(idx, pa, "han", None, np.zeros(B, bool), np.full(B, k))
    return sel, T.gather_cells(m, np.sort(idx, axis=1))


def adaptive_indices(p: np.ndarray, tau: float | None = None) -> tuple[np.ndarray, bool]:
    """Cells whose softmax-normalized presence strictly exceeds ``tau``.

    ``p`` is one sample's presence map. Returned in descending presence
    order (ties by ascending index). When nothing clears the threshold,
    the argmax cell is returned and the flag is set.
    """
    flat = np.asarray(p, dtype=np.float64).reshape(-1)
    if tau is None:
        tau = 1.0 / flat.size
    z = np.exp(flat - flat.max())
    probs = z / z.sum()
    order = np.argsort(-flat, kind="stable")
    keep = order[probs[order] > tau]
    if keep.size == 0:
        return order[:1], True
    return keep, False


def select_adahan(m, p=None, tau: float | None = None) -> tuple[Selection, Tensor, np.ndarray | None]:
    """Keep every cell whose softmax presence beats ``tau`` (default ``1/(w*h)``).

    Returns ``(selection, kept, valid)``. Unbatched, ``kept`` is ``[k, d]``
    and ``valid`` is None. Batched, ``kept`` is ``[B, k_max, d]`` and
    ``valid`` is a ``[B, k_max]`` 0/1 array marking real rows; padded rows
    repeat a kept cell and must be masked out by the aggregator.
    """
    m = _map_tensor(m)
    _check_map(m)
    pa = _presence_array(m, p)
    w, h = m.shape[-3], m.shape[-2]
    if tau is None:
        tau = adahan_threshold(w, h)
    if m.ndim == 3:
        idx, fb = adaptive_indices(pa, tau)
        sel = Selection(idx, pa, "adahan", tau, np.array([fb]), np.array([idx.size]))
        return sel, T.gather_cells(m, np.sort(idx)), None
    B = m.shape[0]
    picks, flags = zip(*(adaptive_indices(pa[b], tau) for b in range(B)))
    counts = np.array([len(r) for r in picks])
    kmax = int(counts.max())
    ranked = np.full((B, kmax), -1, dtype=np.int64)
    gather = np.empty((B, kmax), dtype=np.int64)
    valid = np.zeros((B, kmax), dtype=m.dtype)
    for b, r in enumerate(picks):
        ranked[b, : len(r)] = r
        s = np.sort(r)
        gather[b, : len(r)] = s
        gather[b, len(r):] = s[0]
        valid[b, : len(r)] = 1
    sel = Selection(ranked, pa, "adahan", tau, np.array(flags), counts)
    return sel, T.gather_cells(m, gather), valid


# --------------------------------------------------------------------------
# Soft attention baseline
# --------------------------------------------------------------------------


class SoftAttention(Module):
    """Multi-hop softmax attention with weighted-average pooling.

    Each hop scores every cell with a one-hidden-layer network over the cell
    embedding and the current query, normalizes the scores with a softmax
    over the grid and pools ``sum_ij w_ij m_ij``. The pooled vector is added
    to the query before the next hop. Returns the last hop's pooled vector.
    """

    def __init__(self, d: int, hops: int, rng, dtype=np.float32):
        super().__init__()
        if hops < 1:
            raise ValueError("soft attention needs at least one hop")
        self.hops = hops
        hidden = max(d // 2, 1)
        for i in range(hops):
            # one hidden layer over [m_ij; u], split into a cell part and a query part
            setattr(self, f"cell{i}", Dense(d, hidden, rng, dtype, bias=False))
            setattr(self, f"query{i}", Dense(d, hidden, rng, dtype))
            setattr(self, f"score{i}", Dense(hidden, 1, rng, dtype))
        self.last_weights: list[np.ndarray] = []

    def __call__(self, m, q_hat: Tensor) -> Tensor:
        m = _map_tensor(m)
        single = m.ndim == 3
        if single:
            m = m.reshape(1, *m.shape)
            q_hat = q_hat.reshape(1, -1)
        B, w, h, d = m.shape
        cells = m.reshape(B, w * h, d)
        u = q_hat
        self.last_weights = []
        pooled = None
        for i in range(self.hops):
            hid = getattr(self, f"cell{i}")(cells) + getattr(self, f"query{i}")(u).reshape(B, 1, -1)
            scores = getattr(self, f"score{i}")(hid.relu()).reshape(B, w * h)
            weights = T.softmax(scores, axis=-1)
            self.last_weights.append(weights.data)
            pooled = T.matmul(weights.reshape(B, 1, w * h), cells).reshape(B, d)
            u = u + pooled
        return pooled[0] if single else pooled


def soft_attention(m, q_hat: Tensor, params: SoftAttention) -> Tensor:
    return params(m, q_hat)


# --------------------------------------------------------------------------
# Straight-through baseline
# --------------------------------------------------------------------------


class StraightThrough(Module):
    """Top-k mask with a straight-through gradient.

    Computes ``x * (g + stop(1{top-k of g} - g))`` where ``g = mu(f(x))``
    and ``f`` has one hidden layer of width ``d/2``. The forward value is
    the hard mask; the backward pass flows through ``g`` for every cell.
    Exactly ``k`` cells are kept, ties resolved by ascending index.
    """

    def __init__(self, d: int, rng, dtype=np.float32, normalizer: str = "sigmoid"):
        super().__init__()
        if normalizer not in ("sigmoid", "softmax"):
            raise ValueError(f"normalizer must be sigmoid or softmax, got {normalizer!r}")
        self.normalizer = normalizer
        self.f = MLP([d, max(d // 2, 1), 1], rng, dtype)
        self.last_gate: np.ndarray | None = None
        # gradient checking: when set, ``mask - g`` is replaced by this fixed
        # array, making the output a smooth function with the same gradient
        self.frozen_offset: np.ndarray | None = None

    def gate(self, x: Tensor) -> Tensor:
        s = self.f(x).reshape(*x.shape[:-1])
        return s.sigmoid() if self.normalizer == "sigmoid" else T.softmax(s, axis=-1)

    def __call__(self, x: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
        """``x`` is ``[n, d]`` or ``[B, n, d]``; returns the masked input and the 0/1 mask."""
        n = x.shape[-2]
        if not 1 <= k <= n:
            raise ValueError(f"k must lie in [1, {n}], got {k}")
        g = self.gate(x)
        self.last_gate = g.data
        idx = T.top_k_batched(np.atleast_2d(g.data), k)
        mask = np.zeros(np.atleast_2d(g.data).shape, dtype=x.dtype)
        np.put_along_axis(mask, idx, 1, axis=-1)
        mask = mask.reshape(g.shape)
        if self.frozen_offset is not None:
            st = g + Tensor(self.frozen_offset)
        else:
            st = T.straight_through(mask, g)
        return x * st.reshape(*st.shape, 1), mask


def straight_through_select(x: Tensor, k: int, params: StraightThrough) -> Tensor:
    return params(x, k)[0]
