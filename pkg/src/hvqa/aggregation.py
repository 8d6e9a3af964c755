"""Reductions from a set of selected cells to one vector.

All aggregators take ``[k, d]`` or batched ``[B, k, d]`` rows plus an
optional ``[B, k]`` 0/1 ``valid`` mask (for adaptive selections whose
samples keep different numbers of cells).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import MLP, Dense, Module, glorot
from .tensor import Tensor

_MASKED = -1e9


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [k, d] or [B, k, d] rows, got {x.shape}")
    return x, False


def sum_pool(selected: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Column sum of the selected rows, in the order given."""
    if selected.shape[-2] == 0:
        raise ValueError("cannot pool an empty selection")
    if valid is not None:
        selected = selected * valid[..., None]
    return selected.sum(axis=-2)


class NonLocalPairwise(Module):
    """Multi-head query/key/value pairwise operator followed by sum pooling.

    Per head, every row attends to all rows (softmax over keys); head
    outputs are concatenated, linearly mapped back to ``d`` and summed over
    rows. Scores are raw dot products unless ``scaled`` is set.
    """

    def __init__(self, d: int, heads: int, head_dim: int, rng, dtype=np.float32, scaled: bool = False):
        super().__init__()
        if heads < 1:
            raise ValueError("need at least one head")
        self.d, self.heads, self.head_dim, self.scaled = d, heads, head_dim, scaled
        width = heads * head_dim
        self.w_q = glorot(rng, (d, width), d, head_dim, dtype)
        self.w_k = glorot(rng, (d, width), d, head_dim, dtype)
        self.w_v = glorot(rng, (d, width), d, head_dim, dtype)
        self.out = Dense(width, d, rng, dtype, bias=False)

    def _split(self, x: Tensor, B: int, k: int) -> Tensor:
        return x.reshape(B, k, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def rows(self, selected: Tensor, valid: np.ndarray | None = None) -> Tensor:
        """Per-row outputs ``[B, k, d]`` before pooling."""
        x, _ = _batched(selected)
        B, k, d = x.shape
        if d != self.d:
            raise ShapeError(f"pairwise operator expects d={self.d}, got {d}")
        q = self._split(T.matmul(x, self.w_q), B, k)
        key = self._split(T.matmul(x, self.w_k), B, k)
        v = self._split(T.matmul(x, self.w_v), B, k)
        scores = T.matmul(q, key.transpose(0, 1, 3, 2))
        if self.scaled:
            scores = scores * (1.0 / np.sqrt(self.head_dim))
        if valid is not None:
            bias = ((1 - valid) * _MASKED).astype(x.dtype)
            scores = scores + bias.reshape(B, 1, 1, k)
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, k, self.heads * self.head_dim)
        return self.out(mixed)

    def __call__(self, selected: Tensor, valid: np.ndarray | None = None) -> Tensor:
        single = selected.ndim == 2
        pooled = sum_pool(self.rows(selected, valid), valid)
        return pooled[0] if single else pooled


class RelationNetwork(Module):
    """``f_phi(sum_{a,b} g_theta([m_a; m_b; q]))`` over all ordered pairs, self-pairs included.

    The first layer of ``g_theta`` is applied to the concatenation by
    splitting its weight into the ``m_a``, ``m_b`` and ``q`` blocks, which
    costs O(k) instead of O(k^2) for that layer.
    """

    def __init__(self, d: int, q_dim: int, hidden: int, g_layers: int, out_dim: int, rng, dtype=np.float32):
        super().__init__()
        if g_layers < 1:
            raise ValueError("g_theta needs at least one layer")
        self.d, self.q_dim, self.hidden = d, q_dim, hidden
        fan_in = 2 * d + q_dim
        self.g_a = glorot(rng, (d, hidden), fan_in, hidden, dtype)
        self.g_b = glorot(rng, (d, hidden), fan_in, hidden, dtype)
        self.g_q = Dense(q_dim, hidden, rng, dtype)
        self.g_rest = MLP([hidden] * g_layers, rng, dtype, final_activation=True) if g_layers > 1 else None
        self.f = MLP([hidden, out_dim], rng, dtype, final_activation=True)

    def g_input_weight(self) -> np.ndarray:
        """First ``g_theta`` weight as a single ``[2d + q_dim, hidden]`` matrix."""
        return np.concatenate([self.g_a.data, self.g_b.data, self.g_q.weight.data])

    def __call__(self, selected: Tensor, q: Tensor, valid: np.ndarray | None = None) -> Tensor:
        x, single = _batched(selected)
        if single:
            q = q.reshape(1, -1)
        B, k, d = x.shape
        if d != self.d or q.shape[-1] != self.q_dim:
            raise ShapeError(f"relation network expects d={self.d}, q={self.q_dim}; got {d}, {q.shape[-1]}")
        h = self.hidden
        left = T.matmul(x, self.g_a).reshape(B, k, 1, h)
        right = T.matmul(x, self.g_b).reshape(B, 1, k, h)
        pairs = (left + right + self.g_q(q).reshape(B, 1, 1, h)).relu()
        if self.g_rest is not None:
            pairs = self.g_rest(pairs)
        if valid is not None:
            pairs = pairs * (valid[:, :, None] * valid[:, None, :])[..., None]
        total = pairs.reshape(B, k * k, h).sum(axis=1)
        out = self.f(total)
        return out[0] if single else out


def nonlocal_pairwise(selected: Tensor, params: NonLocalPairwise) -> Tensor:
    return params(selected)


def relation_aggregate(selected: Tensor, q: Tensor, params: RelationNetwork) -> Tensor:
    return params(selected, q)


def count_pair_flops(
    k: int,
    d: int,
    heads: int,
    head_dim: int | None = None,
    q_dim: int | None = None,
    rn_hidden: int = 256,
    rn_layers: int = 4,
    rn_out: int | None = None,
) -> dict:
    """Closed-form cost of the two pairwise aggregators for ``k`` rows.

    ``*_macs`` count the multiply-adds performed by matrix products only.
    ``*_flops`` add the elementwise work (softmax, additions, ReLUs,
    pooling), one multiply-add counting as two flops. ``*_term`` is the
    part of ``*_flops`` that grows as ``k**2``.
    """
    if min(k, d, heads) < 1:
        raise ValueError("k, d and heads must be positive")
    head_dim = head_dim or max(d // heads, 1)
    q_dim = q_dim if q_dim is not None else d
    rn_out = rn_out if rn_out is not None else d
    width = heads * head_dim
    h = rn_hidden

    nl_lin = 3 * k * d * width + k * width * d
    nl_pair = 2 * heads * k * k * head_dim
    nl_term = 2 * nl_pair + 3 * heads * k * k  # exp, sum, divide per score
    nl_flops = 2 * nl_lin + nl_term + k * d

    rn_lin = 2 * k * d * h + q_dim * h + h * rn_out
    rn_pair = (rn_layers - 1) * k * k * h * h
    # two broadcast adds and a ReLU on the first layer, bias + ReLU per later
    # layer, then the reduction over pairs
    rn_term = 2 * rn_pair + (3 + 2 * (rn_layers - 1) + 1) * k * k * h
    rn_flops = 2 * rn_lin + rn_term + 2 * h + 2 * rn_out
    return {
        "pairwise_macs": nl_lin + nl_pair,
        "pairwise_flops": nl_flops,
        "pairwise_term": nl_term,
        "relation_macs": rn_lin + rn_pair,
        "relation_flops": rn_flops,
        "relation_term": rn_term,
    }
