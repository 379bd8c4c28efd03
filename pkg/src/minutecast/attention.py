"""Scaled dot-product attention: the full quadratic form and the ProbSparse
variant that ranks queries by an LSE-minus-mean sparsity score and computes
full attention rows only for the top-ranked ("active") queries.

Two measurement modes are provided. ``exact`` evaluates every query-key score
(the score matrix is then reused for the selected rows, so its dot-product
cost stays at L_Q * L_K). ``sampled`` scores each query against a uniform
without-replacement key subset, which is what brings the measured cost down
to O(L log L); the subsequent attention for the u selected queries adds
u * L_K products. Every query-key dot product is tallied in an explicit
per-call counter so the scaling behaviour is assertable, not anecdotal.

Inputs are ``[..., length, width]``; leading dimensions (batch, heads) are
processed together. Causal masking is additive -1e9 before the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    log_sum_exp_lastdim,
    matmul,
    scatter_rows,
    softmax_lastdim,
    take_rows,
)
from .errors import ConfigError, ContractError, DimensionError
from .layers import Linear, Module

MASK_VALUE = -1e9


@dataclass
class DotProductCounter:
    """Tally of query-key dot products performed by attention calls."""

    count: int = 0

    def add(self, n: int):
        self.count += int(n)


@dataclass
class SparsityScores:
    """Per-query sparsity scores and the resulting top-u selection.

    ``values[i]`` is LSE(scores_i) - mean(scores_i) over the measured keys;
    in exact mode it is bounded below by ln(L_K), with equality exactly when
    query i scores every key identically. ``top_indices`` holds the selected
    query rows in descending score order, ties broken by lower index.
    """

    values: np.ndarray
    top_indices: np.ndarray
    mode: str
    sample_count: int | None = None
    n_selected: int = field(init=False)

    def __post_init__(self):
        self.n_selected = int(len(self.top_indices))
        if len(np.unique(self.top_indices)) != self.n_selected:
            raise ContractError("top-u selection produced duplicate indices")


def default_top_u(length: int, factor: float = 5.0) -> int:
    """Selection budget ceil(factor * ln L), capped at L."""
    if length <= 1:
        return length
    return min(int(math.ceil(factor * math.log(length))), length)


def default_sample_count(n_keys: int, factor: float = 5.0) -> int:
    """Measurement key budget ceil(factor * ln L_K), capped at L_K."""
    if n_keys <= 1:
        return n_keys
    return min(int(math.ceil(factor * math.log(n_keys))), n_keys)


def sparsity_values_from_scores(scores: np.ndarray) -> np.ndarray:
    """LSE minus arithmetic mean over the last axis of a raw score array."""
    return log_sum_exp_lastdim(scores) - scores.mean(axis=-1)


def _validate_qkv(q: Tensor, k: Tensor, v: Tensor, causal: bool):
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError("attention inputs must be at least 2-d")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"query width {q.shape} does not match key width {k.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"key count {k.shape} does not match value count {v.shape}"
        )
    if causal and q.shape[-2] != k.shape[-2]:
        raise DimensionError(
            f"causal attention needs square scores, got {q.shape} x {k.shape}"
        )


def _causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def _batch_size(shape) -> int:
    return int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1


def full_attention(
    q: Tensor, k: Tensor, v: Tensor, causal: bool = False, counter=None
) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with optional causal masking."""
    _validate_qkv(q, k, v, causal)
    d = q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)).scale(1.0 / math.sqrt(d))
    if counter is not None:
        counter.add(_batch_size(q.shape) * q.shape[-2] * k.shape[-2])
    if causal:
        scores = scores + Tensor(_causal_bias(q.shape[-2]))
    return matmul(softmax_lastdim(scores), v)


def sparsity_measure(
    q: Tensor,
    k: Tensor,
    mode: str = "exact",
    sample_count: int | None = None,
    top_u: int | None = None,
    top_u_factor: float = 5.0,
    rng: np.random.Generator | None = None,
    counter=None,
) -> SparsityScores:
    """Score every query's attention sparsity and select the top-u queries.

    Operates on single (unbatched) [L, d] inputs; the batched equivalent is
    inlined in ``probsparse_attention``. Runs outside the gradient graph:
    selection is a discrete decision and carries no gradient.
    """
    if q.ndim != 2 or k.ndim != 2:
        raise DimensionError(f"sparsity_measure expects 2-d inputs, got {q.shape}, {k.shape}")
    n_queries, n_keys = q.shape[0], k.shape[0]
    scale = 1.0 / math.sqrt(q.shape[-1])

    if mode == "exact":
        scores = (q.data @ k.data.T) * scale
        if counter is not None:
            counter.add(n_queries * n_keys)
        used = None
    elif mode == "sampled":
        used = default_sample_count(n_keys, top_u_factor) if sample_count is None else int(sample_count)
        if not 1 <= used <= n_keys:
            raise ContractError(
                f"sample_count {used} outside [1, {n_keys}]"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = _sample_key_indices(rng, n_queries, n_keys, used)
        scores = np.einsum("ld,lmd->lm", q.data, k.data[idx]) * scale
        if counter is not None:
            counter.add(n_queries * used)
    else:
        raise ConfigError(f"unknown sparsity mode {mode!r}")

    values = sparsity_values_from_scores(scores)
    u = default_top_u(n_queries, top_u_factor) if top_u is None else int(top_u)
    if not 1 <= u <= n_queries:
        raise ContractError(f"top_u {u} outside [1, {n_queries}]")
    order = np.argsort(-values, kind="stable")
    return SparsityScores(values=values, top_indices=order[:u], mode=mode, sample_count=used)


def _sample_key_indices(rng, n_queries, n_keys, m):
    """Per-query uniform draws of m distinct key indices."""
    return np.argsort(rng.random((n_queries, n_keys)), axis=1)[:, :m]


def _causal_sparsity_values(scores: np.ndarray) -> np.ndarray:
    """Sparsity scores measured over each query's causal prefix only.

    Keeps selection independent of future positions, which the decoder's
    strict-causality contract requires.
    """
    length = scores.shape[-1]
    tri = np.tril(np.ones((length, length)))
    lse = log_sum_exp_lastdim(np.where(tri > 0, scores, -np.inf))
    mean = (scores * tri).sum(axis=-1) / np.arange(1, length + 1)
    return lse - mean


def probsparse_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    causal: bool = False,
    mode: str = "exact",
    top_u: int | None = None,
    top_u_factor: float = 5.0,
    sample_count: int | None = None,
    rng: np.random.Generator | None = None,
    counter=None,
) -> Tensor:
    """Attention computed fully only for the top-u queries per leading slice.

    Non-selected ("lazy") queries receive the value mean (or, under causal
    masking, the running mean of values up to their position), so the output
    keeps its shape and stays differentiable. With ``top_u == L_Q`` and exact
    measurement this reduces to ``full_attention``.

    Causal calls measure sparsity exactly over each query's prefix regardless
    of ``mode``: a sampled prefix measurement would degenerate for early
    positions, and decoder sequences are short enough that exact measurement
    is the cheaper option anyway.
    """
    _validate_qkv(q, k, v, causal)
    lead = q.shape[:-2]
    n_queries, n_keys, d = q.shape[-2], k.shape[-2], q.shape[-1]
    n_slices = _batch_size(q.shape)
    u = default_top_u(n_queries, top_u_factor) if top_u is None else int(top_u)
    if not 1 <= u <= n_queries:
        raise ContractError(f"top_u {u} outside [1, {n_queries}]")
    if mode not in ("exact", "sampled"):
        raise ConfigError(f"unknown sparsity mode {mode!r}")
    scale = 1.0 / math.sqrt(d)

    q3 = q.reshape(n_slices, n_queries, d)
    k3 = k.reshape(n_slices, n_keys, k.shape[-1])
    v3 = v.reshape(n_slices, n_keys, v.shape[-1])

    if causal or mode == "exact":
        # Score matrix built in-graph once; measurement reads its raw data
        # and the selected rows are gathered from it, so no dot products
        # beyond the L_Q * L_K of the measurement are spent.
        scores_full = matmul(q3, k3.swapaxes(-1, -2)).scale(scale)
        if counter is not None:
            counter.add(n_slices * n_queries * n_keys)
        if causal:
            values = _causal_sparsity_values(scores_full.data)
            scores_full = scores_full + Tensor(_causal_bias(n_queries))
        else:
            values = sparsity_values_from_scores(scores_full.data)
        idx = np.argsort(-values, axis=-1, kind="stable")[:, :u]
        sel_scores = take_rows(scores_full, idx)
    else:
        m = default_sample_count(n_keys, top_u_factor) if sample_count is None else int(sample_count)
        if not 1 <= m <= n_keys:
            raise ContractError(f"sample_count {m} outside [1, {n_keys}]")
        rng = rng if rng is not None else np.random.default_rng(0)
        key_idx = _sample_key_indices(rng, n_queries, n_keys, m)
        gathered = k3.data[:, key_idx, :]  # [n, L_Q, m, d], key subset per query
        sampled = np.einsum("nld,nlmd->nlm", q3.data, gathered) * scale
        if counter is not None:
            counter.add(n_slices * n_queries * m)
        values = sparsity_values_from_scores(sampled)
        idx = np.argsort(-values, axis=-1, kind="stable")[:, :u]
        q_sel = take_rows(q3, idx)
        sel_scores = matmul(q_sel, k3.swapaxes(-1, -2)).scale(scale)
        if counter is not None:
            counter.add(n_slices * u * n_keys)

    attn = softmax_lastdim(sel_scores)
    out_sel = matmul(attn, v3)

    if causal:
        weights = np.tril(np.ones((n_queries, n_keys))) / np.arange(
            1.0, n_queries + 1.0
        ).reshape(-1, 1)
        base = matmul(Tensor(weights), v3)
    else:
        base = Tensor(np.ones((n_queries, 1))) * v3.mean(axis=-2, keepdims=True)

    out = scatter_rows(base, out_sel, idx)
    return out.reshape(*lead, n_queries, v.shape[-1])


class MultiHeadAttention(Module):
    """Per-head projection, attention, concatenation, output projection."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        kind: str = "full",
        mode: str = "exact",
        top_u_factor: float = 5.0,
    ):
        if d_model % n_heads != 0:
            raise ConfigError(
                f"d_model {d_model} is not divisible by n_heads {n_heads}"
            )
        if kind not in ("full", "probsparse"):
            raise ConfigError(f"unknown attention kind {kind!r}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.kind = kind
        self.mode = mode
        self.top_u_factor = top_u_factor
        self.w_query = Linear(d_model, d_model, rng)
        self.w_key = Linear(d_model, d_model, rng)
        self.w_value = Linear(d_model, d_model, rng)
        self.w_out = Linear(d_model, d_model, rng)

    def __call__(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        causal: bool = False,
        rng: np.random.Generator | None = None,
        counter=None,
    ) -> Tensor:
        squeeze = query.ndim == 2
        if squeeze:
            query = query.reshape(1, *query.shape)
            key = key.reshape(1, *key.shape)
            value = value.reshape(1, *value.shape)
        batch, len_q = query.shape[0], query.shape[1]
        len_k = key.shape[1]
        dh = self.d_model // self.n_heads

        def split_heads(t, length):
            return t.reshape(batch, length, self.n_heads, dh).transpose((0, 2, 1, 3))

        qh = split_heads(self.w_query(query), len_q)
        kh = split_heads(self.w_key(key), len_k)
        vh = split_heads(self.w_value(value), len_k)

        if self.kind == "full":
            ctx = full_attention(qh, kh, vh, causal=causal, counter=counter)
        else:
            ctx = probsparse_attention(
                qh,
                kh,
                vh,
                causal=causal,
                mode=self.mode,
                top_u_factor=self.top_u_factor,
                rng=rng,
                counter=counter,
            )
        merged = ctx.transpose((0, 2, 1, 3)).reshape(batch, len_q, self.d_model)
        out = self.w_out(merged)
        return out.reshape(len_q, self.d_model) if squeeze else out
