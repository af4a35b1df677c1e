"""Masked multi-head scaled dot-product attention.

Two forward paths share one parameter set:

* :func:`attend_dense` builds every ``L x L`` score, sets disallowed entries
  to ``-inf`` and takes a row softmax.  It is the reference.
* :func:`attend_sparse` stores scores packed by offset (``L x n_offsets``)
  and only ever computes allowed (query, key) pairs, so score and context
  work is ``nnz * d_model`` multiply-accumulates each.

Both return ``(out, cache)`` when asked, and :func:`attend_backward` gives
exact gradients from either cache.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pattern import BoolMask, PatternSpec, offset_layout

_ACTIVE_COUNTER: contextvars.ContextVar[Optional["MacCounter"]] = contextvars.ContextVar(
    "ripple_mac_counter", default=None
)


@dataclass
class MacCounter:
    """Multiply-accumulates spent on attention scores and context vectors."""

    scores: int = 0
    context: int = 0

    @property
    def total(self) -> int:
        return self.scores + self.context


@contextmanager
def count_macs():
    """Enable the instrumented counter for kernel calls made in this context.

    >>> with count_macs() as counter:
    ...     out = attend_sparse(q, k, v, params, spec)  # doctest: +SKIP
    >>> counter.scores  # doctest: +SKIP
    """
    counter = MacCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _count(scores: int, context: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.scores += int(scores)
        counter.context += int(context)


@dataclass
class MhaParams:
    """Projection weights of one multi-head attention layer.

    ``wq``, ``wk`` and ``wv`` are ``d_model x d_model``; columns
    ``i * d_k : (i + 1) * d_k`` hold head ``i``.  ``wo`` maps the concatenated
    heads back to ``d_model``.  No projection biases.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    n_heads: int

    def __post_init__(self):
        d_model = self.wq.shape[0]
        if self.n_heads < 1 or d_model % self.n_heads:
            raise ValueError(
                f"n_heads={self.n_heads} must divide d_model={d_model}"
            )
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d_model, d_model):
                raise ValueError(f"{name} has shape {w.shape}, expected {(d_model, d_model)}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def head(self, i: int):
        """Per-head ``(W_q, W_k, W_v)`` blocks, each ``d_model x d_head``."""
        cols = slice(i * self.d_head, (i + 1) * self.d_head)
        return self.wq[:, cols], self.wk[:, cols], self.wv[:, cols]

    @classmethod
    def random(cls, d_model: int, n_heads: int, rng=None) -> "MhaParams":
        rng = np.random.default_rng(rng)
        bound = np.sqrt(6.0 / (2 * d_model))
        ws = [rng.uniform(-bound, bound, size=(d_model, d_model)) for _ in range(4)]
        return cls(*ws, n_heads=n_heads)


@dataclass
class MhaGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass
class AttentionCache:
    sparse: bool
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    probs: np.ndarray
    concat: np.ndarray
    params: MhaParams
    layout: Optional[tuple] = None


def _check_inputs(q, k, v, params):
    arrays = []
    for name, x in (("Q", q), ("K", k), ("V", v)):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != params.d_model:
            raise ValueError(f"{name} must be L x {params.d_model}, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"{name} contains non-finite values")
        arrays.append(x)
    if not arrays[0].shape == arrays[1].shape == arrays[2].shape:
        raise ValueError("Q, K and V must share the same shape")
    return arrays


def _split_heads(x, w, n_heads):
    L = x.shape[0]
    return (x @ w).reshape(L, n_heads, -1)


def attend_dense(q, k, v, params: MhaParams, mask: BoolMask, return_cache: bool = False):
    """Reference masked attention over a materialized ``L x L`` mask."""
    q, k, v = _check_inputs(q, k, v, params)
    L, h, dk = q.shape[0], params.n_heads, params.d_head
    m = np.asarray(mask.m if isinstance(mask, BoolMask) else mask, dtype=bool)
    if m.shape != (L, L):
        raise ValueError(f"mask shape {m.shape} does not match sequence length {L}")
    if not np.all(m.any(axis=1)):
        raise ValueError("every mask row needs at least one allowed column")

    qh = _split_heads(q, params.wq, h).transpose(1, 0, 2)
    kh = _split_heads(k, params.wk, h).transpose(1, 0, 2)
    vh = _split_heads(v, params.wv, h).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dk)
    scores = np.where(m, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = probs @ vh
    _count(L * L * h * dk, L * L * h * dk)

    concat = ctx.transpose(1, 0, 2).reshape(L, h * dk)
    out = concat @ params.wo
    if not return_cache:
        return out
    cache = AttentionCache(False, q, k, v, qh, kh, vh, probs, concat, params)
    return out, cache


def attend_sparse(q, k, v, params: MhaParams, spec: PatternSpec, return_cache: bool = False):
    """Masked attention that only evaluates pairs allowed by ``spec``.

    Scores live in an ``(L, n_offsets, n_heads)`` buffer where slot ``s`` of
    row ``i`` holds the score against key ``i + offsets[s]``.  Offsets are
    ascending, so every reduction runs over keys in ascending column order.
    """
    q, k, v = _check_inputs(q, k, v, params)
    L, h, dk = q.shape[0], params.n_heads, params.d_head
    layout = offset_layout(spec, L)
    offsets, query_rows, key_rows = layout
    n_off = len(offsets)

    qh = _split_heads(q, params.wq, h)
    kh = _split_heads(k, params.wk, h)
    vh = _split_heads(v, params.wv, h)
    scale = 1.0 / np.sqrt(dk)

    scores = np.zeros((L, n_off, h))
    valid = np.zeros((L, n_off), dtype=bool)
    pairs = 0
    for s in range(n_off):
        qi, ki = query_rows[s], key_rows[s]
        scores[qi, s] = np.einsum("nhd,nhd->nh", qh[qi], kh[ki]) * scale
        valid[qi, s] = True
        pairs += qh[qi].shape[0]

    # softmax over allowed slots only; the self slot keeps every row nonempty
    where = np.broadcast_to(valid[:, :, None], scores.shape)
    row_max = scores.max(axis=1, where=where, initial=-np.inf, keepdims=True)
    probs = np.exp(scores - row_max, where=where, out=np.zeros_like(scores))
    probs /= probs.sum(axis=1, keepdims=True)

    ctx = np.zeros((L, h, dk))
    for s in range(n_off):
        qi, ki = query_rows[s], key_rows[s]
        ctx[qi] += probs[qi, s, :, None] * vh[ki]
    _count(pairs * h * dk, pairs * h * dk)

    concat = ctx.reshape(L, h * dk)
    out = concat @ params.wo
    if not return_cache:
        return out
    cache = AttentionCache(True, q, k, v, qh, kh, vh, probs, concat, params, layout)
    return out, cache


def attend(q, k, v, params: MhaParams, spec: PatternSpec, kernel: str = "sparse",
           return_cache: bool = False):
    """Dispatch to the sparse kernel or to the dense kernel with a built mask."""
    if kernel == "sparse":
        return attend_sparse(q, k, v, params, spec, return_cache=return_cache)
    if kernel == "dense":
        from .pattern import build_mask

        mask = build_mask(spec, np.shape(q)[0])
        return attend_dense(q, k, v, params, mask, return_cache=return_cache)
    raise ValueError(f"unknown kernel {kernel!r}; expected 'sparse' or 'dense'")


def attend_backward(dout, cache: Optional[AttentionCache]) -> MhaGrads:
    """Gradients of the attention output with respect to inputs and weights."""
    if cache is None:
        raise RuntimeError("attend_backward needs the cache of a forward pass")
    params = cache.params
    L, h, dk = cache.q.shape[0], params.n_heads, params.d_head
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != (L, params.d_model):
        raise ValueError(f"upstream gradient shape {dout.shape} != {(L, params.d_model)}")
    scale = 1.0 / np.sqrt(dk)

    d_wo = cache.concat.T @ dout
    d_ctx = (dout @ params.wo.T).reshape(L, h, dk)
    if cache.sparse:
        d_qh, d_kh, d_vh = _sparse_core_backward(d_ctx, cache, scale)
    else:
        d_ctx = d_ctx.transpose(1, 0, 2)
        probs = cache.probs
        d_probs = d_ctx @ cache.vh.transpose(0, 2, 1)
        d_vh = probs.transpose(0, 2, 1) @ d_ctx
        d_scores = probs * (d_probs - np.sum(probs * d_probs, axis=-1, keepdims=True))
        d_qh = (d_scores @ cache.kh * scale).transpose(1, 0, 2)
        d_kh = (d_scores.transpose(0, 2, 1) @ cache.qh * scale).transpose(1, 0, 2)
        d_vh = d_vh.transpose(1, 0, 2)

    d_qp = d_qh.reshape(L, -1)
    d_kp = d_kh.reshape(L, -1)
    d_vp = d_vh.reshape(L, -1)
    return MhaGrads(
        dq=d_qp @ params.wq.T,
        dk=d_kp @ params.wk.T,
        dv=d_vp @ params.wv.T,
        wq=cache.q.T @ d_qp,
        wk=cache.k.T @ d_kp,
        wv=cache.v.T @ d_vp,
        wo=d_wo,
    )


def _sparse_core_backward(d_ctx, cache, scale):
    offsets, query_rows, key_rows = cache.layout
    probs, qh, kh, vh = cache.probs, cache.qh, cache.kh, cache.vh
    d_probs = np.zeros_like(probs)
    d_vh = np.zeros_like(vh)
    for s in range(len(offsets)):
        qi, ki = query_rows[s], key_rows[s]
        d_probs[qi, s] = np.einsum("nhd,nhd->nh", d_ctx[qi], vh[ki])
        d_vh[ki] += probs[qi, s, :, None] * d_ctx[qi]

    d_scores = probs * (d_probs - np.sum(probs * d_probs, axis=1, keepdims=True))
    d_scores *= scale
    d_qh = np.zeros_like(qh)
    d_kh = np.zeros_like(kh)
    for s in range(len(offsets)):
        qi, ki = query_rows[s], key_rows[s]
        d_qh[qi] += d_scores[qi, s, :, None] * kh[ki]
        d_kh[ki] += d_scores[qi, s, :, None] * qh[qi]
    return d_qh, d_kh, d_vh
