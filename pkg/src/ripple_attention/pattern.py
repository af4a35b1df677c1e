"""Attention mask patterns: full, local band, ripple (band + dilated) and blockwise.

A :class:`PatternSpec` is a declarative description; :func:`build_mask`
materializes it as an ``L x L`` boolean matrix and :func:`nnz` counts its
nonzero entries in closed form.  The sparse kernel consumes the same spec
through :func:`offset_layout`, which never builds the dense matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class PatternKind(str, Enum):
    FULL = "full"
    BAND = "band"
    RIPPLE = "ripple"
    BLOCKWISE = "blockwise"


@dataclass(frozen=True)
class PatternSpec:
    """Parameters of an attention pattern.

    Parameters
    ----------
    kind : PatternKind or str
        One of ``full``, ``band``, ``ripple``, ``blockwise``.
    w : int
        Local window length in frames (band and ripple).  Each frame attends
        to ``w // 2`` neighbours on each side, so ``w`` must be even.
    d : int
        Dilation rate of the global part of the ripple pattern.
    block : int
        Block length for the blockwise pattern.
    """

    kind: PatternKind = PatternKind.FULL
    w: int = 0
    d: int = 1
    block: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        for name in ("w", "d", "block"):
            value = getattr(self, name)
            if int(value) != value:
                raise ValueError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.w < 0 or self.w % 2:
            raise ValueError(f"window w must be even and >= 0, got {self.w}")
        if self.d < 1:
            raise ValueError(f"dilation d must be >= 1, got {self.d}")
        if self.block < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")

    @property
    def half_window(self) -> int:
        return self.w // 2

    @classmethod
    def full(cls) -> "PatternSpec":
        return cls(PatternKind.FULL)

    @classmethod
    def band(cls, w: int) -> "PatternSpec":
        return cls(PatternKind.BAND, w=w)

    @classmethod
    def ripple(cls, w: int, d: int) -> "PatternSpec":
        return cls(PatternKind.RIPPLE, w=w, d=d)

    @classmethod
    def blockwise(cls, block: int) -> "PatternSpec":
        return cls(PatternKind.BLOCKWISE, block=block)

    def label(self) -> str:
        """Short identifier used in CSV tables, e.g. ``ripple(w=12,d=24)``."""
        if self.kind is PatternKind.FULL:
            return "full"
        if self.kind is PatternKind.BAND:
            return f"band(w={self.w})"
        if self.kind is PatternKind.RIPPLE:
            return f"ripple(w={self.w},d={self.d})"
        return f"blockwise(block={self.block})"

    def to_text(self) -> str:
        return f"{self.kind.value},{self.w},{self.d},{self.block}"

    @classmethod
    def from_text(cls, text: str) -> "PatternSpec":
        kind, w, d, block = text.strip().split(",")
        return cls(PatternKind(kind), w=int(w), d=int(d), block=int(block))


@dataclass(frozen=True)
class BoolMask:
    """Materialized mask; ``m[i, j]`` is True when frame ``i`` may attend to ``j``."""

    m: np.ndarray
    spec: PatternSpec

    @property
    def length(self) -> int:
        return self.m.shape[0]

    def row_degrees(self) -> np.ndarray:
        return self.m.sum(axis=1)

    def to_pbm(self) -> str:
        """Plain (P1) portable bitmap; 1 marks an allowed pair."""
        L = self.length
        rows = ["".join("1" if v else "0" for v in row) for row in self.m]
        return "P1\n{} {}\n{}\n".format(L, L, "\n".join(rows))

    def degrees_csv(self) -> str:
        lines = ["row,degree"]
        lines += [f"{i},{int(deg)}" for i, deg in enumerate(self.row_degrees())]
        return "\n".join(lines) + "\n"


def _check_length(L: int) -> int:
    if int(L) != L or L < 1:
        raise ValueError(f"sequence length must be a positive integer, got {L!r}")
    return int(L)


def attend_offsets(spec: PatternSpec, L: int) -> np.ndarray:
    """Sorted signed offsets ``j - i`` that may be attended for some row.

    For blockwise patterns every offset in ``(-block, block)`` is listed; the
    row-dependent block constraint is applied by :func:`offset_layout`.
    """
    L = _check_length(L)
    kind = spec.kind
    if kind is PatternKind.FULL:
        reach = np.arange(L)
    elif kind is PatternKind.BLOCKWISE:
        reach = np.arange(min(spec.block, L))
    else:
        h = spec.half_window
        reach = np.arange(min(h, L - 1) + 1)
        if kind is PatternKind.RIPPLE:
            dilated = np.arange(h + spec.d, L, spec.d)
            reach = np.concatenate([reach, dilated])
    return np.concatenate([-reach[:0:-1], reach]) if reach.size > 1 else reach.copy()


def build_mask(spec: PatternSpec, L: int) -> BoolMask:
    """Materialize ``spec`` as a dense ``L x L`` boolean mask."""
    L = _check_length(L)
    idx = np.arange(L)
    if spec.kind is PatternKind.BLOCKWISE:
        blk = idx // spec.block
        m = blk[:, None] == blk[None, :]
    else:
        reach = attend_offsets(spec, L)
        dist = np.abs(idx[:, None] - idx[None, :])
        m = np.isin(dist, reach[reach >= 0])
    return BoolMask(m=m, spec=spec)


def nnz(spec: PatternSpec, L: int) -> int:
    """Closed-form count of allowed (query, key) pairs."""
    L = _check_length(L)
    if spec.kind is PatternKind.FULL:
        return L * L
    if spec.kind is PatternKind.BLOCKWISE:
        full_blocks, rest = divmod(L, spec.block)
        return full_blocks * spec.block**2 + rest**2
    # each positive offset k < L is shared by 2 * (L - k) ordered pairs
    reach = attend_offsets(spec, L)
    positive = reach[reach > 0]
    return L + 2 * int(np.sum(L - positive))


def offset_layout(spec: PatternSpec, L: int):
    """Row ranges per offset for the packed sparse kernel.

    Returns
    -------
    offsets : ndarray of int
        Ascending signed offsets.
    query_rows : list of slice or ndarray
        For each offset ``k``, the rows ``i`` for which ``(i, i + k)`` is allowed.
    key_rows : list of slice or ndarray
        The matching key rows ``i + k``.
    """
    offsets = attend_offsets(spec, L)
    query_rows, key_rows = [], []
    for k in offsets:
        k = int(k)
        lo, hi = max(0, -k), L - max(0, k)
        if spec.kind is PatternKind.BLOCKWISE:
            rows = np.arange(lo, hi)
            rows = rows[rows // spec.block == (rows + k) // spec.block]
            query_rows.append(rows)
            key_rows.append(rows + k)
        else:
            query_rows.append(slice(lo, hi))
            key_rows.append(slice(lo + k, hi + k))
    return offsets, query_rows, key_rows


def layer_schedule(n_blocks: int, spec: PatternSpec) -> list[PatternSpec]:
    """Per-layer patterns for a stack of ``n_blocks`` attention blocks.

    A ripple request puts plain band attention in the lower ``n_blocks // 2``
    layers, where attention is mostly local anyway, and the full ripple
    pattern above them.  Other kinds are used unchanged at every layer.
    """
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    if spec.kind is not PatternKind.RIPPLE:
        return [spec] * n_blocks
    n_band = n_blocks // 2
    band = replace(spec, kind=PatternKind.BAND, d=1)
    return [band] * n_band + [spec] * (n_blocks - n_band)
