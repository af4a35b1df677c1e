"""Theoretical MAC counts per attention pattern, and kernel wall-clock timing.

One multiply-accumulate counts as 1.  Softmax exponentials and divisions
are not counted.  Per transformer layer of length ``L``:

* projections: ``4 * L * d_model**2`` (Q, K, V and output)
* scores and context: ``nnz * d_model`` each
* feed-forward: ``2 * L * d_model * d_ff`` (only with ``scope="layer"``)

The dual-path (SepFormer-style) baseline splits the sequence into ``S``
chunks of length ``C`` with 50% overlap and alternates intra-chunk layers
(``S`` independent ``C x C`` attentions over ``S * C`` frames) with
inter-chunk layers (``C`` independent ``S x S`` attentions).
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .kernel import MhaParams, attend_dense, attend_sparse
from .model import ModelConfig
from .pattern import PatternSpec, build_mask, layer_schedule, nnz

SCOPES = ("attention", "layer")


@dataclass(frozen=True)
class SepFormerSpec:
    chunk: int = 50
    intra_layers: int = 2
    inter_layers: int = 2

    def n_chunks(self, L: int) -> int:
        return max(1, math.ceil(2 * L / self.chunk) - 1)

    def label(self) -> str:
        return f"sepformer(C={self.chunk})"


@dataclass(frozen=True)
class MacReport:
    pattern: str
    L: int
    macs_scores: int
    macs_context: int
    macs_proj: int
    macs_ffn: int

    @property
    def macs_total(self) -> int:
        return self.macs_scores + self.macs_context + self.macs_proj + self.macs_ffn

    def row(self) -> dict:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values["macs_total"] = self.macs_total
        return values


def _layer_terms(n_frames, n_pairs, cfg, scope):
    d = cfg.d_model
    ffn = 2 * n_frames * d * cfg.d_ff if scope == "layer" else 0
    return n_pairs * d, n_pairs * d, 4 * n_frames * d * d, ffn


def macs_attention(spec, L: int, cfg: ModelConfig, scope: str = "attention",
                   use_schedule: bool = False) -> MacReport:
    """MAC counts of an ``n_blocks``-layer stack at sequence length ``L``.

    Parameters
    ----------
    spec : PatternSpec or SepFormerSpec
    L : int
    cfg : ModelConfig
        Supplies ``d_model``, ``d_ff`` and ``n_blocks``.
    scope : {"attention", "layer"}
        ``"attention"`` counts the self-attention modules only;
        ``"layer"`` adds the feed-forward sublayers.
    use_schedule : bool
        If True, ripple requests use band attention in the lower half of the
        stack as the trained model does.  False compares patterns as-is.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if L < 1:
        raise ValueError("L must be >= 1")
    totals = np.zeros(4, dtype=object)
    if isinstance(spec, SepFormerSpec):
        S, C = spec.n_chunks(L), spec.chunk
        for _ in range(spec.intra_layers):
            totals += _layer_terms(S * C, S * C * C, cfg, scope)
        for _ in range(spec.inter_layers):
            totals += _layer_terms(C * S, C * S * S, cfg, scope)
        label = spec.label()
    else:
        layers = layer_schedule(cfg.n_blocks, spec) if use_schedule else [spec] * cfg.n_blocks
        for layer_spec in layers:
            totals += _layer_terms(L, nnz(layer_spec, L), cfg, scope)
        label = spec.label()
    return MacReport(label, int(L), *(int(t) for t in totals))


def macs_sweep(specs, L_list, cfg: ModelConfig, **kwargs) -> list[MacReport]:
    """One report per (spec, L), sorted by pattern label then ``L``."""
    specs, L_list = list(specs), list(L_list)
    if not specs or not L_list:
        raise ValueError("specs and L_list must be nonempty")
    reports = [macs_attention(s, L, cfg, **kwargs) for s in specs for L in L_list]
    return sorted(reports, key=lambda r: (r.pattern, r.L))


MAC_COLUMNS = ["pattern", "L", "macs_scores", "macs_context", "macs_proj", "macs_ffn", "macs_total"]


def reports_to_csv(reports, path=None):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MAC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerow(report.row())
    if path is None:
        return buf.getvalue()
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


@dataclass(frozen=True)
class BenchRow:
    pattern: str
    L: int
    median_ns: int


def bench_kernels(spec: PatternSpec, L_list, cfg: ModelConfig, repetitions: int = 5,
                  warmup: int = 1, seed: int = 0) -> list[BenchRow]:
    """Median wall-clock time of dense full attention vs. the sparse kernel.

    Runs with BLAS limited to one thread.  Each ``L`` yields two rows:
    ``dense-full`` and ``sparse-<spec label>``.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    rng = np.random.default_rng(seed)
    params = MhaParams.random(cfg.d_model, cfg.n_heads, rng)
    rows = []
    with threadpool_limits(limits=1):
        for L in L_list:
            x = rng.standard_normal((L, cfg.d_model))
            full = build_mask(PatternSpec.full(), L)
            runs = {
                "dense-full": lambda: attend_dense(x, x, x, params, full),
                f"sparse-{spec.label()}": lambda: attend_sparse(x, x, x, params, spec),
            }
            for name, fn in runs.items():
                for _ in range(warmup):
                    fn()
                times = []
                for _ in range(repetitions):
                    start = time.perf_counter_ns()
                    fn()
                    times.append(time.perf_counter_ns() - start)
                rows.append(BenchRow(name, int(L), int(np.median(times))))
    return rows


def bench_to_csv(rows, path=None):
    text = "pattern,L,median_ns\n" + "".join(f"{r.pattern},{r.L},{r.median_ns}\n" for r in rows)
    if path is None:
        return text
    with open(path, "w") as fh:
        fh.write(text)
