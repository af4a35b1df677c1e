"""Mask-estimation transformer with sparse self-attention blocks.

Pipeline for an ``L x K`` magnitude input::

    per-frame affine -> layer norm -> ReLU
    -> n_blocks x [MHA + residual -> layer norm; FFN + residual -> layer norm]
    -> per-frame affine -> sigmoid

All layer norms are frame-wise (over the feature axis).  Forward and
backward are written out by hand in float64 so gradients are exact.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernel import MhaParams, attend, attend_backward
from .pattern import PatternSpec, layer_schedule

MAGIC = b"RSAE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    n_bins: int = 257
    pattern: PatternSpec = field(default_factory=lambda: PatternSpec.ripple(12, 24))
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.n_bins < 1 or self.d_ff < 1:
            raise ValueError("n_bins and d_ff must be >= 1")
        if self.ln_eps < 0:
            raise ValueError("ln_eps must be >= 0")

    def schedule(self) -> list[PatternSpec]:
        return layer_schedule(self.n_blocks, self.pattern)

    def to_text(self) -> str:
        return (
            f"n_blocks={self.n_blocks}\nn_heads={self.n_heads}\n"
            f"d_model={self.d_model}\nd_ff={self.d_ff}\nn_bins={self.n_bins}\n"
            f"pattern={self.pattern.to_text()}\nln_eps={self.ln_eps!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        items = dict(line.split("=", 1) for line in text.strip().splitlines())
        return cls(
            n_blocks=int(items["n_blocks"]),
            n_heads=int(items["n_heads"]),
            d_model=int(items["d_model"]),
            d_ff=int(items["d_ff"]),
            n_bins=int(items["n_bins"]),
            pattern=PatternSpec.from_text(items["pattern"]),
            ln_eps=float(items["ln_eps"]),
        )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Parameter names and shapes in canonical (checkpoint) order."""
    d, K, f = cfg.d_model, cfg.n_bins, cfg.d_ff
    shapes = {"in.w": (K, d), "in.b": (d,), "in.ln.g": (d,), "in.ln.b": (d,)}
    for i in range(cfg.n_blocks):
        p = f"block{i}."
        shapes.update({
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "ff1.w": (d, f), p + "ff1.b": (f,),
            p + "ff2.w": (f, d), p + "ff2.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
        })
    shapes.update({"out.w": (d, K), "out.b": (K,)})
    return shapes


class ModelParams(dict):
    """Mapping of parameter name to float64 array, plus the owning config.

    Iteration follows :func:`param_shapes` order.
    """

    def __init__(self, config: ModelConfig, arrays):
        shapes = param_shapes(config)
        super().__init__()
        for name, shape in shapes.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"{name}: shape {value.shape} != {shape}")
            self[name] = value
        self.config = config

    def mha(self, block: int) -> MhaParams:
        p = f"block{block}."
        return MhaParams(self[p + "wq"], self[p + "wk"], self[p + "wv"], self[p + "wo"],
                         n_heads=self.config.n_heads)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.values())

    def equals(self, other) -> bool:
        """Bitwise equality of config and every parameter."""
        return self.config == other.config and all(
            np.array_equal(self[k].view(np.uint64), other[k].view(np.uint64)) for k in self
        )


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(cfg, arrays)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def layer_norm(x, gain, bias, eps):
    """Frame-wise layer norm.  Returns ``(y, (x_hat, inv_std))``."""
    centered = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=1, keepdims=True) + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def _layer_norm_backward(dy, gain, saved):
    x_hat, inv_std = saved
    dx_hat = dy * gain
    dx = inv_std * (
        dx_hat
        - dx_hat.mean(axis=1, keepdims=True)
        - x_hat * np.mean(dx_hat * x_hat, axis=1, keepdims=True)
    )
    return dx, np.sum(dy * x_hat, axis=0), np.sum(dy, axis=0)


@dataclass
class ForwardCache:
    x: np.ndarray
    output: np.ndarray
    steps: dict
    block_outputs: list


def forward(params: ModelParams, magnitude, kernel: str = "sparse", return_cache: bool = False):
    """Estimate an ``L x K`` mask in ``(0, 1)`` from an ``L x K`` magnitude."""
    cfg = params.config
    x = np.asarray(magnitude, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.n_bins:
        raise ValueError(f"expected an L x {cfg.n_bins} magnitude, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("input must contain at least one frame")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    eps = cfg.ln_eps
    steps = {}

    pre = x @ params["in.w"] + params["in.b"]
    normed, steps["in.ln"] = layer_norm(pre, params["in.ln.g"], params["in.ln.b"], eps)
    hidden = np.maximum(normed, 0.0)
    steps["in.relu"] = normed > 0
    block_outputs = []

    for i, spec in enumerate(cfg.schedule()):
        p = f"block{i}."
        attn, steps[p + "mha"] = attend(hidden, hidden, hidden, params.mha(i), spec,
                                        kernel=kernel, return_cache=True)
        hidden, steps[p + "ln1"] = layer_norm(hidden + attn, params[p + "ln1.g"],
                                              params[p + "ln1.b"], eps)
        steps[p + "ff.in"] = hidden
        inner = hidden @ params[p + "ff1.w"] + params[p + "ff1.b"]
        act = np.maximum(inner, 0.0)
        steps[p + "ff.act"] = act
        ff = act @ params[p + "ff2.w"] + params[p + "ff2.b"]
        hidden, steps[p + "ln2"] = layer_norm(hidden + ff, params[p + "ln2.g"],
                                              params[p + "ln2.b"], eps)
        block_outputs.append(hidden)

    steps["out.in"] = hidden
    mask = _sigmoid(hidden @ params["out.w"] + params["out.b"])
    if not return_cache:
        return mask
    return mask, ForwardCache(x, mask, steps, block_outputs)


def mse_loss(prediction, target) -> float:
    prediction, target = np.asarray(prediction), np.asarray(target)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    return float(np.mean((prediction - target) ** 2))


def backward(params: ModelParams, cache: ForwardCache, target, return_input_grad: bool = False):
    """Mean squared error against ``target`` and its exact gradients.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``params``; with
    ``return_input_grad`` the gradient w.r.t. the magnitude input is appended.
    """
    if cache is None:
        raise RuntimeError("backward needs the cache of a forward pass")
    cfg = params.config
    target = np.asarray(target, dtype=np.float64)
    pred = cache.output
    loss = mse_loss(pred, target)
    steps = cache.steps
    grads = {}

    d_logits = 2.0 * (pred - target) / pred.size * pred * (1.0 - pred)
    grads["out.w"] = steps["out.in"].T @ d_logits
    grads["out.b"] = d_logits.sum(axis=0)
    d_hidden = d_logits @ params["out.w"].T

    for i in reversed(range(cfg.n_blocks)):
        p = f"block{i}."
        d_res, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_backward(
            d_hidden, params[p + "ln2.g"], steps[p + "ln2"])
        act = steps[p + "ff.act"]
        grads[p + "ff2.w"] = act.T @ d_res
        grads[p + "ff2.b"] = d_res.sum(axis=0)
        d_inner = (d_res @ params[p + "ff2.w"].T) * (act > 0)
        grads[p + "ff1.w"] = steps[p + "ff.in"].T @ d_inner
        grads[p + "ff1.b"] = d_inner.sum(axis=0)
        d_mid = d_res + d_inner @ params[p + "ff1.w"].T

        d_res, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_backward(
            d_mid, params[p + "ln1.g"], steps[p + "ln1"])
        g = attend_backward(d_res, steps[p + "mha"])
        grads[p + "wq"], grads[p + "wk"], grads[p + "wv"], grads[p + "wo"] = g.wq, g.wk, g.wv, g.wo
        d_hidden = d_res + g.dq + g.dk + g.dv

    d_normed = d_hidden * steps["in.relu"]
    d_pre, grads["in.ln.g"], grads["in.ln.b"] = _layer_norm_backward(
        d_normed, params["in.ln.g"], steps["in.ln"])
    grads["in.w"] = cache.x.T @ d_pre
    grads["in.b"] = d_pre.sum(axis=0)

    grads = {name: grads[name] for name in params}
    if return_input_grad:
        return loss, grads, d_pre @ params["in.w"].T
    return loss, grads


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save(params: ModelParams, path) -> None:
    """Write a checkpoint.

    Layout (little endian): ``b"RSAE"``, u32 version, u64 config length,
    config text (UTF-8 ``key=value`` lines), float64 parameter blobs in
    :func:`param_shapes` order, then an 8-byte BLAKE2b digest of everything
    before it.
    """
    config = params.config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(config)), config]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values()]
    payload = b"".join(parts)
    Path(path).write_bytes(payload + _checksum(payload))


def load(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < 16:
        raise ChecksumError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {version}, this reader supports {FORMAT_VERSION}")
    payload, digest = data[:-8], data[-8:]
    if len(data) < 24 or _checksum(payload) != digest:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted file)")

    (config_len,) = struct.unpack_from("<Q", data, 8)
    offset = 16 + config_len
    cfg = ModelConfig.from_text(data[16:offset].decode("utf-8"))
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = arrays[name].reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise ChecksumError(f"{path}: payload size does not match the stored config")
    return ModelParams(cfg, arrays)
