"""Central finite-difference check of the model's analytic gradients."""
from __future__ import annotations

import numpy as np

from .model import ModelConfig, backward, forward, init_params, mse_loss
from .pattern import PatternSpec

TINY_CONFIG = ModelConfig(n_blocks=2, n_heads=2, d_model=8, d_ff=16, n_bins=5,
                          pattern=PatternSpec.ripple(2, 2))
TINY_FRAMES = 7


def relative_error(analytic, numeric, floor: float = 1e-7):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_model_gradients(cfg: ModelConfig = TINY_CONFIG, n_frames: int = TINY_FRAMES,
                          seed: int = 0, step: float = 1e-5, kernel: str = "sparse",
                          corrupt: bool = False) -> dict:
    """Max relative error per parameter (and ``"input"``) against central differences.

    ``corrupt`` perturbs one analytic gradient entry; it exists so callers can
    confirm the check actually fails on wrong gradients.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    x = rng.uniform(0.0, 2.0, size=(n_frames, cfg.n_bins))
    target = rng.uniform(0.0, 1.0, size=(n_frames, cfg.n_bins))

    _, cache = forward(params, x, kernel=kernel, return_cache=True)
    _, grads, d_input = backward(params, cache, target, return_input_grad=True)
    analytic = dict(grads, input=d_input)
    if corrupt:
        analytic["in.w"] = analytic["in.w"].copy()
        analytic["in.w"].flat[0] += 1e-2

    def loss():
        return mse_loss(forward(params, x, kernel=kernel), target)

    arrays = dict(params, input=x)
    errors = {}
    for name, array in arrays.items():
        numeric = np.empty_like(array)
        for idx in np.ndindex(array.shape):
            saved = array[idx]
            array[idx] = saved + step
            up = loss()
            array[idx] = saved - step
            down = loss()
            array[idx] = saved
            numeric[idx] = (up - down) / (2 * step)
        errors[name] = float(relative_error(analytic[name], numeric).max())
    return errors
