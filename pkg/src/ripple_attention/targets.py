"""Ratio-mask training targets and mask application."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dsp import Spectrogram


class Objective(str, Enum):
    IRM = "irm"
    PSM = "psm"


@dataclass(frozen=True)
class MaskMatrix:
    """Real ``L x K`` mask with every entry in ``[0, 1]``."""

    values: np.ndarray
    objective: Objective = Objective.IRM

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("mask contains non-finite values")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "objective", Objective(self.objective))

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self, path=None, fmt: str = "%.9g"):
        """One row per frame.  Returns the text when ``path`` is None."""
        lines = [",".join(fmt % v for v in row) for row in self.values]
        text = "\n".join(lines) + "\n"
        if path is None:
            return text
        with open(path, "w") as fh:
            fh.write(text)


def _coefficients(x):
    return np.asarray(x.frames if isinstance(x, Spectrogram) else x)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def irm(clean, noise) -> MaskMatrix:
    """Ideal ratio mask ``sqrt(|S|^2 / (|S|^2 + |D|^2))``; silent bins map to 0."""
    s, d = _coefficients(clean), _coefficients(noise)
    _same_shape(s, d)
    ps = np.abs(s) ** 2
    pd = np.abs(d) ** 2
    total = ps + pd
    ratio = np.divide(ps, total, out=np.zeros_like(ps), where=total > 0)
    return MaskMatrix(np.sqrt(ratio), Objective.IRM)


def psm(clean, noisy) -> MaskMatrix:
    """Phase-sensitive mask ``|S| / |X| * cos(angle(S) - angle(X))`` clamped to [0, 1].

    ``Re(S * conj(X)) / |X|^2`` is the same quantity without explicit angles.
    Bins with ``X == 0`` are set to 0.
    """
    s, x = _coefficients(clean), _coefficients(noisy)
    _same_shape(s, x)
    px = np.abs(x) ** 2
    raw = np.divide(np.real(s * np.conj(x)), px, out=np.zeros(px.shape), where=px > 0)
    return MaskMatrix(np.clip(raw, 0.0, 1.0), Objective.PSM)


def compute_target(objective, clean: Spectrogram, noise: Spectrogram,
                   noisy: Spectrogram) -> MaskMatrix:
    objective = Objective(objective)
    if objective is Objective.IRM:
        return irm(clean, noise)
    return psm(clean, noisy)


def apply_mask(noisy: Spectrogram, mask) -> Spectrogram:
    """Scale each noisy coefficient by the real mask; phase is untouched."""
    values = mask.values if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=np.float64)
    _same_shape(noisy.frames, values)
    return noisy.with_frames(noisy.frames * values)
