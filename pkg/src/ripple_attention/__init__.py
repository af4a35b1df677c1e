"""Ripple sparse self-attention for mask-based speech enhancement."""
from .dsp import Spectrogram, StftConfig, Waveform, istft, mix_at_snr, stft
from .estimator import RippleMaskRegressor, SpectrogramTransformer, SpeechEnhancer
from .kernel import MhaParams, attend_backward, attend_dense, attend_sparse, count_macs
from .model import ModelConfig, ModelParams, backward, forward, init_params, load, save
from .pattern import BoolMask, PatternKind, PatternSpec, build_mask, layer_schedule, nnz
from .targets import MaskMatrix, Objective, apply_mask, irm, psm

__version__ = "0.1.0"

__all__ = [
    "BoolMask", "MaskMatrix", "MhaParams", "ModelConfig", "ModelParams", "Objective",
    "PatternKind", "PatternSpec", "RippleMaskRegressor", "Spectrogram",
    "SpectrogramTransformer", "SpeechEnhancer", "StftConfig", "Waveform", "apply_mask",
    "attend_backward", "attend_dense", "attend_sparse", "backward", "build_mask",
    "count_macs", "forward", "init_params", "irm", "istft", "layer_schedule", "load",
    "mix_at_snr", "nnz", "psm", "save", "stft",
]
