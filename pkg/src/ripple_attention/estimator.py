"""scikit-learn style wrappers around the mask network.

:class:`RippleMaskRegressor` learns magnitude -> mask on spectrogram
sequences of varying length.  :class:`SpectrogramTransformer` turns
waveforms into magnitude spectrograms, and :class:`SpeechEnhancer` chains
STFT, mask estimation and resynthesis on waveforms.
"""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paired, check_sequences, check_waveforms
from .dsp import StftConfig, Waveform, istft, stft
from .model import ModelConfig, ModelParams, forward, init_params
from .pattern import PatternSpec
from .targets import Objective, apply_mask, compute_target
from .train import AdamState, LrSchedule, lr_at, train_step

logger = logging.getLogger(__name__)


def _pattern_from(kind, window, dilation, block_size):
    return PatternSpec(kind, w=window, d=dilation, block=block_size)


class RippleMaskRegressor(BaseEstimator):
    """Transformer mask estimator with sparse self-attention.

    Parameters
    ----------
    n_blocks, n_heads, d_model, d_ff : int
        Architecture; the defaults are the full-size configuration.
    pattern : {"ripple", "band", "full", "blockwise"}
        Attention pattern.  For ``"ripple"`` the lower half of the stack uses
        band attention only.
    window, dilation, block_size : int
        Pattern parameters ``w``, ``d`` and block length.
    n_steps : int
        Number of optimizer steps in :meth:`fit`.
    batch_size : int
        Sequences per step; sequences are drawn from a reshuffled order each
        epoch.
    warmup_steps, lr_factor : int, float
        Warm-up learning-rate schedule.
    clip : float
        Gradient values are clamped to ``[-clip, clip]``.
    kernel : {"sparse", "dense"}
    random_state : int or None

    Attributes
    ----------
    params_ : ModelParams
    config_ : ModelConfig
    n_features_in_ : int
        Number of frequency bins seen in :meth:`fit`.
    loss_curve_ : list of float
        Mean training loss per step.
    """

    def __init__(self, n_blocks=4, n_heads=8, d_model=256, d_ff=1024, pattern="ripple",
                 window=12, dilation=24, block_size=50, n_steps=1000, batch_size=10,
                 warmup_steps=40000, lr_factor=1.0, clip=1.0, kernel="sparse",
                 random_state=None):
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.pattern = pattern
        self.window = window
        self.dilation = dilation
        self.block_size = block_size
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.lr_factor = lr_factor
        self.clip = clip
        self.kernel = kernel
        self.random_state = random_state

    def _make_config(self, n_bins):
        return ModelConfig(
            n_blocks=self.n_blocks, n_heads=self.n_heads, d_model=self.d_model,
            d_ff=self.d_ff, n_bins=n_bins,
            pattern=_pattern_from(self.pattern, self.window, self.dilation, self.block_size),
        )

    def fit(self, X, y):
        """Fit on magnitude sequences ``X`` and target masks ``y``.

        Parameters
        ----------
        X : list of array-like, each (n_frames_i, n_bins)
        y : list of array-like, same shapes as ``X``, values in [0, 1]

        Returns
        -------
        self : object
        """
        X, y = check_paired(X, y)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.config_ = self._make_config(X[0].shape[1])
        seed = np.random.SeedSequence(self.random_state)
        init_seed, order_seed = seed.spawn(2)
        self.params_ = init_params(self.config_, int(init_seed.generate_state(1)[0]))
        self.n_features_in_ = self.config_.n_bins
        self.loss_curve_ = []
        self._fit_steps(X, y, np.random.default_rng(order_seed), AdamState())
        return self

    def _fit_steps(self, X, y, rng, state):
        schedule = LrSchedule(self.d_model, self.warmup_steps, self.lr_factor)
        order = []
        for _ in range(self.n_steps):
            batch = []
            while len(batch) < self.batch_size:
                if not order:
                    order = list(rng.permutation(len(X)))
                i = order.pop()
                batch.append((X[i], y[i]))
            lr = lr_at(schedule, state.step + 1)
            loss = train_step(self.params_, batch, state, lr, self.clip, self.kernel)
            self.loss_curve_.append(loss)
        logger.debug("fit finished after %d steps, last loss %.5f", self.n_steps,
                     self.loss_curve_[-1] if self.loss_curve_ else float("nan"))

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs):
        """Wrap already trained parameters (e.g. a loaded checkpoint)."""
        cfg = params.config
        est = cls(n_blocks=cfg.n_blocks, n_heads=cfg.n_heads, d_model=cfg.d_model,
                  d_ff=cfg.d_ff, pattern=cfg.pattern.kind.value, window=cfg.pattern.w,
                  dilation=cfg.pattern.d, block_size=cfg.pattern.block, **kwargs)
        est.config_ = cfg
        est.params_ = params
        est.n_features_in_ = cfg.n_bins
        est.loss_curve_ = []
        return est

    def predict(self, X):
        """Estimated masks in (0, 1), one per input sequence.

        A single 2-D input returns a single 2-D array.
        """
        check_is_fitted(self, "params_")
        items, single = check_sequences(X, self.n_features_in_)
        masks = [forward(self.params_, x, kernel=self.kernel) for x in items]
        return masks[0] if single else masks

    def score(self, X, y):
        """Negative mean squared error over all frames and bins."""
        X, y = check_paired(X, y, self.n_features_in_)
        pred = self.predict(X)
        sq = sum(float(np.sum((p - t) ** 2)) for p, t in zip(pred, y))
        return -sq / sum(t.size for t in y)


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Waveforms -> magnitude spectrograms (stateless)."""

    def __init__(self, n_bins=257):
        self.n_bins = n_bins

    def fit(self, W, y=None):
        self.stft_config_ = StftConfig.for_bins(self.n_bins)
        return self

    def transform(self, W):
        check_is_fitted(self, "stft_config_")
        waves, single = check_waveforms(W)
        mags = [stft(w, self.stft_config_).magnitude for w in waves]
        return mags[0] if single else mags


class SpeechEnhancer(BaseEstimator):
    """Noisy waveform in, enhanced waveform out.

    ``fit`` takes noisy and clean waveforms, computes IRM or PSM targets
    and fits ``mask_estimator`` on the noisy magnitudes.
    """

    def __init__(self, mask_estimator=None, objective="irm", n_bins=257):
        self.mask_estimator = mask_estimator
        self.objective = objective
        self.n_bins = n_bins

    def _stft_config(self):
        return StftConfig.for_bins(self.n_bins)

    def fit(self, noisy, clean):
        noisy_w, _ = check_waveforms(noisy, name="noisy")
        clean_w, _ = check_waveforms(clean, name="clean")
        if len(noisy_w) != len(clean_w):
            raise ValueError("noisy and clean collections differ in length")
        cfg = self._stft_config()
        mags, targets = [], []
        for xw, sw in zip(noisy_w, clean_w):
            if len(xw) != len(sw):
                raise ValueError("each noisy/clean pair must have equal length")
            spec_x, spec_s = stft(xw, cfg), stft(sw, cfg)
            spec_d = stft(Waveform(xw.samples - sw.samples, xw.sample_rate), cfg)
            targets.append(compute_target(Objective(self.objective), spec_s, spec_d, spec_x).values)
            mags.append(spec_x.magnitude)
        base = self.mask_estimator if self.mask_estimator is not None else RippleMaskRegressor()
        self.mask_estimator_ = clone(base).fit(mags, targets)
        return self

    def predict(self, noisy):
        check_is_fitted(self, "mask_estimator_")
        waves, single = check_waveforms(noisy, name="noisy")
        cfg = self._stft_config()
        out = []
        for w in waves:
            spec = stft(w, cfg)
            mask = self.mask_estimator_.predict(spec.magnitude)
            out.append(istft(apply_mask(spec, mask)))
        return out[0] if single else out
