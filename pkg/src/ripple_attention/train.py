"""Desk-scale training: synthetic mixtures, warm-up schedule, Adam, value clipping."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dsp import StftConfig, Waveform, mix_at_snr, stft
from .model import ModelConfig, ModelParams, backward, forward, init_params, save
from .targets import Objective, compute_target

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Raised on NaN gradients or losses."""


@dataclass(frozen=True)
class LrSchedule:
    d_model: int = 256
    wup_steps: int = 40000
    factor: float = 1.0


def lr_at(schedule: LrSchedule, n: int) -> float:
    """``factor * d_model**-0.5 * min(n**-0.5, n * wup_steps**-1.5)``."""
    if n < 1:
        raise ValueError(f"learning-rate step must be >= 1, got {n}")
    return schedule.factor * schedule.d_model**-0.5 * min(n**-0.5, n * schedule.wup_steps**-1.5)


def clip_gradients(grads: dict, c: float = 1.0) -> dict:
    """Clamp every gradient value to ``[-c, c]``."""
    if c <= 0:
        raise ValueError("clip bound must be positive")
    clipped = {}
    for name, g in grads.items():
        if np.isnan(g).any():
            raise TrainingDivergedError(f"NaN gradient in {name}")
        clipped[name] = np.clip(g, -c, c)
    return clipped


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def make_synthetic_pair(seed, duration: float = 0.5, snr_db: float = 0.0,
                        sample_rate: int = 16000):
    """Harmonic "speech" and spectrally tilted noise, scaled to ``snr_db``.

    The clean signal is 3-8 sinusoids between 150 Hz and 3.5 kHz, each with
    a slow (2-8 Hz) amplitude envelope.  The noise is white noise shaped by a
    random ``(1 + f / 1 kHz) ** -alpha`` spectral tilt.  Returns
    ``(clean, noise)`` with the noise already at the requested SNR.
    """
    if duration < 0.2:
        raise ValueError("duration must be at least 0.2 s")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    clean = np.zeros(n)
    for _ in range(rng.integers(3, 9)):
        freq = rng.uniform(150.0, 3500.0)
        rate = rng.uniform(2.0, 8.0)
        envelope = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        clean += rng.uniform(0.2, 1.0) * envelope * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    clean *= 0.3 / np.max(np.abs(clean))

    white = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    noise = np.fft.irfft(white * (1.0 + freqs / 1000.0) ** -rng.uniform(0.0, 1.5), n=n)

    clean_w = Waveform(clean, sample_rate)
    _, scaled = mix_at_snr(clean_w, Waveform(noise, sample_rate), snr_db)
    return clean_w, scaled


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective.IRM
    snr_range: tuple = (-10, 20)
    utterances_per_step: int = 10
    steps: int = 500
    seed: int = 0
    warmup_steps: int = 40000
    lr_factor: float = 1.0
    clip: float = 1.0
    duration: float = 0.5
    sample_rate: int = 16000
    kernel: str = "sparse"

    def __post_init__(self):
        object.__setattr__(self, "objective", Objective(self.objective))
        lo, hi = self.snr_range
        if lo > hi:
            raise ValueError("snr_range must satisfy lo <= hi")
        if self.utterances_per_step < 1:
            raise ValueError("utterances_per_step must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key=value`` lines; ``snr_range`` is written ``lo,hi``."""
        kwargs = {}
        types = {f: type(getattr(cls(), f)) for f in cls.__dataclass_fields__}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            if key == "snr_range":
                kwargs[key] = tuple(int(s) for s in value.split(","))
            elif key == "objective":
                kwargs[key] = Objective(value.lower())
            else:
                kwargs[key] = types[key](value)
        return cls(**kwargs)


def make_example(seed, cfg: TrainConfig, stft_cfg: StftConfig, snr_db: float):
    """One ``(noisy magnitude, target mask)`` pair."""
    clean, noise = make_synthetic_pair(seed, cfg.duration, snr_db, cfg.sample_rate)
    noisy = Waveform(clean.samples + noise.samples, cfg.sample_rate)
    spec_clean, spec_noise, spec_noisy = (stft(w, stft_cfg) for w in (clean, noise, noisy))
    target = compute_target(cfg.objective, spec_clean, spec_noise, spec_noisy)
    return spec_noisy.magnitude, target.values


def train_step(params: ModelParams, batch, state: AdamState, lr: float,
               clip: float = 1.0, kernel: str = "sparse") -> float:
    """Average per-utterance gradients over ``batch``, clip, and take one Adam step."""
    total = {name: np.zeros_like(p) for name, p in params.items()}
    losses = []
    for magnitude, target in batch:
        _, cache = forward(params, magnitude, kernel=kernel, return_cache=True)
        loss, grads = backward(params, cache, target)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss}")
        losses.append(loss)
        for name in total:
            total[name] += grads[name]
    grads = {name: g / len(batch) for name, g in total.items()}
    adam_step(params, clip_gradients(grads, clip), state, lr)
    return float(np.mean(losses))


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, log_path=None,
               checkpoint_path=None, params: ModelParams = None):
    """Train on freshly generated synthetic mixtures.

    Returns ``(history, params)`` where ``history`` is a list of
    ``(step, lr, loss)`` tuples.  ``log_path`` receives the same rows as CSV.
    """
    params = init_params(model_cfg, train_cfg.seed) if params is None else params
    stft_cfg = StftConfig.for_bins(model_cfg.n_bins)
    schedule = LrSchedule(model_cfg.d_model, train_cfg.warmup_steps, train_cfg.lr_factor)
    state = AdamState()
    lo, hi = train_cfg.snr_range
    seeds = np.random.SeedSequence(train_cfg.seed)
    history = []

    for step in range(1, train_cfg.steps + 1):
        step_seq = seeds.spawn(1)[0]
        rng = np.random.default_rng(step_seq)
        batch = [
            make_example(child, train_cfg, stft_cfg, float(rng.integers(lo, hi + 1)))
            for child in step_seq.spawn(train_cfg.utterances_per_step)
        ]
        lr = lr_at(schedule, step)
        loss = train_step(params, batch, state, lr, train_cfg.clip, train_cfg.kernel)
        history.append((step, lr, loss))
        if step % 50 == 0 or step == 1:
            logger.info("step %d lr %.3g loss %.5f", step, lr, loss)

    if log_path is not None:
        write_loss_csv(log_path, history)
    if checkpoint_path is not None:
        save(params, checkpoint_path)
    return history, params


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            writer.writerow([step, repr(lr), repr(loss)])
