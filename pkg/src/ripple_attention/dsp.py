"""STFT analysis/synthesis, SNR-controlled mixing and 16-bit WAV I/O.

Frame ``l`` covers samples ``[l * hop, l * hop + win)``; the signal is
zero-padded at the tail only.  Synthesis is weighted overlap-add divided by
the summed squared window, so every sample (including the first and last
half-window) is reconstructed exactly.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np


class AudioFormatError(ValueError):
    """A WAV file is not 16-bit PCM mono at the expected sample rate."""


def sqrt_hann(win_length: int) -> np.ndarray:
    """Square-root Hann window sampled at half-integer points.

    ``sin(pi * (n + 0.5) / N)`` squares to a Hann curve whose copies shifted
    by ``N / 2`` sum to exactly one, and no weight is zero, so tail-only
    padding still allows the first sample to be recovered.
    """
    n = np.arange(win_length)
    return np.sin(np.pi * (n + 0.5) / win_length)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D (mono), got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains NaN or Inf samples")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def power(self) -> float:
        return float(np.mean(self.samples**2))


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    win_length: int = 512
    hop_length: int = 256
    window: np.ndarray = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.win_length < 2 or self.win_length % 2:
            raise ValueError(f"win_length must be even and >= 2, got {self.win_length}")
        if self.win_length > self.fft_size:
            raise ValueError("win_length must not exceed fft_size")
        if self.hop_length * 2 != self.win_length:
            raise ValueError("hop_length must be win_length / 2 (50% overlap)")
        window = sqrt_hann(self.win_length) if self.window is None else self.window
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (self.win_length,):
            raise ValueError("window length must equal win_length")
        window.setflags(write=False)
        object.__setattr__(self, "window", window)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @classmethod
    def for_bins(cls, n_bins: int) -> "StftConfig":
        """Config whose one-sided spectrum has ``n_bins`` bins (window = FFT size)."""
        fft_size = 2 * (n_bins - 1)
        return cls(fft_size=fft_size, win_length=fft_size, hop_length=fft_size // 2)

    def n_frames(self, n_samples: int) -> int:
        return 1 + -(-(n_samples - self.win_length) // self.hop_length)


@dataclass(frozen=True)
class Spectrogram:
    """Complex one-sided STFT, ``frames`` is ``L x K``."""

    frames: np.ndarray
    config: StftConfig
    origin_length: int
    sample_rate: int = 16000

    @property
    def shape(self):
        return self.frames.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def with_frames(self, frames) -> "Spectrogram":
        frames = np.asarray(frames)
        if frames.shape != self.frames.shape:
            raise ValueError(f"frame shape {frames.shape} != {self.frames.shape}")
        return Spectrogram(frames, self.config, self.origin_length, self.sample_rate)


def stft(w: Waveform, cfg: StftConfig = None) -> Spectrogram:
    cfg = cfg or StftConfig()
    if not isinstance(w, Waveform):
        w = Waveform(w)
    n = len(w)
    if n < cfg.win_length:
        raise ValueError(f"input too short: {n} samples < window of {cfg.win_length}")
    n_frames = cfg.n_frames(n)
    padded = np.zeros(cfg.win_length + (n_frames - 1) * cfg.hop_length)
    padded[:n] = w.samples
    idx = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)
    frames = np.fft.rfft(padded[idx] * cfg.window, n=cfg.fft_size, axis=1)
    return Spectrogram(frames, cfg, n, w.sample_rate)


def istft(spec: Spectrogram) -> Waveform:
    cfg = spec.config
    frames = np.asarray(spec.frames)
    n_frames = cfg.n_frames(spec.origin_length)
    if frames.ndim != 2 or frames.shape != (n_frames, cfg.n_bins):
        raise ValueError(
            f"spectrogram shape {frames.shape} does not match config "
            f"({n_frames} frames x {cfg.n_bins} bins)"
        )
    chunks = np.fft.irfft(frames, n=cfg.fft_size, axis=1)[:, : cfg.win_length]
    total = cfg.win_length + (n_frames - 1) * cfg.hop_length
    out = np.zeros(total)
    envelope = np.zeros(total)
    win_sq = cfg.window**2
    for l in range(n_frames):
        start = l * cfg.hop_length
        out[start : start + cfg.win_length] += chunks[l] * cfg.window
        envelope[start : start + cfg.win_length] += win_sq
    out /= envelope
    return Waveform(out[: spec.origin_length], spec.sample_rate)


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, offset: int = 0):
    """Scale a noise segment so that ``clean + noise`` has the requested SNR.

    Returns ``(noisy, scaled_noise)``.  The segment is
    ``noise[offset : offset + len(clean)]``.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    n = len(clean)
    if offset < 0 or offset + n > len(noise):
        raise ValueError("noise is shorter than the clean signal (after offset)")
    segment = noise.samples[offset : offset + n]
    p_clean = clean.power()
    p_noise = float(np.mean(segment**2))
    if p_clean == 0.0 or p_noise == 0.0:
        raise ValueError("zero power in clean signal or noise segment")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = Waveform(segment * gain, clean.sample_rate)
    noisy = Waveform(clean.samples + scaled.samples, clean.sample_rate)
    return noisy, scaled


def snr_db(reference: Waveform, estimate: Waveform) -> float:
    """SNR of ``estimate`` against ``reference`` in dB."""
    ref = np.asarray(getattr(reference, "samples", reference))
    est = np.asarray(getattr(estimate, "samples", estimate))
    err = np.sum((ref - est) ** 2)
    return float(10.0 * np.log10(np.sum(ref**2) / err))


def read_wav(path, sample_rate: int = 16000) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if fh.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV is not supported")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if sample_rate is not None and rate != sample_rate:
        raise AudioFormatError(f"{path}: expected {sample_rate} Hz, got {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono; samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
