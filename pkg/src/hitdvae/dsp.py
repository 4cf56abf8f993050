"""Waveform <-> spectrogram pipeline.

Silence trimming, peak normalization, sine-window STFT/ISTFT without center
padding, power spectrograms, fixed-length segmentation and Griffin-Lim phase
reconstruction. Spectrogram arrays are laid out frequency-major (F x T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_POWER = 1e-10


class EmptySignalError(ValueError):
    """Raised when trimming leaves nothing (all-silent input)."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    window: str = "sine"

    def __post_init__(self):
        if self.window_length <= 0 or self.hop <= 0:
            raise ValueError("window_length and hop must be positive")
        if self.window_length % self.hop:
            raise ValueError(
                f"hop ({self.hop}) must divide window_length ({self.window_length})"
            )
        if self.window != "sine":
            raise ValueError(f"unsupported window {self.window!r}; only 'sine' is available")

    @property
    def n_freq(self) -> int:
        return self.window_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            return 0
        return 1 + (n_samples - self.window_length) // self.hop

    def n_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.window_length


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != self.config.n_freq:
            raise ValueError(
                f"expected {self.config.n_freq} frequency bins, got shape {self.values.shape}"
            )


def sine_window(n: int) -> np.ndarray:
    return np.sin(np.pi * (np.arange(n) + 0.5) / n)


def overlap_add_norm(cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Sum of squared synthesis windows at every output sample."""
    w2 = sine_window(cfg.window_length) ** 2
    out = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        out[t * cfg.hop : t * cfg.hop + cfg.window_length] += w2
    return out


def preprocess_waveform(wav: Waveform, threshold_db: float = 30.0, frame_ms: float = 32.0) -> Waveform:
    """Crop leading/trailing silence and normalize the peak to 1.

    Frames are non-overlapping blocks of ``frame_ms``; a frame is silent when
    its mean power is more than ``threshold_db`` below the loudest frame.
    """
    x = wav.samples
    if x.size == 0:
        raise EmptySignalError("empty waveform")
    flen = max(1, int(round(frame_ms * 1e-3 * wav.sample_rate)))
    n_frames = -(-x.size // flen)
    padded = np.zeros(n_frames * flen)
    padded[: x.size] = x ** 2
    counts = np.full(n_frames, flen, dtype=np.float64)
    counts[-1] = x.size - (n_frames - 1) * flen
    power = padded.reshape(n_frames, flen).sum(axis=1) / counts
    peak = power.max()
    if peak <= 0.0:
        raise EmptySignalError("waveform is entirely silent")
    active = np.flatnonzero(power >= peak * 10.0 ** (-threshold_db / 10.0))
    start = active[0] * flen
    stop = min(x.size, (active[-1] + 1) * flen)
    y = x[start:stop]
    return Waveform(y / np.max(np.abs(y)), wav.sample_rate)


def stft(wav: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = wav.samples if isinstance(wav, Waveform) else np.asarray(wav, dtype=np.float64)
    n_frames = cfg.n_frames(x.shape[0])
    if n_frames < 1:
        raise ValueError(
            f"signal of {x.shape[0]} samples is shorter than one window ({cfg.window_length})"
        )
    idx = np.arange(cfg.window_length)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * sine_window(cfg.window_length)
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T, cfg)


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None, sample_rate: int = 16000) -> Waveform:
    """Least-squares overlap-add inverse of :func:`stft`."""
    if cfg is not None and cfg != spec.config:
        raise ValueError(f"spectrogram was computed with {spec.config}, not {cfg}")
    cfg = spec.config
    n_frames = spec.values.shape[1]
    win = sine_window(cfg.window_length)
    frames = np.fft.irfft(spec.values.T, n=cfg.window_length, axis=1) * win
    out = np.zeros(cfg.n_samples(n_frames))
    for t in range(n_frames):
        out[t * cfg.hop : t * cfg.hop + cfg.window_length] += frames[t]
    # sine window is strictly positive, so the norm never vanishes
    return Waveform(out / overlap_add_norm(cfg, n_frames), sample_rate)


def power_spectrogram(spec: ComplexSpectrogram | np.ndarray) -> np.ndarray:
    values = spec.values if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    return np.maximum(values.real ** 2 + values.imag ** 2, EPS_POWER)


def segment(power: np.ndarray, seg_len: int) -> list[np.ndarray]:
    """Split an F x T array into consecutive non-overlapping F x seg_len blocks."""
    if seg_len < 1:
        raise ValueError("segment length must be >= 1")
    n = power.shape[1] // seg_len
    return [power[:, i * seg_len : (i + 1) * seg_len] for i in range(n)]


def spectral_convergence(mag: np.ndarray, wav: Waveform | np.ndarray, cfg: StftConfig) -> float:
    norm = np.linalg.norm(mag)
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(np.abs(stft(wav, cfg).values) - mag) / norm)


def griffin_lim(
    mag: np.ndarray,
    cfg: StftConfig = StftConfig(),
    iters: int = 100,
    sample_rate: int = 16000,
    return_history: bool = False,
):
    """Recover a waveform whose STFT magnitude approximates ``mag``.

    Starts from zero phase. With ``return_history`` the spectral convergence
    after each iteration is returned alongside the waveform.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mag = np.asarray(mag, dtype=np.float64)
    norm = np.linalg.norm(mag)
    spec = mag.astype(np.complex128)
    history = []
    for _ in range(iters):
        x = istft(ComplexSpectrogram(spec, cfg), sample_rate=sample_rate)
        rebuilt = stft(x, cfg).values
        if return_history:
            history.append(float(np.linalg.norm(np.abs(rebuilt) - mag) / norm) if norm else 0.0)
        spec = mag * np.exp(1j * np.angle(rebuilt))
    x = istft(ComplexSpectrogram(spec, cfg), sample_rate=sample_rate)
    if return_history:
        return x, history
    return x
