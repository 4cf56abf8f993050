"""WAV I/O, corpus manifests, a synthetic speech-like corpus and batching."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .dsp import EPS_POWER, StftConfig, Waveform, power_spectrogram, preprocess_waveform, segment, stft

SAMPLE_RATE = 16000
SPLITS = ("train", "valid", "test")


class AudioFormatError(ValueError):
    pass


def load_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read 16-bit PCM mono audio, scaled so that full scale maps to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if rate != expected_rate:
        raise AudioFormatError(f"{path}: expected {expected_rate} Hz, got {rate} Hz (resampling not supported)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, wav: Waveform) -> None:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clipped."""
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


# -- manifests -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    duration: float
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(f"{e.path}\t{e.duration!r}\t{e.split}\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3 or parts[2] not in SPLITS:
                    raise ValueError(f"{path}:{n}: malformed manifest line {line!r}")
                entries.append(ManifestEntry(parts[0], float(parts[1]), parts[2]))
        return cls(entries)


def _wav_duration(path: Path) -> float:
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()


def build_manifest(root_dir, split_spec=(1.0, 0.0, 0.0), seed: int = 0) -> Manifest:
    """Index ``*.wav`` files under ``root_dir`` in lexicographic order.

    ``split_spec`` is either fractions ``(train, valid, test)``, assigned over
    a seeded permutation, or a mapping from relative path to split name.
    """
    root = Path(root_dir)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() == ".wav")
    if not files:
        raise ValueError(f"no .wav files under {root}")
    rel = [str(p.relative_to(root)) for p in files]
    if isinstance(split_spec, dict):
        unknown = set(split_spec.values()) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        splits = [split_spec.get(r) for r in rel]
        keep = [i for i, s in enumerate(splits) if s is not None]
    else:
        fractions = np.asarray(split_spec, dtype=np.float64)
        if fractions.shape != (3,) or (fractions < 0).any() or fractions.sum() <= 0:
            raise ValueError("split fractions must be three non-negative numbers")
        fractions = fractions / fractions.sum()
        n = len(files)
        counts = np.floor(fractions * n + 1e-9).astype(int)
        counts[0] += n - counts.sum()
        order = np.random.default_rng(seed).permutation(n)
        splits = [None] * n
        labels = np.repeat(np.arange(3), counts)
        for pos, idx in enumerate(order):
            splits[idx] = SPLITS[labels[pos]]
        keep = range(n)
    return Manifest([ManifestEntry(str(files[i]), _wav_duration(files[i]), splits[i]) for i in keep])


# -- synthetic corpus ----------------------------------------------------------


def _smooth_curve(rng, n: int, n_knots: int, low: float, high: float) -> np.ndarray:
    knots = rng.uniform(low, high, size=n_knots)
    return np.interp(np.linspace(0, n_knots - 1, n), np.arange(n_knots), knots)


def synth_utterance(rng: np.random.Generator, duration: float, sample_rate: int = SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sample_rate))
    f0_base = rng.uniform(100.0, 300.0)
    drift = _smooth_curve(rng, n, 4, 0.9, 1.1)
    f0 = f0_base * drift
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    envelope = _smooth_curve(rng, n, max(3, int(duration * 6)), 0.0, 1.0) ** 2
    n_harm = int(rng.integers(3, 6))
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        x += rng.uniform(0.3, 1.0) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x *= envelope
    x /= np.max(np.abs(x))
    x += 10 ** (-30 / 20) * rng.standard_normal(n) / np.sqrt(2)
    return Waveform(x / np.max(np.abs(x)), sample_rate)


def synth_corpus(n: int, duration: float = 2.0, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> list[Waveform]:
    """Harmonic tones with slow pitch drift and amplitude envelopes plus -30 dB noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [synth_utterance(rng, duration, sample_rate) for _ in range(n)]


# -- batching ------------------------------------------------------------------


def utterance_power(wav: Waveform, cfg: StftConfig, threshold_db: float = 30.0) -> np.ndarray:
    return power_spectrogram(stft(preprocess_waveform(wav, threshold_db), cfg))


def prepare_segments(
    corpus: Iterable[Waveform | str | Path] | Manifest,
    cfg: StftConfig,
    seg_len: int,
    split: str | None = "train",
) -> list[np.ndarray]:
    """Preprocess every utterance and cut it into F x seg_len power segments."""
    if isinstance(corpus, Manifest):
        items = [e.path for e in (corpus.split(split) if split else corpus.entries)]
    else:
        items = list(corpus)
    segments = []
    for item in items:
        wav = item if isinstance(item, Waveform) else load_wav(item)
        if len(wav) < cfg.window_length:
            continue
        power = utterance_power(wav, cfg)
        segments.extend(segment(power, seg_len))
    return segments


def iter_batches(segments: Sequence[np.ndarray], batch_size: int, seed) -> Iterator[np.ndarray]:
    """One seeded shuffle of ``segments`` cut into batches; ``seed`` may be a sequence."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(segments))
    for i in range(0, len(order), batch_size):
        yield np.stack([segments[j] for j in order[i : i + batch_size]])


def batch_iter(corpus, cfg: StftConfig, seg_len: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Shuffled B x F x T batches of power segments; the final batch may be short."""
    yield from iter_batches(prepare_segments(corpus, cfg, seg_len), batch_size, seed)
