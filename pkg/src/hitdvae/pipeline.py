"""Analysis-resynthesis and generation on waveforms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .dsp import ComplexSpectrogram, StftConfig, Waveform, griffin_lim, istft, power_spectrogram, preprocess_waveform, stft
from .metrics import MetricReport, log_spectral_distance, rmse, si_sdr
from .model import DVAE


@dataclass
class Resynthesis:
    reference: Waveform
    estimate: Waveform
    ref_power: np.ndarray
    est_power: np.ndarray


def _model_dtype(model: DVAE):
    return next(model.parameters()).dtype


def resynthesize_waveform(
    model: DVAE,
    wav: Waveform,
    cfg: StftConfig,
    mode: str = "TF",
    generator: torch.Generator | None = None,
    preprocess: bool = True,
) -> Resynthesis:
    """Model magnitude sqrt(v_s) combined with the input phase, then ISTFT."""
    if preprocess:
        wav = preprocess_waveform(wav)
    spec = stft(wav, cfg)
    power = power_spectrogram(spec)
    s = torch.from_numpy(power.T[None]).to(_model_dtype(model))
    v_s = model.resynthesize(s, mode, generator)[0].T.to(torch.float64).numpy()
    phase = np.exp(1j * np.angle(spec.values))
    est = istft(ComplexSpectrogram(np.sqrt(v_s) * phase, cfg), sample_rate=wav.sample_rate)
    ref = Waveform(wav.samples[: len(est)], wav.sample_rate)
    return Resynthesis(ref, est, power, v_s)


def evaluate_resynthesis(
    model: DVAE,
    wavs: Sequence[Waveform],
    cfg: StftConfig,
    mode: str = "TF",
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> tuple[MetricReport, list[Resynthesis]]:
    """Score a corpus; the generator is reseeded per call so TF and GEN see the same latents."""
    generator = torch.Generator().manual_seed(seed)
    report = MetricReport()
    outputs = []
    for i, wav in enumerate(wavs):
        r = resynthesize_waveform(model, wav, cfg, mode, generator)
        name = names[i] if names is not None else f"utt{i:04d}"
        report.add(name, rmse(r.reference, r.estimate), si_sdr(r.reference, r.estimate),
                   log_spectral_distance(r.ref_power, r.est_power))
        outputs.append(r)
    return report, outputs


def generate_waveforms(
    model: DVAE,
    count: int,
    n_frames: int,
    cfg: StftConfig,
    seed: int = 0,
    gl_iters: int = 100,
    sample_rate: int = 16000,
) -> list[Waveform]:
    """Sample power spectrograms from the prior and invert them with Griffin-Lim."""
    generator = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(count):
        power = model.generate(n_frames, generator)[0].T.to(torch.float64).numpy()
        wav = griffin_lim(np.sqrt(power), cfg, gl_iters, sample_rate)
        peak = np.max(np.abs(wav.samples))
        out.append(Waveform(wav.samples / peak if peak > 0 else wav.samples, sample_rate))
    return out
