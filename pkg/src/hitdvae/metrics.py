"""RMSE, SI-SDR and log-spectral distance, plus corpus-level reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import Waveform


def _aligned(ref, est):
    r = ref.samples if isinstance(ref, Waveform) else np.asarray(ref, dtype=np.float64)
    e = est.samples if isinstance(est, Waveform) else np.asarray(est, dtype=np.float64)
    if isinstance(ref, Waveform) and isinstance(est, Waveform) and ref.sample_rate != est.sample_rate:
        raise ValueError(f"sample rates differ: {ref.sample_rate} vs {est.sample_rate}")
    n = min(r.shape[0], e.shape[0])
    if n == 0:
        raise ValueError("no overlapping samples")
    return r[:n], e[:n]


def rmse(ref, est) -> float:
    r, e = _aligned(ref, est)
    return float(np.sqrt(np.mean((r - e) ** 2)))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB; +inf for a perfect (scaled) match, -inf when orthogonal."""
    r, e = _aligned(ref, est)
    ref_energy = np.dot(r, r)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    alpha = np.dot(e, r) / ref_energy
    target = alpha * r
    residual = target - e
    num = np.dot(target, target)
    den = np.dot(residual, residual)
    if den == 0.0:
        return math.inf
    if num == 0.0:
        return -math.inf
    return float(10.0 * np.log10(num / den))


def log_spectral_distance(ref_power: np.ndarray, est_power: np.ndarray) -> float:
    """Mean over frames of the RMS (over bins) dB difference; arrays are F x T."""
    ref_power = np.asarray(ref_power, dtype=np.float64)
    est_power = np.asarray(est_power, dtype=np.float64)
    if ref_power.shape != est_power.shape:
        raise ValueError(f"shape mismatch: {ref_power.shape} vs {est_power.shape}")
    diff = 10.0 * np.log10(ref_power / est_power)
    return float(np.mean(np.sqrt(np.mean(diff ** 2, axis=0))))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    rmse: list[float] = field(default_factory=list)
    si_sdr: list[float] = field(default_factory=list)
    lsd: list[float] = field(default_factory=list)

    def add(self, name: str, rmse_value: float, si_sdr_value: float, lsd_value: float = math.nan):
        self.names.append(name)
        self.rmse.append(rmse_value)
        self.si_sdr.append(si_sdr_value)
        self.lsd.append(lsd_value)

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k))) if self.names else math.nan
                for k in ("rmse", "si_sdr", "lsd")}

    def to_tsv(self) -> str:
        lines = ["name\trmse\tsi_sdr\tlsd"]
        for row in zip(self.names, self.rmse, self.si_sdr, self.lsd):
            lines.append("\t".join([row[0], *(repr(float(v)) for v in row[1:])]))
        m = self.mean()
        lines.append("\t".join(["MEAN", *(repr(m[k]) for k in ("rmse", "si_sdr", "lsd"))]))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        """Machine-readable summary: ``n``, ``mean`` and ``per_utterance`` keys."""
        return {
            "n": len(self.names),
            "mean": self.mean(),
            "per_utterance": [
                {"name": n, "rmse": r, "si_sdr": s, "lsd": l}
                for n, r, s, l in zip(self.names, self.rmse, self.si_sdr, self.lsd)
            ],
        }

    def write(self, tsv_path, json_path) -> None:
        with open(tsv_path, "w") as fh:
            fh.write(self.to_tsv())
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, default=str)
