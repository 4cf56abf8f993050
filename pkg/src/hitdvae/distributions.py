"""Diagonal Gaussians, complex-Gaussian likelihood and the divergences of the ELBO.

All reductions run over the last axis, so leading batch/time axes broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

LOG_VAR_MIN = -15.0
LOG_VAR_MAX = 15.0


def clamp_log_var(log_var: torch.Tensor) -> torch.Tensor:
    return torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)


@dataclass
class DiagGaussianParams:
    """Mean and log-variance of a diagonal Gaussian.

    The log-variance is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` on
    construction so that ``exp`` never under- or overflows downstream.
    """

    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise ValueError(
                f"mean {tuple(self.mean.shape)} and log_var {tuple(self.log_var.shape)} differ"
            )
        self.log_var = clamp_log_var(self.log_var)

    @property
    def var(self) -> torch.Tensor:
        return torch.exp(self.log_var)

    @classmethod
    def standard(cls, like: torch.Tensor) -> "DiagGaussianParams":
        zero = torch.zeros_like(like)
        return cls(zero, zero.clone())

    def detach(self) -> "DiagGaussianParams":
        return DiagGaussianParams(self.mean.detach(), self.log_var.detach())


def reparam_sample(params: DiagGaussianParams, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != params.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} does not match mean {tuple(params.mean.shape)}"
        )
    return params.mean + torch.exp(0.5 * params.log_var) * noise


def kl_diag_gaussian(q: DiagGaussianParams, p: DiagGaussianParams) -> torch.Tensor:
    """KL(q || p) summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    ratio = (torch.exp(q.log_var) + (q.mean - p.mean) ** 2) / torch.exp(p.log_var)
    return 0.5 * torch.sum(p.log_var - q.log_var + ratio - 1.0, dim=-1)


def kl_to_standard_normal(q: DiagGaussianParams) -> torch.Tensor:
    return kl_diag_gaussian(q, DiagGaussianParams.standard(q.mean))


def itakura_saito(x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """d_IS(x, v) = sum_f x/v - log(x/v) - 1, summed over the last axis."""
    if x.shape != v.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(v.shape)}")
    if bool((v <= 0).any()):
        raise ValueError("variance must be strictly positive")
    ratio = x / v
    return torch.sum(ratio - torch.log(ratio) - 1.0, dim=-1)


def complex_gaussian_nll(s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """-log N_c(s; 0, diag(v)) for circularly-symmetric zero-mean s."""
    power = s.real ** 2 + s.imag ** 2
    return torch.sum(torch.log(math.pi * v) + power / v, dim=-1)
