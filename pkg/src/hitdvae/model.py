"""HiT-DVAE / LigHT-DVAE and their query-inversion ablations.

Tensors are laid out ``(batch, time, feature)``; power spectrograms enter as
``(B, T, F)``. Networks see log-power features, and every variance is
produced as a clamped log-variance.

Dependency structure per frame t (1-based):

* ``q(w | s_1:T)``            GRU over all frames, last hidden state.
* ``q(z_t | s_1:T, w)``       unmasked Transformer encoder.
* ``p(z_t | s_1:t-1, z_1:t-1, w)``   decoder pass A: queries from the shifted
  z stream (w kept in every row), keys/values from the shifted s stream.
* ``p(s_t | s_1:t-1, z_1:t, w)``     decoder pass B: queries from the unshifted
  z stream, keys/values from the shifted s stream.

LigHT runs both passes through one decoder stack; HiT owns two. The Inv-s
ablations feed pass B the other way round (queries from s, keys/values from
z); Inv-s-NR additionally drops pass B's residual connections.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .distributions import DiagGaussianParams, clamp_log_var, reparam_sample
from .dsp import EPS_POWER
from .nn import DecoderStack, EncoderStack, LayerConfig, build_causal_mask, positional_encoding, shift_right

VARIANTS = ("HiT", "LigHT", "InvS", "InvSNR")
BASES = ("HiT", "LigHT")


@dataclass(frozen=True)
class ModelConfig:
    F: int = 513
    d_model: int = 256
    n_layers: int = 4
    d_ff: int = 1024
    n_heads: int = 1
    L_z: int = 16
    L_w: int = 32
    variant: str = "LigHT"
    base: str = "LigHT"
    rnn_hidden: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}, got {self.base!r}")
        if self.variant in BASES and self.base != self.variant:
            object.__setattr__(self, "base", self.variant)
        for name in ("F", "d_model", "n_layers", "d_ff", "n_heads", "L_z", "L_w", "rnn_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % 2:
            raise ValueError("d_model must be even (sinusoidal positional encoding)")
        LayerConfig(self.d_model, self.n_heads, self.d_ff)

    @property
    def shared_decoder(self) -> bool:
        return self.base == "LigHT"

    @property
    def inverted(self) -> bool:
        return self.variant in ("InvS", "InvSNR")

    @property
    def obs_residual(self) -> bool:
        return self.variant != "InvSNR"

    @property
    def name(self) -> str:
        if self.variant in BASES:
            return f"{self.variant}-DVAE"
        suffix = "Inv-s" if self.variant == "InvS" else "Inv-s-NR"
        return f"{self.base}-DVAE-{suffix}"

    def layer_config(self) -> LayerConfig:
        return LayerConfig(self.d_model, self.n_heads, self.d_ff, True)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    q_w: DiagGaussianParams
    w_sample: torch.Tensor
    q_z: DiagGaussianParams
    z_sample: torch.Tensor
    p_z: DiagGaussianParams
    v_s: torch.Tensor


def power_features(s_power: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(s_power, min=EPS_POWER))


def _split_gaussian(h: torch.Tensor) -> DiagGaussianParams:
    mean, log_var = h.chunk(2, dim=-1)
    return DiagGaussianParams(mean, log_var)


class DVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        lc = cfg.layer_config()
        # inference: w
        self.w_rnn = nn.GRU(cfg.F, cfg.rnn_hidden, batch_first=True)
        self.w_head = nn.Linear(cfg.rnn_hidden, 2 * cfg.L_w)
        # inference: z
        self.enc_embed = nn.Linear(cfg.F + cfg.L_w, cfg.d_model)
        self.encoder = EncoderStack(lc, cfg.n_layers)
        self.enc_head = nn.Linear(cfg.d_model, 2 * cfg.L_z)
        # generative
        self.dec_embed = nn.Linear(cfg.L_z + cfg.L_w, cfg.d_model)
        self.s_embed = nn.Linear(cfg.F, cfg.d_model)
        self.dec_prior = DecoderStack(lc, cfg.n_layers)
        self.dec_obs = self.dec_prior if cfg.shared_decoder else DecoderStack(lc, cfg.n_layers)
        self.prior_head = nn.Linear(cfg.d_model, 2 * cfg.L_z)
        self.obs_head = nn.Linear(cfg.d_model, cfg.F)
        self._pe_cache: dict = {}

    # -- helpers -------------------------------------------------------------

    def _pe(self, T: int, like: torch.Tensor) -> torch.Tensor:
        key = (T, like.dtype)
        if key not in self._pe_cache:
            self._pe_cache[key] = positional_encoding(T, self.cfg.d_model, like.dtype)
        return self._pe_cache[key]

    def _with_w(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return torch.cat([x, w[:, None, :].expand(-1, x.shape[1], -1)], dim=-1)

    def _embed(self, layer: nn.Linear, x: torch.Tensor) -> torch.Tensor:
        h = layer(x)
        return h + self._pe(h.shape[1], h)

    def _s_stream(self, s_feedback: torch.Tensor) -> torch.Tensor:
        """Embedded s_{1:t-1} aligned on frame t (zero start frame)."""
        return self._embed(self.s_embed, shift_right(power_features(s_feedback)))

    # -- inference -----------------------------------------------------------

    def encode_w(self, s_power: torch.Tensor) -> DiagGaussianParams:
        _, h_last = self.w_rnn(power_features(s_power))
        return _split_gaussian(self.w_head(h_last[-1]))

    def encode_z(self, s_power: torch.Tensor, w: torch.Tensor) -> DiagGaussianParams:
        x = self._embed(self.enc_embed, self._with_w(power_features(s_power), w))
        return _split_gaussian(self.enc_head(self.encoder(x)))

    # -- generative ----------------------------------------------------------

    def decode_prior(self, z, w, s_feedback) -> DiagGaussianParams:
        T = z.shape[1]
        mask = build_causal_mask(T)
        query = self._embed(self.dec_embed, self._with_w(shift_right(z), w))
        h = self.dec_prior(query, self._s_stream(s_feedback), mask, mask, residual=True)
        return _split_gaussian(self.prior_head(h))

    def decode_obs(self, z, w, s_feedback) -> torch.Tensor:
        T = z.shape[1]
        mask = build_causal_mask(T)
        z_stream = self._embed(self.dec_embed, self._with_w(z, w))
        s_stream = self._s_stream(s_feedback)
        if self.cfg.inverted:
            query, memory = s_stream, z_stream
        else:
            query, memory = z_stream, s_stream
        h = self.dec_obs(query, memory, mask, mask, residual=self.cfg.obs_residual)
        return torch.exp(clamp_log_var(self.obs_head(h)))

    def decode(self, z, w, s_feedback):
        return self.decode_prior(z, w, s_feedback), self.decode_obs(z, w, s_feedback)

    # -- full passes ---------------------------------------------------------

    def _noise(self, shape, like, generator):
        return torch.randn(shape, generator=generator, dtype=like.dtype, device=like.device)

    def infer(self, s_power: torch.Tensor, generator: torch.Generator | None = None):
        """Sample w then z_1:T from the inference model."""
        q_w = self.encode_w(s_power)
        w = reparam_sample(q_w, self._noise(q_w.mean.shape, q_w.mean, generator))
        q_z = self.encode_z(s_power, w)
        z = reparam_sample(q_z, self._noise(q_z.mean.shape, q_z.mean, generator))
        return q_w, w, q_z, z

    def forward_tf(self, s_power: torch.Tensor, generator: torch.Generator | None = None) -> ForwardOutput:
        q_w, w, q_z, z = self.infer(s_power, generator)
        p_z, v_s = self.decode(z, w, s_power)
        return ForwardOutput(q_w, w, q_z, z, p_z, v_s)

    forward = forward_tf

    @torch.no_grad()
    def decode_obs_generative(self, z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        """Run pass B frame by frame, feeding back its own expected power."""
        B, T, _ = z.shape
        s_buf = torch.ones(B, T, self.cfg.F, dtype=z.dtype, device=z.device)
        for t in range(T):
            s_buf[:, t] = self.decode_obs(z, w, s_buf)[:, t]
        return s_buf

    @torch.no_grad()
    def resynthesize(self, s_power: torch.Tensor, mode: str = "TF", generator=None) -> torch.Tensor:
        mode = mode.upper()
        if mode not in ("TF", "GEN"):
            raise ValueError(f"mode must be TF or GEN, got {mode!r}")
        _, w, _, z = self.infer(s_power, generator)
        if mode == "TF":
            return self.decode_obs(z, w, s_power)
        return self.decode_obs_generative(z, w)

    @torch.no_grad()
    def generate(self, T: int, generator=None, w: torch.Tensor | None = None, batch: int = 1) -> torch.Tensor:
        """Ancestral sampling of (B, T, F) expected power spectrograms."""
        if T < 1:
            raise ValueError("T must be >= 1")
        ref = self.obs_head.weight
        if w is None:
            w = torch.randn(batch, self.cfg.L_w, generator=generator, dtype=ref.dtype)
        B = w.shape[0]
        z_buf = torch.zeros(B, T, self.cfg.L_z, dtype=ref.dtype)
        s_buf = torch.ones(B, T, self.cfg.F, dtype=ref.dtype)
        for t in range(T):
            p_z = self.decode_prior(z_buf, w, s_buf)
            eps = torch.randn(B, self.cfg.L_z, generator=generator, dtype=ref.dtype)
            z_buf[:, t] = reparam_sample(
                DiagGaussianParams(p_z.mean[:, t], p_z.log_var[:, t]), eps
            )
            s_buf[:, t] = self.decode_obs(z_buf, w, s_buf)[:, t]
        return s_buf


_GROUPS = {
    "w_encoder": ("w_rnn", "w_head"),
    "z_encoder": ("enc_embed", "encoder", "enc_head"),
    "decoder_inputs": ("dec_embed", "s_embed"),
    "decoder_prior": ("dec_prior",),
    "decoder_obs": ("dec_obs",),
    "heads": ("prior_head", "obs_head"),
}


def count_params(model: nn.Module) -> int:
    """Scalar parameter count; tensors shared between submodules count once."""
    return sum(p.numel() for p in model.parameters())


def param_breakdown(model: DVAE) -> dict[str, int]:
    seen: set[int] = set()
    out = {}
    for group, names in _GROUPS.items():
        n = 0
        for name in names:
            for p in getattr(model, name).parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    n += p.numel()
        out[group] = n
    out["total"] = sum(out.values())
    return out
