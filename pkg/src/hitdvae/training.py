"""Negative-ELBO loss, AdamW, learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import iter_batches
from .distributions import itakura_saito, kl_diag_gaussian, kl_to_standard_normal
from .model import DVAE, ForwardOutput, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hitdvae-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("iteration", "lr", "total", "recon_is", "kl_z", "kl_w", "wall_time")


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"non-finite {term} ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.term = term
        self.value = value


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon_is: torch.Tensor
    kl_z: torch.Tensor
    kl_w: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("total", "recon_is", "kl_z", "kl_w")}


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-9
    weight_decay: float = 1e-5
    lr_max: float = 5e-5
    lr_min: float = 1e-8
    warmup_iters: int = 5000
    cosine_iters: int = 20000

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.warmup_iters < 0 or self.cosine_iters < 0:
            raise ValueError("iteration counts must be non-negative")


def elbo_loss(out: ForwardOutput, s_power: torch.Tensor, beta_w: float = 1e-2, beta_z: float = 1e-2) -> LossBreakdown:
    """Negative ELBO: summed over time and frequency, averaged over the batch."""
    recon = itakura_saito(s_power, out.v_s).sum(dim=-1).mean()
    kl_z = kl_diag_gaussian(out.q_z, out.p_z).sum(dim=-1).mean()
    kl_w = kl_to_standard_normal(out.q_w).mean()
    total = recon + beta_z * kl_z + beta_w * kl_w
    return LossBreakdown(total, recon, kl_z, kl_w)


def lr_at(iteration: int, cfg: OptimizerConfig) -> float:
    """Linear warmup from zero, then cosine annealing down to ``lr_min``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration <= cfg.warmup_iters:
        if cfg.warmup_iters == 0:
            return cfg.lr_max
        return cfg.lr_max * iteration / cfg.warmup_iters
    k = iteration - cfg.warmup_iters
    if k <= cfg.cosine_iters:
        return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * k / cfg.cosine_iters))
    return cfg.lr_min


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamWState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: AdamWState,
    lr: float,
    cfg: OptimizerConfig,
) -> AdamWState:
    """One in-place AdamW update with bias correction and decoupled decay."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1 - cfg.beta1 ** state.step
    bc2 = 1 - cfg.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# -- checkpoints ---------------------------------------------------------------


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64) -> DVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DVAE(cfg)
    return model.to(dtype)


def save_checkpoint(path, model: DVAE, *, state: AdamWState | None = None, generator=None,
                    meta: dict | None = None) -> None:
    """Write an ``.npz`` checkpoint (layout documented in the README)."""
    arrays = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__version__": np.array(CHECKPOINT_VERSION),
        "model_config": np.array(json.dumps(model.cfg.to_dict(), sort_keys=True)),
        "meta": np.array(json.dumps(meta or {}, sort_keys=True)),
    }
    names = []
    for name, p in model.named_parameters():
        names.append(name)
        arrays[f"param/{name}"] = p.detach().to(torch.float64).cpu().numpy()
    if state is not None and state.exp_avg:
        arrays["adam/step"] = np.array(state.step)
        for name, m, v in zip(names, state.exp_avg, state.exp_avg_sq):
            arrays[f"adam/m/{name}"] = m.to(torch.float64).cpu().numpy()
            arrays[f"adam/v/{name}"] = v.to(torch.float64).cpu().numpy()
    if generator is not None:
        arrays["rng/torch"] = generator.get_state().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    model: DVAE
    state: AdamWState | None
    rng_state: torch.Tensor | None
    meta: dict


def load_checkpoint(path, dtype=torch.float64) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        version = int(data["__version__"])
        if version > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
        cfg = ModelConfig(**json.loads(str(data["model_config"])))
        meta = json.loads(str(data["meta"]))
        model = DVAE(cfg).to(dtype)
        names = [n for n, _ in model.named_parameters()]
        with torch.no_grad():
            for name, p in model.named_parameters():
                key = f"param/{name}"
                if key not in data:
                    raise ValueError(f"checkpoint is missing parameter {name}")
                p.copy_(torch.from_numpy(data[key]))
        state = None
        if "adam/step" in data:
            state = AdamWState(
                int(data["adam/step"]),
                [torch.from_numpy(data[f"adam/m/{n}"]).to(dtype) for n in names],
                [torch.from_numpy(data[f"adam/v/{n}"]).to(dtype) for n in names],
            )
        rng = torch.from_numpy(data["rng/torch"].copy()) if "rng/torch" in data else None
    return Checkpoint(model, state, rng, meta)


# -- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    iterations: int = 25000
    batch_size: int = 32
    beta_w: float = 1e-2
    beta_z: float = 1e-2
    clip_norm: float = 5.0
    checkpoint_every: int = 1000
    dtype: str = "float64"


def _dtype(name: str):
    try:
        return {"float64": torch.float64, "float32": torch.float32}[name]
    except KeyError:
        raise ValueError(f"dtype must be float64 or float32, got {name!r}") from None


def _check_finite(it: int, loss: LossBreakdown):
    for name, value in loss.as_floats().items():
        if not math.isfinite(value):
            raise NumericalError(it, name, value)


@dataclass
class TrainResult:
    model: DVAE
    state: AdamWState
    history: list[dict]
    generator: torch.Generator


def train(
    segments: Sequence[np.ndarray],
    model_cfg: ModelConfig,
    optim_cfg: OptimizerConfig = OptimizerConfig(),
    run_cfg: TrainConfig = TrainConfig(),
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Teacher-forcing training on fixed-length (F, T) power segments.

    With ``out_dir`` set, writes ``logs/train.tsv`` and ``checkpoints/``
    (periodic ``iter_XXXXXXX.npz`` plus ``last.npz``). ``extra_meta`` is
    stored alongside the loop state in every checkpoint.
    """
    if len(segments) == 0:
        raise ValueError("training set is empty")
    dtype = _dtype(run_cfg.dtype)
    generator = torch.Generator().manual_seed(run_cfg.seed)
    start_it, epoch, batch_index = 0, 0, 0
    if resume is not None:
        ck = load_checkpoint(resume, dtype)
        if ck.model.cfg != model_cfg:
            raise ValueError("checkpoint model config does not match the requested one")
        model, state = ck.model, ck.state or AdamWState()
        if ck.rng_state is not None:
            generator.set_state(ck.rng_state)
        start_it = int(ck.meta.get("iteration", 0))
        epoch = int(ck.meta.get("epoch", 0))
        batch_index = int(ck.meta.get("batch_index", 0))
    else:
        model, state = build_model(model_cfg, run_cfg.seed, dtype), AdamWState()
    params = list(model.parameters())

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "logs" / "train.tsv"
        if resume is None or not log_path.exists():
            log_fh = open(log_path, "w")
            log_fh.write("\t".join(LOG_COLUMNS) + "\n")
        else:
            log_fh = open(log_path, "a")

    def checkpoint(name: str, it: int):
        if out_dir is None:
            return
        meta = {**(extra_meta or {}), "iteration": it, "epoch": epoch, "batch_index": batch_index,
                "optimizer": asdict(optim_cfg), "train": asdict(run_cfg)}
        save_checkpoint(out_dir / "checkpoints" / name, model, state=state, generator=generator, meta=meta)

    history = []
    t0 = time.perf_counter()
    it = start_it
    model.train()
    try:
        while it < run_cfg.iterations:
            batches = iter_batches(segments, run_cfg.batch_size, [run_cfg.seed, epoch])
            for b, batch in enumerate(batches):
                if b < batch_index:
                    continue
                if it >= run_cfg.iterations:
                    break
                it += 1
                batch_index = b + 1
                s = torch.from_numpy(batch).to(dtype).transpose(1, 2)
                out = model.forward_tf(s, generator)
                loss = elbo_loss(out, s, run_cfg.beta_w, run_cfg.beta_z)
                _check_finite(it, loss)
                grads = torch.autograd.grad(loss.total, params, allow_unused=True)
                grads = [torch.zeros_like(p) if g is None else g for g in grads]
                if run_cfg.clip_norm > 0:
                    norm = torch.sqrt(sum((g * g).sum() for g in grads))
                    if not torch.isfinite(norm):
                        raise NumericalError(it, "gradient norm", float(norm))
                    scale = min(1.0, run_cfg.clip_norm / (float(norm) + 1e-12))
                    grads = [g * scale for g in grads]
                lr = lr_at(it, optim_cfg)
                adamw_step(params, grads, state, lr, optim_cfg)
                row = {"iteration": it, "lr": lr, **loss.as_floats(),
                       "wall_time": time.perf_counter() - t0}
                history.append(row)
                if log_fh is not None:
                    log_fh.write("\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n")
                if callback is not None:
                    callback(row)
                if run_cfg.checkpoint_every and it % run_cfg.checkpoint_every == 0:
                    checkpoint(f"iter_{it:07d}.npz", it)
            else:
                epoch += 1
                batch_index = 0
        checkpoint("last.npz", it)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, state, history, generator)


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def read_log(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            rows.append({k: (int(v) if k == "iteration" else float(v)) for k, v in zip(header, vals)})
    return rows


def elbo_grad_check(cfg: ModelConfig, T: int = 5, batch: int = 2, seed: int = 0, eps: float = 1e-6) -> float:
    """Finite-difference check of the full negative ELBO w.r.t. every parameter.

    The sampling noise is frozen by reseeding the generator on every
    evaluation, so the loss is a deterministic function of the parameters.
    The error is measured per parameter tensor: prior-decoder gradients
    arrive only through the beta-weighted KL term, and single coordinates
    around 1e-7 against a loss near 20 are lost in the rounding of the
    difference quotient.
    """
    from .nn import module_grad_check

    model = build_model(cfg, seed, torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    s = torch.rand(batch, T, cfg.F, generator=g, dtype=torch.float64) * 4 + 0.1

    def loss():
        out = model.forward_tf(s, torch.Generator().manual_seed(seed))
        return elbo_loss(out, s).total

    return module_grad_check(loss, model, eps, per_tensor=True)
