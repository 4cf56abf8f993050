"""Command-line entry point.

Exit status: 0 on success, 1 for usage or configuration errors, 2 when
training or a gradient check hits a numerical failure.

Output directories follow one layout: ``checkpoints/``, ``logs/``,
``wavs/`` and ``reports/``, plus the effective ``config.yaml``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config, parse_override
from .data import AudioFormatError, Manifest, build_manifest, load_wav, prepare_segments, synth_corpus, write_wav
from .dsp import StftConfig, power_spectrogram, stft
from .metrics import MetricReport, log_spectral_distance, rmse, si_sdr
from .model import ModelConfig, param_breakdown
from .pipeline import evaluate_resynthesis, generate_waveforms
from .training import NumericalError, build_model, elbo_grad_check, load_checkpoint, train

log = logging.getLogger("hitdvae")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _collect_wavs(path: str) -> list[tuple[str, Path]]:
    """(name, path) pairs from a WAV file, a directory of WAVs, or a manifest."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{path} does not exist")
    if p.is_dir():
        files = sorted(f for f in p.rglob("*") if f.is_file() and f.suffix.lower() == ".wav")
        pairs = [(str(f.relative_to(p).with_suffix("")), f) for f in files]
    elif p.suffix.lower() == ".wav":
        pairs = [(p.stem, p)]
    else:
        entries = Manifest.read(p).entries
        pairs = [(Path(e.path).stem, Path(e.path)) for e in entries]
    if not pairs:
        raise UsageError(f"no .wav files found in {path}")
    return pairs


def _stft_from_meta(meta: dict) -> StftConfig:
    return StftConfig(**meta["stft"]) if "stft" in meta else StftConfig()


# -- subcommands ---------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = dict(parse_override(s) for s in args.set)
    for flag, key in (("data", "data.path"), ("seed", "train.seed"), ("iterations", "train.iterations"),
                      ("variant", "model.variant"), ("base", "model.base")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    cfg: RunConfig = load_config(args.config, overrides)
    if cfg.data.path is None:
        raise ConfigError("data.path", "no training data given (set data.path or pass --data)")
    if not Path(cfg.data.path).exists():
        raise ConfigError("data.path", f"{cfg.data.path} does not exist")
    out = Path(args.out)
    dump_config(cfg, out / "config.yaml")

    data_path = Path(cfg.data.path)
    if data_path.is_dir():
        corpus = build_manifest(data_path)
        split = "train"
    elif data_path.suffix.lower() == ".wav":
        corpus, split = [data_path], None
    else:
        corpus, split = Manifest.read(data_path), cfg.data.split
    segments = prepare_segments(corpus, cfg.stft, cfg.data.segment_length, split)
    if not segments:
        raise ConfigError("data.path", f"no segments of {cfg.data.segment_length} frames in {data_path}")
    log.info("training %s on %d segments", cfg.model.name, len(segments))

    def report(row):
        if row["iteration"] % args.log_every == 0:
            log.info("iter %d  loss %.3f  is %.3f  kl_z %.3f  kl_w %.3f", row["iteration"], row["total"],
                     row["recon_is"], row["kl_z"], row["kl_w"])

    result = train(segments, cfg.model, cfg.optimizer, cfg.train, out_dir=out, resume=args.resume,
                   callback=report, extra_meta={"stft": asdict(cfg.stft), "data": asdict(cfg.data)})
    print(json.dumps({"iterations": len(result.history),
                      "final_loss": result.history[-1]["total"] if result.history else None,
                      "checkpoint": str(out / "checkpoints" / "last.npz")}))
    return EXIT_OK


def cmd_resynth(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _stft_from_meta(ck.meta)
    pairs = _collect_wavs(args.inputs)
    wavs = [load_wav(p) for _, p in pairs]
    names = [n for n, _ in pairs]
    report, outputs = evaluate_resynthesis(ck.model, wavs, cfg, args.mode, args.seed, names)
    out = Path(args.out)
    for name, r in zip(names, outputs):
        write_wav(out / "wavs" / args.mode / f"{name}.wav", r.estimate)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    stem = out / "reports" / f"resynth_{args.mode}"
    report.write(stem.with_suffix(".tsv"), stem.with_suffix(".json"))
    print(json.dumps({"mode": args.mode, **report.mean()}))
    return EXIT_OK


def cmd_generate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _stft_from_meta(ck.meta)
    wavs = generate_waveforms(ck.model, args.count, args.frames, cfg, args.seed, args.gl_iters)
    out = Path(args.out)
    for i, wav in enumerate(wavs):
        write_wav(out / "wavs" / "generated" / f"gen_{i:04d}.wav", wav)
    print(json.dumps({"count": len(wavs), "dir": str(out / "wavs" / "generated")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = StftConfig(args.window_length, args.hop)
    refs = dict(_collect_wavs(args.ref))
    ests = dict(_collect_wavs(args.est))
    common = sorted(set(refs) & set(ests))
    if not common:
        raise UsageError("no reference/estimate pairs share a name")
    report = MetricReport()
    for name in common:
        ref, est = load_wav(refs[name]), load_wav(ests[name])
        n = min(len(ref), len(est))
        lsd = float("nan")
        if n >= cfg.window_length:
            ref_p = power_spectrogram(stft(ref.samples[:n], cfg))
            est_p = power_spectrogram(stft(est.samples[:n], cfg))
            lsd = log_spectral_distance(ref_p, est_p)
        report.add(name, rmse(ref, est), si_sdr(ref, est), lsd)
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    report.write(out / "reports" / "eval.tsv", out / "reports" / "eval.json")
    print(json.dumps({"pairs": len(common), **report.mean()}))
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    corpus = synth_corpus(args.count, args.duration, args.seed)
    for i, wav in enumerate(corpus):
        write_wav(out / f"utt_{i:04d}.wav", wav)
    manifest = build_manifest(out, tuple(args.split), seed=args.seed)
    manifest.write(out / "manifest.tsv")
    print(json.dumps({"count": len(corpus), "dir": str(out), "manifest": str(out / "manifest.tsv")}))
    return EXIT_OK


def cmd_params(args) -> int:
    if args.checkpoint:
        cfg = load_checkpoint(args.checkpoint).model.cfg
    else:
        overrides = dict(parse_override(s) for s in args.set)
        cfg = load_config(args.config, overrides).model
    if args.variant or args.base:
        cfg = ModelConfig(**{**cfg.to_dict(), **{k: v for k, v in
                                                 (("variant", args.variant), ("base", args.base)) if v}})
    counts = param_breakdown(build_model(cfg))
    print(json.dumps({"model": cfg.name, **counts}, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig(F=9, d_model=8, n_layers=1, d_ff=16, n_heads=1, L_z=2, L_w=3, rnn_hidden=4,
                      variant=args.variant, base=args.base or "LigHT")
    err = elbo_grad_check(cfg, T=5, seed=args.seed)
    ok = err < GRADCHECK_TOLERANCE
    print(f"{cfg.name}: max relative gradient error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hitdvae", description="Transformer dynamical VAE for speech spectrograms.")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="train a model on a WAV directory or manifest")
    t.add_argument("--config", help="YAML run configuration")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--data", help="overrides data.path")
    t.add_argument("--seed", type=int, help="overrides train.seed")
    t.add_argument("--iterations", type=int, help="overrides train.iterations")
    t.add_argument("--variant", help="overrides model.variant")
    t.add_argument("--base", help="overrides model.base")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resynth", parents=[common], help="analysis-resynthesis of WAVs through a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--inputs", required=True, help="WAV file, directory or manifest")
    r.add_argument("--mode", choices=("TF", "GEN"), default="TF")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_resynth)

    g = sub.add_parser("generate", parents=[common], help="sample from the prior and invert with Griffin-Lim")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--gl-iters", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", parents=[common], help="score estimate WAVs against references with matching names")
    e.add_argument("--ref", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--window-length", type=int, default=1024)
    e.add_argument("--hop", type=int, default=256)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic harmonic corpus and its manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", type=float, nargs=3, default=(1.0, 0.0, 0.0), metavar=("TRAIN", "VALID", "TEST"))
    s.set_defaults(func=cmd_synth_data)

    c = sub.add_parser("params", parents=[common], help="per-module parameter counts")
    c.add_argument("--checkpoint")
    c.add_argument("--config")
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    c.add_argument("--variant")
    c.add_argument("--base")
    c.set_defaults(func=cmd_params)

    k = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the ELBO on a tiny model")
    k.add_argument("--variant", default="LigHT")
    k.add_argument("--base")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_gradcheck)
    return p


def run(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, AudioFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())
