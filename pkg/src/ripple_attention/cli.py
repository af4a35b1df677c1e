"""Command-line entry point: ``ripple-attention <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    """``"100:3000:100"`` (inclusive range) or ``"1000,2000"``."""
    try:
        if ":" in text:
            start, stop, step = (int(s) for s in text.split(":"))
            return list(range(start, stop + 1, step))
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:step or a comma list, got {text!r}")


def _pattern(args):
    from .pattern import PatternSpec

    try:
        return PatternSpec(args.kind, w=args.w, d=args.d, block=args.block)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_pattern_flags(p, kind="ripple", w=12, d=24, block=50):
    p.add_argument("--kind", default=kind, choices=["full", "band", "ripple", "blockwise"])
    p.add_argument("--w", type=int, default=w, help="local window length (even)")
    p.add_argument("--d", type=int, default=d, help="dilation rate")
    p.add_argument("--block", type=int, default=block, help="blockwise block length")


def cmd_mask_dump(args):
    from .pattern import build_mask

    mask = build_mask(_pattern(args), args.L)
    if args.out is None:
        sys.stdout.write(mask.to_pbm())
        return EXIT_OK
    out = Path(args.out)
    out.with_suffix(".pbm").write_text(mask.to_pbm())
    out.with_name(out.stem + "_degrees.csv").write_text(mask.degrees_csv())
    return EXIT_OK


def cmd_macs(args):
    from .analysis import SepFormerSpec, macs_sweep, reports_to_csv
    from .model import ModelConfig
    from .pattern import PatternSpec

    cfg = ModelConfig(n_blocks=args.blocks, n_heads=args.heads, d_model=args.d_model,
                      d_ff=args.d_ff)
    specs = [PatternSpec.full(), PatternSpec.blockwise(args.block), SepFormerSpec(args.chunk)]
    specs += [PatternSpec.ripple(args.w, d) for d in args.d]
    reports = macs_sweep(specs, args.L, cfg, scope=args.scope, use_schedule=args.schedule)
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import check_model_gradients

    errors = check_model_gradients(seed=args.seed, corrupt=args.corrupt)
    worst = max(errors.values())
    print(f"max relative error: {worst:.6e}")
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_NUMERIC


def cmd_train(args):
    from .model import ModelConfig
    from .train import TrainConfig, TrainingDivergedError, train_loop

    base = {}
    if args.config:
        try:
            base = TrainConfig.from_text(Path(args.config).read_text()).__dict__.copy()
        except OSError as exc:
            raise DataError(f"cannot read training config: {exc}") from exc
    flags = {
        "steps": args.steps, "objective": args.objective, "seed": args.seed,
        "utterances_per_step": args.utterances, "warmup_steps": args.warmup,
        "lr_factor": args.lr_factor, "duration": args.duration,
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    defaults = {"steps": 500, "utterances_per_step": 4, "warmup_steps": 400,
                "lr_factor": 4.0, "duration": 0.48}
    for key, value in defaults.items():
        base.setdefault(key, value)
    train_cfg = TrainConfig(**base)
    model_cfg = ModelConfig(n_blocks=args.blocks, n_heads=args.heads, d_model=args.d_model,
                            d_ff=args.d_ff, n_bins=args.bins,
                            pattern=_pattern(args))
    try:
        history, _ = train_loop(model_cfg, train_cfg, log_path=args.log,
                                checkpoint_path=args.checkpoint)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    losses = [h[2] for h in history]
    if losses:
        print(f"steps: {len(losses)}  first loss: {losses[0]:.5f}  last loss: {losses[-1]:.5f}")
    return EXIT_OK


def cmd_enhance(args):
    from .dsp import StftConfig, istft, read_wav, stft, write_wav
    from .model import CheckpointError, forward, load
    from .targets import apply_mask

    try:
        params = load(args.model)
    except FileNotFoundError as exc:
        raise DataError(f"model not found: {args.model}") from exc
    except CheckpointError as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc
    noisy = _read_wav(args.input, read_wav)
    cfg = StftConfig.for_bins(params.config.n_bins)
    try:
        spec = stft(noisy, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    mask = forward(params, spec.magnitude)
    write_wav(args.output, istft(apply_mask(spec, mask)))
    return EXIT_OK


def _read_wav(path, reader):
    from .dsp import AudioFormatError

    try:
        return reader(path)
    except FileNotFoundError as exc:
        raise DataError(f"input not found: {path}") from exc
    except AudioFormatError as exc:
        raise DataError(f"bad WAV: {exc}") from exc


def cmd_bench(args):
    from .analysis import bench_kernels, bench_to_csv
    from .model import ModelConfig

    cfg = ModelConfig(n_heads=args.heads, d_model=args.d_model)
    rows = bench_kernels(_pattern(args), args.L, cfg, repetitions=args.reps, seed=args.seed)
    text = bench_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_make_data(args):
    from .dsp import Waveform, write_wav
    from .train import make_synthetic_pair

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(args.seed).spawn(args.n)
    for i, seed in enumerate(seeds):
        clean, noise = make_synthetic_pair(seed, args.duration, args.snr)
        noisy = Waveform(clean.samples + noise.samples, clean.sample_rate)
        for name, w in (("clean", clean), ("noise", noise), ("noisy", noisy)):
            write_wav(out / f"{i:04d}_{name}.wav", w)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="ripple-attention", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mask-dump", help="write an attention mask as PBM plus row-degree CSV")
    _add_pattern_flags(p)
    p.add_argument("--L", type=int, default=12, help="sequence length")
    p.add_argument("--out", help="output prefix (PREFIX.pbm, PREFIX_degrees.csv); "
                                 "PBM goes to stdout when omitted")
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("macs", help="theoretical MACs for full/blockwise/sepformer/ripple")
    p.add_argument("--L", type=_int_list, default=_int_list("100:3000:100"))
    p.add_argument("--w", type=int, default=12)
    p.add_argument("--d", type=_int_list, default=[24], help="dilation(s), comma separated")
    p.add_argument("--block", type=int, default=50)
    p.add_argument("--chunk", type=int, default=50, help="dual-path chunk length")
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--d-ff", type=int, default=1024)
    p.add_argument("--scope", choices=["attention", "layer"], default="attention",
                   help="count attention modules only, or whole layers incl. FFN")
    p.add_argument("--schedule", action="store_true",
                   help="band-only lower layers for ripple, as in the trained model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tiny", action="store_true", default=True,
                   help="use the tiny config (K=5, d_model=8, h=2, B=2, L=7); the only option")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on synthetic mixtures")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--objective", choices=["irm", "psm"])
    p.add_argument("--seed", type=int)
    p.add_argument("--utterances", type=int, help="utterances per step (default 4)")
    p.add_argument("--warmup", type=int, help="warm-up steps (default 400)")
    p.add_argument("--lr-factor", type=float, help="learning-rate multiplier (default 4)")
    p.add_argument("--duration", type=float, help="utterance length in seconds (default 0.48)")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--bins", type=int, default=129)
    _add_pattern_flags(p)
    p.add_argument("--log", default="loss.csv", help="loss CSV (step,lr,loss)")
    p.add_argument("--checkpoint", default="model.rsae")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a 16 kHz mono 16-bit WAV file")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("bench", help="median wall-clock time: dense full vs. sparse kernel")
    _add_pattern_flags(p)
    p.add_argument("--L", type=_int_list, default=[500, 1000, 2000])
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-data", help="write synthetic clean/noise/noisy WAV triples")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--snr", type=float, default=0.0)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
