"""Command-line entry point tying the modules into reproducible runs.

One subcommand per invocation; every run echoes its resolved configuration
and seed to stderr.  Exit codes: 0 success, 1 usage error, 2 runtime error.
Options may come from a key=value config file (``--config``); explicit flags
win over file values.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import SqzError, UsageError


def _apply_thread_cap() -> None:
    cap = os.environ.get("SQZ_THREADS")
    if not cap:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _ratio_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog="sqz", description=__doc__)
    parser.add_argument("--config", help="key=value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="subcommand", required=True)
    d = dsub.add_parser("synth", help="synthesize a toy-song dataset")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--songs", type=int, default=10)
    d.add_argument("--dur", type=float, default=8.0)
    d.add_argument("--sr", type=int, default=24000)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dataset_synth)

    p = sub.add_parser("squeeze", help="time-compress a wav")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--mode", choices=("phase_vocoder", "naive_resample"), default="phase_vocoder")
    p.add_argument("--out", required=True)
    p.add_argument("--mel", help="also dump the compressed mel (SQZM)")
    p.set_defaults(func=cmd_squeeze, seed=0)

    p = sub.add_parser("restore", help="restore a compressed wav to full speed")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("train", help="train a model")
    tsub = p.add_subparsers(dest="subcommand", required=True)
    for kind in ("restoration", "composer", "sag"):
        t = tsub.add_parser(kind)
        t.add_argument("--data", required=True, help="dataset manifest path")
        t.add_argument("--out", required=True, help="checkpoint output path")
        t.add_argument("--steps", type=int, default=500)
        t.add_argument("--lr", type=float, default=1e-3)
        t.add_argument("--batch", type=int, default=1)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--log", help="per-step loss CSV path")
        if kind == "restoration":
            t.add_argument("--ratios", type=_ratio_list, default=[1.0, 4.0, 8.0])
        else:
            t.add_argument("--ratio", type=float, default=4.0)
        if kind == "sag":
            t.add_argument("--target", choices=("instrument", "mixture"), default="instrument")
        t.set_defaults(func=cmd_train, kind=kind)

    p = sub.add_parser("generate", help="compose music in the compressed domain")
    gsub = p.add_subparsers(dest="subcommand", required=True)
    for task in ("scratch", "continue", "complete"):
        g = gsub.add_parser(task)
        g.add_argument("--ratio", type=float, default=4.0)
        g.add_argument("--dur", type=float, required=True, help="output duration, seconds")
        g.add_argument("--seed", type=int, default=0)
        g.add_argument("--composer", required=True)
        g.add_argument("--restoration", required=True)
        g.add_argument("--out", required=True)
        g.add_argument("--steps", type=int)
        g.add_argument("--mel", help="also dump the generated compressed mel (SQZM)")
        if task != "scratch":
            g.add_argument("--in", dest="input", required=True)
        if task == "complete":
            g.add_argument("--from", dest="from_s", type=float, required=True)
            g.add_argument("--to", dest="to_s", type=float, required=True)
        g.set_defaults(func=cmd_generate, task=task)

    p = sub.add_parser("sag", help="singing accompaniment generation")
    ssub = p.add_subparsers(dest="subcommand", required=True)
    s = ssub.add_parser("generate")
    s.add_argument("--vocal", required=True)
    s.add_argument("--ratio", type=float)
    s.add_argument("--sag", dest="sag_ckpt", required=True)
    s.add_argument("--restoration", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_sag_generate)

    p = sub.add_parser("eval", help="distances between two wav files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_eval, seed=0)

    p = sub.add_parser("bench", help="reconstruction/RTF benchmark report")
    p.add_argument("--data", required=True)
    p.add_argument("--restoration", required=True)
    p.add_argument("--composer")
    p.add_argument("--sag", dest="sag_ckpt")
    p.add_argument("--ratios", type=_ratio_list, default=[1.0, 4.0, 8.0])
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--compose-dur", type=float, default=8.0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("faps", help="audio feature frames per second")
    p.add_argument("--sr", type=float, required=True)
    p.add_argument("--hop", type=float, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.set_defaults(func=cmd_faps, seed=0)

    return parser


def _load_config_args(path: str) -> list[str]:
    """Turn a key=value file into flag tokens (inserted before real flags)."""
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        tokens += [f"--{key.replace('_', '-')}", value.strip("\"'")]
    return tokens


def _resolve_argv(argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    try:
        cfg_path = argv[at + 1]
    except IndexError:
        raise UsageError("--config needs a file path")
    rest = argv[:at] + argv[at + 2:]
    # Keep subcommand words first, then config values, then explicit flags
    # (argparse lets later occurrences win).
    n_words = 0
    while n_words < len(rest) and not rest[n_words].startswith("-"):
        n_words += 1
    return rest[:n_words] + _load_config_args(cfg_path) + rest[n_words:]


def _echo_config(args: argparse.Namespace) -> None:
    skip = {"func", "config"}
    pairs = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k not in skip and v is not None]
    print("sqz config: " + " ".join(pairs), file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommand bodies (imports kept local so SQZ_THREADS can cap BLAS first)


def cmd_dataset_synth(args) -> int:
    from .audio import make_dataset

    manifest = make_dataset(args.seed, args.songs, args.dur, args.sr, args.out)
    n_train = len(manifest.split("train"))
    n_test = len(manifest.split("test"))
    print(f"wrote {len(manifest.entries)} songs ({n_train} train / {n_test} test) to {args.out}")
    return 0


def cmd_squeeze(args) -> int:
    from .audio import read_wav, write_wav
    from .spectral import mel_spectrogram, model_mel, save_mel
    from .timescale import tsm_compress

    wav = read_wav(args.input)
    out = tsm_compress(wav, args.ratio, mode=args.mode)
    write_wav(out, args.out)
    if args.mel:
        save_mel(mel_spectrogram(out, model_mel(out.sample_rate)).with_ratio(args.ratio), args.mel)
    print(f"{args.input}: {wav.duration_s:.2f}s -> {out.duration_s:.2f}s at x{args.ratio:g}")
    return 0


def cmd_restore(args) -> int:
    from .audio import read_wav, write_wav
    from .restoration import RestorationCheckpoint, restore
    from .spectral import mel_spectrogram, model_mel, vocode
    from .timescale import validate_ratio

    ckpt = RestorationCheckpoint.load(args.ckpt)
    wav = read_wav(args.input)
    r = validate_ratio(args.ratio)
    m_c = mel_spectrogram(wav, model_mel(wav.sample_rate)).with_ratio(r)
    restored = restore(m_c, r, ckpt, steps=args.steps, seed=args.seed)
    write_wav(vocode(restored), args.out)
    print(f"restored {args.input} (x{r:g}) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from .audio import DatasetManifest

    manifest = DatasetManifest.load(args.data)
    if args.kind == "restoration":
        from .restoration import RestorationTrainConfig, train_restoration

        cfg = RestorationTrainConfig(steps=args.steps, lr=args.lr, batch=args.batch,
                                     log_path=args.log)
        ckpt = train_restoration(manifest, tuple(args.ratios), cfg, seed=args.seed)
    elif args.kind == "composer":
        from .composer import ComposerTrainConfig, train_composer

        cfg = ComposerTrainConfig(steps=args.steps, lr=args.lr, batch=args.batch,
                                  log_path=args.log)
        ckpt = train_composer(manifest, args.ratio, cfg, seed=args.seed)
    else:
        from .sag import SagTrainConfig, train_sag

        cfg = SagTrainConfig(steps=args.steps, lr=args.lr, batch=args.batch,
                             target=args.target, log_path=args.log)
        ckpt = train_sag(manifest, args.ratio, cfg, seed=args.seed)
    ckpt.save(args.out)
    first = ckpt.history[0]
    last = ckpt.history[-1]
    print(f"trained {args.kind} for {args.steps} steps "
          f"(loss {sum(first[1:]):.4f} -> {sum(last[1:]):.4f}); saved {args.out}")
    return 0


def cmd_generate(args) -> int:
    from .audio import read_wav, write_wav
    from .composer import ComposerCheckpoint, compose_full
    from .restoration import RestorationCheckpoint
    from .spectral import save_mel

    task = {"scratch": "scratch", "continue": "continuation", "complete": "completion"}[args.task]
    ckpts = {
        "composer": ComposerCheckpoint.load(args.composer),
        "restoration": RestorationCheckpoint.load(args.restoration),
    }
    input_audio = read_wav(args.input) if getattr(args, "input", None) else None
    boundaries_s = (args.from_s, args.to_s) if args.task == "complete" else None
    stats: dict = {}
    out = compose_full(task, input_audio, args.ratio, ckpts, args.dur, seed=args.seed,
                       steps=args.steps, boundaries_s=boundaries_s, stats=stats)
    write_wav(out, args.out)
    if args.mel:
        from .spectral import mel_spectrogram, model_mel

        save_mel(mel_spectrogram(out, model_mel(out.sample_rate)), args.mel)
    print(f"{task}: wrote {out.duration_s:.2f}s to {args.out} "
          f"({stats['composer_tokens']} composer tokens, {stats['total_seconds']:.1f}s wall)")
    return 0


def cmd_sag_generate(args) -> int:
    from .audio import read_wav, write_wav
    from .restoration import RestorationCheckpoint
    from .sag import SagCheckpoint, generate_accompaniment

    sag_ckpt = SagCheckpoint.load(args.sag_ckpt)
    rest = RestorationCheckpoint.load(args.restoration)
    vocal = read_wav(args.vocal)
    r = args.ratio if args.ratio is not None else sag_ckpt.ratio
    out = generate_accompaniment(vocal, r, {"sag": sag_ckpt, "restoration": rest},
                                 seed=args.seed, steps=args.steps)
    write_wav(out, args.out)
    print(f"accompaniment: wrote {out.duration_s:.2f}s to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .audio import read_wav
    from .metrics import mel_distance, stft_distance, waveform_distance

    ref = read_wav(args.ref)
    hyp = read_wav(args.hyp)
    print(f"mel_dis={mel_distance(ref, hyp):.4f} "
          f"stft_dis={stft_distance(ref, hyp):.4f} "
          f"wave_dis={waveform_distance(ref, hyp):.4f}")
    return 0


def cmd_bench(args) -> int:
    from .audio import DatasetManifest
    from .composer import ComposerCheckpoint
    from .metrics import bench_report
    from .restoration import RestorationCheckpoint
    from .sag import SagCheckpoint

    manifest = DatasetManifest.load(args.data)
    ckpts = {"restoration": RestorationCheckpoint.load(args.restoration)}
    if args.composer:
        ckpts["composer"] = ComposerCheckpoint.load(args.composer)
    if args.sag_ckpt:
        ckpts["sag"] = SagCheckpoint.load(args.sag_ckpt)
    report = bench_report(manifest, ckpts, tuple(args.ratios), out_dir=args.out,
                          seed=args.seed, compose_duration_s=args.compose_dur,
                          steps=args.steps, figures=not args.no_figures)
    for row in report.rows:
        print(f"{row.name}: mel={report._fmt(row.mel_dis)} stft={report._fmt(row.stft_dis)} "
              f"wave={report._fmt(row.wave_dis)} faps={report._fmt(row.faps)} rtf={report._fmt(row.rtf)}")
    print(f"report written to {args.out}")
    return 0


def cmd_faps(args) -> int:
    from .metrics import faps

    print(f"{faps(args.sr, args.hop, args.ratio):.2f}")
    return 0


def cli_dispatch(argv: list[str]) -> int:
    """Parse and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(_resolve_argv(list(argv)))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    _echo_config(args)
    try:
        return args.func(args)
    except SqzError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    _apply_thread_cap()
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
