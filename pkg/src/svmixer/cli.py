"""Command-line entry point.

Subcommands: summary, profile, gradcheck, train, embed, score, export-synth.
Exit codes: 0 success, 2 config error, 3 data error, 4 check failure.

`--threads N` must take effect before the BLAS backend loads, so it is
applied to the environment first and every numeric module is imported inside
its command function.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import CheckFailure, ConfigError, DataError, SvMixerError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")
GRADCHECK_TOLERANCE = 1e-4


def _apply_threads(argv):
    """Honor --threads before numpy (and its BLAS) is imported anywhere."""
    n = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    if n is None:
        return
    if not n.isdigit() or int(n) < 1:
        raise ConfigError(f"--threads must be a positive integer, got {n!r}")
    for var in _THREAD_VARS:
        os.environ[var] = n


# ---------------------------------------------------------------------------
# config plumbing

def _load_run(args, desk: bool = False):
    """Run config from --config, else desk or paper-scale defaults."""
    from .distill import DistillConfig
    from .encoder import EncoderConfig
    from .io import RunConfig, read_run_config
    from .trainer import TrainConfig, desk_encoder_config, desk_train_config

    if getattr(args, "config", None):
        run = read_run_config(args.config)
    elif desk:
        run = RunConfig(desk_encoder_config(), desk_train_config(), DistillConfig())
    else:
        run = RunConfig(EncoderConfig(), TrainConfig(), DistillConfig())
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
        run.train.seed = args.seed
    return run


def _encoder_config(args):
    """Encoder config from --config plus the structural override flags."""
    import dataclasses

    cfg = _load_run(args).encoder
    overrides = {}
    if getattr(args, "variant", None):
        overrides["block_variant"] = args.variant
    if getattr(args, "hidden_dim", None):
        overrides["hidden_dim"] = args.hidden_dim
    if getattr(args, "num_blocks", None):
        overrides["num_blocks"] = args.num_blocks
    if getattr(args, "no_lgm", False):
        overrides["use_lgm"] = False
    if getattr(args, "no_msm", False):
        overrides["use_msm"] = False
    if getattr(args, "no_gcm", False):
        overrides["use_gcm"] = False
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _write_or_print(text: str, out_path):
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands

def cmd_summary(args) -> int:
    from .encoder import SvMixerModel, samples_for_frames
    from .profiler import model_costs, verify_against_model

    cfg = _encoder_config(args)
    report = model_costs(cfg, samples_for_frames(cfg))
    lines = [f"{'module':<28} {'params':>12} {'macs':>16}"]
    for item in report.items:
        lines.append(f"{item.name:<28} {item.params:>12} {item.macs:>16}")
    lines.append(f"{'total':<28} {report.params:>12} {report.macs:>16}")

    model = SvMixerModel(cfg, seed=args.seed if args.seed is not None else 0)
    census = verify_against_model(model)
    lines.append(f"census ok: {census.instantiated} instantiated parameters "
                 f"match the analytic count")
    _write_or_print("".join(line + "\n" for line in lines), args.out)
    return 0


def cmd_profile(args) -> int:
    from .profiler import reference_rows

    if args.frames < 1:
        raise ConfigError(f"--frames must be >= 1, got {args.frames}")
    rows = reference_rows(args.frames)
    lines = [f"per-block costs at frames={args.frames}",
             f"{'model':<14} {'params':>12} {'macs':>16} {'gmacs':>8}"]
    for row in rows:
        lines.append(f"{row.kind:<14} {row.params:>12} {row.macs:>16} "
                     f"{row.macs / 1e9:>8.3f}")
    sys.stdout.write("".join(line + "\n" for line in lines))

    if args.out:
        payload = {
            "frames": args.frames,
            "rows": [
                {"kind": r.kind, "frames": r.frames, "params": r.params, "macs": r.macs,
                 "items": [{"name": i.name, "params": i.params, "macs": i.macs}
                           for i in r.items]}
                for r in rows
            ],
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    if args.sabotage not in (None, "gelu"):
        raise ConfigError(f"unknown sabotage target {args.sabotage!r}")

    def run():
        return gc.run_all(h=args.h)

    if args.sabotage == "gelu":
        with gc.gelu_sabotage():
            results = run()
    else:
        results = run()

    failed = []
    for name, err in results:
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        sys.stdout.write(f"{name:<18} max rel err {err:.3e}  {status}\n")
        if err > GRADCHECK_TOLERANCE:
            failed.append(name)
    if failed:
        raise CheckFailure(f"gradient check failed for: {', '.join(failed)}")
    sys.stdout.write(f"all {len(results)} checks passed (tolerance {GRADCHECK_TOLERANCE:g})\n")
    return 0


def cmd_train(args) -> int:
    import numpy as np

    from .encoder import SvMixerModel
    from .io import (read_features, save_checkpoint, write_run_config)
    from .trainer import (FeatureTableTeacher, SyntheticCorpus, SyntheticTeacher, train)

    run = _load_run(args, desk=True)
    corpus = SyntheticCorpus(args.speakers, args.utterances, seed=run.seed)
    if args.features:
        meta, table = read_features(args.features, expect_frames=run.encoder.frames)
        teacher = FeatureTableTeacher(meta.teacher_dim, final=table)
    else:
        teacher = SyntheticTeacher()

    model = SvMixerModel(run.encoder, seed=run.seed)
    result = train(model, corpus, teacher, run.train, run.distill)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "checkpoint.svmx"))
    write_run_config(os.path.join(args.out, "config.txt"), run)
    with open(os.path.join(args.out, "metrics.ndjson"), "w", encoding="utf-8") as fh:
        for record in result.metrics:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(os.path.join(args.out, "steps.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{loss:.10f}\n" for loss in result.step_losses)

    head = float(np.mean(result.step_losses[:10]))
    tail = float(np.mean(result.step_losses[-10:]))
    sys.stdout.write(
        f"trained {result.steps} steps over {len(result.metrics)} epochs; "
        f"loss {head:.4f} -> {tail:.4f}\n")
    return 0


def _embed_clip(model, path, allow_any_rate):
    from .encoder import samples_for_frames
    from .io import read_wav

    wave, _ = read_wav(path, allow_any_rate)
    needed = samples_for_frames(model.config)
    if wave.shape[0] < needed:
        raise DataError(
            f"{path}: {wave.shape[0]} samples, need {needed} for {model.config.frames} frames")
    return model.encode(wave[:needed]).data


def cmd_embed(args) -> int:
    from .io import load_model

    model = load_model(args.checkpoint)
    emb = _embed_clip(model, args.wav, args.allow_any_rate)
    _write_or_print(" ".join(f"{v:.8e}" for v in emb.tolist()) + "\n", args.out)
    return 0


def cmd_score(args) -> int:
    from .evaluation import cosine_score, eer, min_dcf, read_trials, score_lines
    from .io import load_model

    trials = read_trials(args.trials)
    model = load_model(args.checkpoint)
    ids = sorted({t.enroll_id for t in trials} | {t.test_id for t in trials})
    embeddings = {}
    for utt_id in ids:
        wav_path = os.path.join(args.wav_dir, f"{utt_id}.wav")
        if not os.path.exists(wav_path):
            raise DataError(f"no WAV for utterance {utt_id!r} at {wav_path}")
        embeddings[utt_id] = _embed_clip(model, wav_path, args.allow_any_rate)

    scores = [cosine_score(embeddings[t.enroll_id], embeddings[t.test_id]) for t in trials]
    _write_or_print(score_lines(trials, scores), args.out)

    if all(t.label is not None for t in trials):
        targets = [s for t, s in zip(trials, scores) if t.label == "target"]
        impostors = [s for t, s in zip(trials, scores) if t.label == "impostor"]
        result = eer(targets, impostors)
        dcf = min_dcf(targets, impostors)
        sys.stdout.write(f"eer={result.eer:.6f} threshold={result.threshold:.6f} "
                         f"min_dcf={dcf:.6f}\n")
    return 0


def cmd_export_synth(args) -> int:
    import numpy as np

    from .io import write_wav
    from .trainer import SyntheticCorpus

    corpus = SyntheticCorpus(args.speakers, args.utterances,
                             seed=args.seed if args.seed is not None else 0)
    os.makedirs(args.out, exist_ok=True)

    manifest_lines = []
    for s, u in corpus.keys():
        utt_id = corpus.utterance_id(s, u)
        wav_path = os.path.join(args.out, f"{utt_id}.wav")
        write_wav(wav_path, corpus.utterance(s, u), corpus.sample_rate)
        manifest_lines.append(f"{utt_id} {wav_path}\n")
    with open(os.path.join(args.out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(manifest_lines)

    targets = []
    for s in range(corpus.n_speakers):
        for u1 in range(corpus.utterances_per_speaker):
            for u2 in range(u1 + 1, corpus.utterances_per_speaker):
                targets.append((corpus.utterance_id(s, u1), corpus.utterance_id(s, u2)))
    rng = np.random.default_rng(np.random.SeedSequence([corpus.seed, 4]))
    impostors = set()
    if corpus.n_speakers > 1:
        while len(impostors) < len(targets):
            s1, s2 = rng.integers(0, corpus.n_speakers, size=2)
            if s1 == s2:
                continue
            u1, u2 = rng.integers(0, corpus.utterances_per_speaker, size=2)
            impostors.add((corpus.utterance_id(int(s1), int(u1)),
                           corpus.utterance_id(int(s2), int(u2))))
    with open(os.path.join(args.out, "trials.txt"), "w", encoding="utf-8") as fh:
        for a, b in targets:
            fh.write(f"{a} {b} target\n")
        for a, b in sorted(impostors):
            fh.write(f"{a} {b} impostor\n")

    sys.stdout.write(
        f"wrote {len(manifest_lines)} utterances, {len(targets)} target and "
        f"{len(impostors)} impostor trials to {args.out}\n")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (flat key=value lines)")
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread count (1 = bit-reproducible reference)")
    common.add_argument("--out", default=None, help="output path")

    parser = argparse.ArgumentParser(prog="svmixer",
                                     description="attention-free speaker encoder tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", parents=[common],
                       help="module tree with parameter census")
    p.add_argument("--variant", choices=("svmixer", "mlpmixer"))
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--no-lgm", action="store_true")
    p.add_argument("--no-msm", action="store_true")
    p.add_argument("--no-gcm", action="store_true")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("profile", parents=[common],
                       help="per-block cost rows for the three reference models")
    p.add_argument("--frames", type=int, default=149)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every op and a 2-block model")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--sabotage", default=None,
                   help="test-only: break a derivative to prove the check bites")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common],
                       help="desk-scale distillation run on the synthetic corpus")
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--features", default=None,
                   help="teacher feature file instead of the synthetic teacher")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="waveform to embedding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--allow-any-rate", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", parents=[common], help="score a trial list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--allow-any-rate", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-synth", parents=[common],
                       help="write the synthetic corpus as WAVs with trial lists")
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utterances", type=int, default=20)
    p.set_defaults(func=cmd_export_synth)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        _apply_threads(argv)
        args = build_parser().parse_args(argv)
        if args.command == "train" and not args.out:
            raise ConfigError("train requires --out DIR for its artifacts")
        if args.command == "export-synth" and not args.out:
            raise ConfigError("export-synth requires --out DIR")
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except CheckFailure as exc:
        sys.stderr.write(f"check failure: {exc}\n")
        return 4
    except (DataError, OSError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return 3
    except SvMixerError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
