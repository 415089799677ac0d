"""Batch command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Every
subcommand that takes --seed is bit-reproducible across runs on the same
platform, and none of them mutate their inputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import audio, checks, config as cfgmod, evaluate, model as model_mod, synth
from .train import SpectrogramDataset, train as run_train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="spkvlad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrogram", help="write the SPG1 magnitude dump of a WAV")
    p.add_argument("wav")
    p.add_argument("out")

    p = sub.add_parser("synth-data", help="generate a synthetic-speaker corpus")
    p.add_argument("out_dir")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-seconds", type=float, default=6.0)
    p.add_argument("--max-seconds", type=float, default=10.0)
    p.add_argument("--speech-fraction", type=float, default=1.0,
                   help="below 1.0, utterances interleave speech with noise chunks")

    p = sub.add_parser("train", help="train on a dataset manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="manifest of training utterances")
    p.add_argument("--out", required=True, help="checkpoint/metrics directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")

    p = sub.add_parser("embed", help="print the embedding of one WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("wav")

    p = sub.add_parser("score-pairs", help="score a verification pair list")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--data-dir", default=None,
                   help="base directory of the WAV paths (default: pair list directory)")
    p.add_argument("--crop-seconds", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="score CSV (default: <pairs>.scores.csv)")

    p = sub.add_parser("eer", help="equal error rate of a score CSV")
    p.add_argument("scores")

    p = sub.add_parser("length-probe", help="EER vs crop length on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lengths", default="2,3,4,5,6")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs-per-speaker", type=int, default=10)
    p.add_argument("--out", default=None, help="probe CSV (default: stdout only)")

    p = sub.add_parser("grad-check", help="run the float64 gradient suite")
    p.add_argument("--full", action="store_true",
                   help="also difference every parameter of the tiny full model")

    sub.add_parser("shape-check", help="verify the layer-table output extents")
    return parser


def _load_model(ckpt_path):
    model, _, _ = model_mod.load_checkpoint(ckpt_path)
    return model


def _cmd_spectrogram(args) -> int:
    spec = audio.stft_spectrogram(audio.load_wav(args.wav))
    audio.write_spg(spec, args.out)
    print(f"wrote {spec.bins} x {spec.frames} spectrogram to {args.out}")
    return 0


def _cmd_synth_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    entries, train_e, held_e, _ = synth.make_synth_dataset(
        args.out_dir, args.speakers, args.utts,
        seconds_range=(args.min_seconds, args.max_seconds), rng=rng,
        speech_fraction=args.speech_fraction)
    print(f"wrote {len(entries)} utterances for {args.speakers} speakers to {args.out_dir}")
    print(f"split: {len(train_e)} train / {len(held_e)} heldout")
    return 0


def _cmd_train(args) -> int:
    values = cfgmod.resolve(args.config, args.set)
    dataset = SpectrogramDataset.from_manifest(args.data)
    print("resolved config:")
    print(cfgmod.format_resolved(values))
    model_cfg = cfgmod.to_model_config(values, num_classes=len(dataset.speakers))
    train_cfg = cfgmod.to_train_config(values)
    model = model_mod.build_model(model_cfg, seed=train_cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved.cfg", "w", encoding="utf-8") as fh:
        fh.write(cfgmod.format_resolved(values) + "\n")
    history = run_train(model, dataset, train_cfg, out_dir)
    print(f"final checkpoint: {history['checkpoint']}")
    return 0


def _cmd_embed(args) -> int:
    model = _load_model(args.ckpt)
    spec = audio.normalize_spectrogram(audio.stft_spectrogram(audio.load_wav(args.wav)))
    emb = model.embed(spec)
    print(" ".join(f"{v:.8g}" for v in emb))
    return 0


def _cmd_score_pairs(args) -> int:
    model = _load_model(args.ckpt)
    pairs = evaluate.read_pair_list(args.pairs)
    base = args.data_dir if args.data_dir is not None else Path(args.pairs).parent
    entries = sorted({p.path_a for p in pairs} | {p.path_b for p in pairs})
    dataset = SpectrogramDataset([("?", rel) for rel in entries], base)
    rng = np.random.default_rng(args.seed)
    scores = evaluate.score_pairs(model, pairs, dataset,
                                  crop_seconds=args.crop_seconds, rng=rng)
    out = args.out if args.out is not None else str(args.pairs) + ".scores.csv"
    evaluate.write_scores_csv(pairs, scores, out)
    print(f"wrote {len(pairs)} scores to {out}")
    return 0


def _cmd_eer(args) -> int:
    result = evaluate.compute_eer(evaluate.read_scores_csv(args.scores))
    print(f"EER {result.eer:.4f}")
    print(f"threshold {result.threshold:.6f}")
    return 0


def _cmd_length_probe(args) -> int:
    model = _load_model(args.ckpt)
    dataset = SpectrogramDataset.from_manifest(args.data)
    lengths = tuple(float(x) for x in args.lengths.split(","))
    rng = np.random.default_rng(args.seed)
    rows = evaluate.length_probe(model, dataset, lengths=lengths, repeats=args.repeats,
                                 rng=rng, pos_per_speaker=args.pairs_per_speaker,
                                 neg_per_speaker=args.pairs_per_speaker)
    print("length_s,eer_mean,eer_std")
    for length, mean, std in rows:
        print(f"{length:g},{mean:.6f},{std:.6f}")
    if args.out is not None:
        evaluate.write_probe_csv(rows, args.out)
    return 0


def _cmd_grad_check(args) -> int:
    failed = False
    for name, err in checks.op_grad_checks():
        ok = err < checks.GRAD_TOL
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max rel err {err:.3e}")
    if args.full:
        err = checks.full_model_grad_check()
        ok = err < checks.GRAD_TOL
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'} {'full-model':24s} max rel err {err:.3e}")
    return 2 if failed else 0


def _cmd_shape_check(args) -> int:
    ok, lines = checks.shape_check()
    for line in lines:
        print(line)
    for line in checks.parameter_report():
        print(line)
    print("shape check:", "PASS" if ok else "FAIL")
    return 0 if ok else 2


_HANDLERS = {
    "spectrogram": _cmd_spectrogram,
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "score-pairs": _cmd_score_pairs,
    "eer": _cmd_eer,
    "length-probe": _cmd_length_probe,
    "grad-check": _cmd_grad_check,
    "shape-check": _cmd_shape_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract: exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
