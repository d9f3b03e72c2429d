"""Command-line entry point wiring the modules into reproducible experiments.

Exit codes: 0 success, 1 runtime failure, 2 invalid input. Every command
writes a run_manifest.json into its output directory; identical config and
seed produce an identical run id.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .errors import MsrSpeechError
from .model import ModelConfig, PretrainModel
from .objective import (
    assign_labels,
    kmeans_fit,
    read_codebook,
    read_label_sidecar,
    write_codebook,
    write_label_sidecar,
)
from .plan import CANONICAL_RATES, canonical_plan, derive_plan, frame_count, \
    receptive_field, validate_plan
from .probe import layer_weight_report, mismatch_report, probe_train, rate_invariance
from .trainer import (
    TrainConfig,
    Trainer,
    load_checkpoint,
    overhead_report,
    save_checkpoint,
)

THREADS_ENV = "MSRH_THREADS"


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_run_manifest(out_dir: Path, command: str, config_path, seed) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "out_dir": str(out_dir),
    }
    payload["run_id"] = _run_id(
        {"command": command, "config": payload["config"], "seed": seed}
    )
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_corpus(corpus_dir: Path):
    entries = dsp.read_manifest(corpus_dir / "manifest.tsv")
    tracks_path = corpus_dir / "segments.tsv"
    tracks = dsp.read_segment_tracks(tracks_path) if tracks_path.exists() else {}
    return entries, tracks


def cmd_plan(args) -> int:
    p = (
        canonical_plan(args.rate)
        if args.rate in CANONICAL_RATES and args.frame_shift == 0.02
        else derive_plan(args.rate, frame_shift_s=args.frame_shift)
    )
    violations = validate_plan(p)
    rf = receptive_field(p)
    if args.json:
        out = p.to_dict()
        out["receptive_field_samples"] = rf.samples
        out["receptive_field_ms"] = rf.ms
        out["valid"] = not violations
        out["violations"] = violations
        print(json.dumps(out, indent=2))
    else:
        print(f"rate_hz: {p.rate_hz}")
        print(f"dr: {p.dr}")
        print(f"strides: {','.join(str(s) for s in p.strides)}")
        print(f"kernels: {','.join(str(k) for k in p.kernels)}")
        print(f"receptive_field: {rf.samples} samples = {rf.ms:.2f} ms")
        print(f"frames_per_second_of_audio: {frame_count(p, p.rate_hz)}")
        print("VALID" if not violations else "INVALID: " + "; ".join(violations))
    return 0 if not violations else 1


def cmd_gen_corpus(args) -> int:
    spec = dsp.parse_corpus_spec(Path(args.spec).read_text())
    rates = tuple(int(r) for r in args.rates.split(","))
    out_dir = Path(args.out)
    entries, tracks = dsp.generate_corpus(spec, out_dir, rates=rates, workers=_workers())
    dsp.write_manifest(out_dir / "manifest.tsv", entries)
    dsp.write_segment_tracks(out_dir / "segments.tsv", tracks)
    _write_run_manifest(out_dir, "gen-corpus", args.spec, spec.seed)
    print(f"wrote {len(entries)} wavs at rates {rates} under {out_dir}")
    return 0


def cmd_labels(args) -> int:
    corpus_dir = Path(args.corpus)
    entries, _ = _load_corpus(corpus_dir)
    per_utt = {}
    pool = []
    for e in entries:
        feats = dsp.mfcc(dsp.read_wav(corpus_dir / e.path))
        per_utt[e.utt_id] = feats.frames
        pool.append(feats.frames)
    codebook = kmeans_fit(
        np.vstack(pool), args.k, max_iters=args.max_iters, seed=args.seed,
        embed_dim=args.embed_dim,
    )
    labels = {uid: assign_labels(f, codebook) for uid, f in per_utt.items()}
    write_codebook(corpus_dir / "codebook.bin", codebook)
    write_label_sidecar(corpus_dir / "labels.tsv", labels)
    _write_run_manifest(corpus_dir, "labels", None, args.seed)
    print(f"codebook.bin (K={args.k}) and labels.tsv for {len(labels)} utterances")
    return 0


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    mcfg = ModelConfig.from_dict(raw.get("model", {})) if raw.get("model") else ModelConfig()
    tdict = raw.get("train", {})
    if args.steps is not None:
        tdict["total_steps"] = args.steps
    if args.seed is not None:
        tdict["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tdict)
    if set(tcfg.rate_weights) != set(mcfg.rates):
        tcfg.rate_weights = {r: 1.0 / len(mcfg.rates) for r in mcfg.rates}
    return mcfg, tcfg


def cmd_pretrain(args) -> int:
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries, _ = _load_corpus(corpus_dir)
    labels = read_label_sidecar(corpus_dir / "labels.tsv")
    codebook = read_codebook(corpus_dir / "codebook.bin")
    mcfg, tcfg = _train_configs(args)
    model = PretrainModel.build(mcfg, codebook, seed=tcfg.seed)
    trainer = Trainer(model, tcfg, labels, corpus_dir)
    history = trainer.run(entries, metrics_path=out_dir / "metrics.csv")
    save_checkpoint(out_dir / "checkpoint.msrh", model, trainer.adam, trainer.step, tcfg)
    _write_run_manifest(out_dir, "pretrain", args.config, tcfg.seed)
    first = np.mean([h["loss"] for h in history[:10]])
    last = np.mean([h["loss"] for h in history[-10:]])
    print(
        f"{trainer.step} steps; smoothed loss {first:.4f} -> {last:.4f}; "
        f"checkpoint at {out_dir / 'checkpoint.msrh'}"
    )
    return 0


def cmd_probe(args) -> int:
    corpus_dir = Path(args.corpus)
    out_dir = Path(args.out) if args.out else corpus_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    entries, tracks = _load_corpus(corpus_dir)
    if not tracks:
        raise MsrSpeechError(f"{corpus_dir}/segments.tsv is required for probing")
    rates = [args.rate] if args.rate else sorted(
        {e.rate_hz for e in entries} & set(model.frontend.rates)
    )
    rows = []
    for rate in rates:
        mismatch_branch = args.branch_rate if args.mismatch else None
        result = probe_train(
            model, corpus_dir, entries, tracks, rate,
            epochs=args.epochs, seed=args.seed, mismatch_branch=mismatch_branch,
        )
        mode = f"mismatch-{args.branch_rate}" if args.mismatch else "matched"
        rows.append(
            {"model": str(args.checkpoint), "rate": rate, "mode": mode,
             "accuracy": f"{result.accuracy:.2f}"}
        )
        (out_dir / f"layer_weights_{rate}_{mode}.json").write_text(
            json.dumps(layer_weight_report(result), indent=2) + "\n"
        )
        if args.mismatch:
            branch = model.frontend.branch_for(args.branch_rate)
            rep = mismatch_report(branch.plan, rate)
            print(
                f"rate {rate}: effective shift {rep.effective_frame_shift_ms:.3f} ms, "
                f"frame ratio {rep.frame_count_ratio:.3f}"
            )
        print(f"rate {rate} ({mode}): accuracy {result.accuracy:.2f}")
    results_path = out_dir / "probe_results.csv"
    fresh = not results_path.exists()
    with open(results_path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["model", "rate", "mode", "accuracy"])
        if fresh:
            writer.writeheader()
        writer.writerows(rows)
    _write_run_manifest(out_dir, "probe", None, args.seed)
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    summary: dict = {"run_dir": str(run_dir)}

    summary["alignment"] = [
        {
            "rate_hz": rate,
            "frames_for_1s": frame_count(canonical_plan(rate), rate),
            "receptive_field_ms": receptive_field(canonical_plan(rate)).ms,
        }
        for rate in CANONICAL_RATES
    ]
    base = overhead_report()
    summary["overhead"] = {
        "marginal_percent_per_added_rate": base["marginal_percent_per_added_rate"],
        "branches": base["branches"],
    }

    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        with open(metrics_path) as f:
            rows = list(csv.DictReader(f))
        losses = [float(r["loss"]) for r in rows]
        summary["training"] = {
            "steps": len(rows),
            "initial_loss_mean10": float(np.mean(losses[:10])) if losses else None,
            "final_loss_mean10": float(np.mean(losses[-10:])) if losses else None,
        }
    probe_path = run_dir / "probe_results.csv"
    if probe_path.exists():
        with open(probe_path) as f:
            summary["probes"] = list(csv.DictReader(f))

    out_path = run_dir / "summary.json"
    out_path.write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msrspeech",
        description="Multi-sampling-rate masked-prediction pre-training, desk scale.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("plan", help="show the downsampling plan for a rate",
                       formatter_class=fmt)
    p.add_argument("--rate", type=int, required=True, help="sampling rate in Hz")
    p.add_argument("--frame-shift", type=float, default=0.02, dest="frame_shift",
                   help="frame shift in seconds")
    p.add_argument("--json", action="store_true", help="emit JSON")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gen-corpus", help="synthesize a rate-parallel corpus",
                       formatter_class=fmt)
    p.add_argument("--spec", required=True, help="key=value generation spec file")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--rates", default=",".join(str(r) for r in CANONICAL_RATES),
                   help="comma-separated sampling rates")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("labels", help="fit the shared codebook and label the corpus",
                       formatter_class=fmt)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--k", type=int, default=16, help="number of clusters")
    p.add_argument("--embed-dim", type=int, default=16, dest="embed_dim",
                   help="label embedding width")
    p.add_argument("--max-iters", type=int, default=50, dest="max_iters",
                   help="k-means iteration cap")
    p.add_argument("--seed", type=int, default=7, help="clustering seed")
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("pretrain", help="run mixed-rate masked-prediction training",
                       formatter_class=fmt)
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--config", default=None, help="JSON config with model/train sections")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--steps", type=int, default=None, help="override total steps")
    p.add_argument("--seed", type=int, default=None, help="override training seed")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="frozen-backbone frame classification probe",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--rate", type=int, default=None, help="probe one rate only")
    p.add_argument("--mismatch", action="store_true",
                   help="feed audio through --branch-rate without resampling")
    p.add_argument("--branch-rate", type=int, default=16000, dest="branch_rate",
                   help="branch used in mismatch mode")
    p.add_argument("--epochs", type=int, default=20, help="probe training epochs")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.add_argument("--out", default=None, help="output directory (default: corpus)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="consolidated JSON summary of a run directory",
                       formatter_class=fmt)
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (MsrSpeechError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
