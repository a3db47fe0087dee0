"""Command-line entry point: ``avsqa synth|train|eval|predict|dump-attention``.

Every command takes ``--config FILE``, ``--seed N``, ``--out PATH`` and any
number of trailing ``section.key=value`` overrides. The resolved configuration
is echoed to ``run_config.json`` next to the outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, datagen, dsp, oracle, trainer
from .config import RunConfig, load_run_config
from .model import ConfigError

log = logging.getLogger("avsqa")

EXPECTED_ERRORS = (ConfigError, datagen.CorpusError, dsp.SignalError, oracle.LabelError,
                   trainer.TrainingError, OSError, KeyError, ValueError)


class OutputError(RuntimeError):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write-test"
    probe.write_bytes(b"")
    probe.unlink()
    return out


def _echo(out: Path, cfg: RunConfig):
    (out / "run_config.json").write_text(cfg.to_json(), encoding="utf-8")


def _write_matrix(path: Path, matrix: np.ndarray, prefix: str):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"{prefix}{j}" for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo(out, cfg)
    labels = oracle.ingest_external_labels(args.labels) if args.labels else None
    summary = datagen.build_corpus(cfg.corpus, out, external_labels=labels)
    n = len(datagen.read_manifest(out / "manifest.jsonl"))
    if n != summary["total"]:
        raise OutputError(f"manifest has {n} records, summary reports {summary['total']}")
    shown = {k: summary[k] for k in ("total", "counts", "n_seen_noises", "n_unseen_noises")}
    print(json.dumps(shown, indent=2, sort_keys=True))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo(out, cfg)
    trainer.train(cfg.model, cfg.train, args.manifest, out_dir=out, resume_from=args.resume)
    best = trainer.Checkpoint.load(out / "best.ckpt")
    if not (out / "metrics.csv").exists():
        raise OutputError("metrics.csv missing")
    print(f"best epoch {best.epoch}, val loss {best.best_val_loss:.6f}")
    print(out / "best.ckpt")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo(out, cfg)
    ck = trainer.Checkpoint.load(args.checkpoint)
    summary = trainer.evaluate(ck, args.manifest, subset=args.subset)
    tasks = ck.build_model().cfg.task_names
    trainer.write_summary_csv(out / "summary.csv", summary)
    trainer.write_predictions_csv(out / "predictions.csv", summary, tasks)
    rows = trainer.read_predictions_csv(out / "predictions.csv")
    if len(rows) != len(summary.predictions):
        raise OutputError("per-utterance CSV is incomplete")
    for c in summary.to_rows():
        print(f"{c.condition:6s} {c.source:8s} {c.task:15s} lcc {c.lcc:.4f} srcc {c.srcc:.4f} "
              f"mse {c.mse:.5f} n {c.n}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo(out, cfg)
    ck = trainer.Checkpoint.load(args.checkpoint)
    res = trainer.predict(ck, args.wav, args.video)
    tasks = ck.build_model().cfg.task_names
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "predicted_raw", "predicted_clamped"])
        for t in tasks:
            lo, hi = trainer.CLAMP[t]
            w.writerow([t, repr(res[t]), repr(float(np.clip(res[t], lo, hi)))])
    frames = np.stack([res[f"{t}_frames"] for t in tasks], axis=1)
    with open(out / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + list(tasks))
        for i, row in enumerate(frames):
            w.writerow([i] + [repr(float(v)) for v in row])
    for t in tasks:
        _write_matrix(out / f"attention_{t}.csv", res[f"{t}_attention"], "key")
        print(f"{t} {res[t]:.4f}")
    return 0


def cmd_dump_attention(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    _echo(out, cfg)
    ck = trainer.Checkpoint.load(args.checkpoint)
    root = Path(args.manifest).parent
    rec = {r.utterance_id: r for r in datagen.read_manifest(args.manifest)}.get(args.utterance_id)
    if rec is None:
        raise KeyError(f"utterance {args.utterance_id!r} not in manifest")
    video = root / rec.video_path if ck.modality == "multimodal" else None
    res = trainer.predict(ck, root / rec.degraded_path, video)
    n_frames = dsp.n_frames(len(dsp.read_wav(root / rec.degraded_path)))
    for t in ck.build_model().cfg.task_names:
        att = res[f"{t}_attention"]
        if att.shape != (n_frames, n_frames) or not np.allclose(att.sum(axis=1), 1.0, atol=1e-6):
            raise OutputError(f"attention for {t} is not a {n_frames}x{n_frames} row-stochastic matrix")
        _write_matrix(out / f"attention_{t}.csv", att, "key")
        _write_matrix(out / f"latent_{t}.csv", res[f"{t}_latent"], "h")
        print(f"{t}: {n_frames} frames, score {res[t]:.4f}")
    return 0


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsqa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"avsqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys, e.g. {\"train.learning_rate\": 1e-4}")
    common.add_argument("--seed", type=int, help="sets corpus.master_seed and train.seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    p = sub.add_parser("synth", parents=[common], help="build a synthetic corpus")
    p.add_argument("--labels", help="JSONL of external {utterance_id, pesq, stoi} labels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=("audio_only", "multimodal"))
    p.add_argument("--mode", choices=sorted(trainer.MODES))
    p.add_argument("--resume", help="last.ckpt of an interrupted run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subset", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="score one utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--video", help="PGM frame directory (required for multimodal checkpoints)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("dump-attention", parents=[common], help="export attention weights and latents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--utterance-id", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "modality", None):
            overrides.append(f"train.modality={args.modality}")
        if getattr(args, "mode", None):
            overrides.append(f"train.mode={args.mode}")
        cfg = load_run_config(args.config, overrides, args.seed)
        return args.func(args, cfg)
    except (*EXPECTED_ERRORS, OutputError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"avsqa {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
