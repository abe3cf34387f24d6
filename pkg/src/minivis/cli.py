"""Command-line entry points: gen-data, train, infer, eval, overlay."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .config import Config, ConfigError, load_config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minivis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic video dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="flat key=value config file")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory for checkpoints and the loss CSV")
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("infer", help="run the full pipeline and write predictions JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--config", default=None)

    p = sub.add_parser("eval", help="evaluate predictions against dataset ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")

    p = sub.add_parser("overlay", help="render per-frame composites with per-id colors")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _load_cfg(path: Optional[str]) -> Config:
    if path is None:
        return Config()
    if not Path(path).exists():
        raise FileNotFoundError(f"no config file at {path}")
    return load_config(path)


def _cmd_gen_data(args) -> int:
    from .data import generate_video
    from .io import write_dataset

    cfg = _load_cfg(args.config)
    samples = [generate_video(args.seed + k, cfg.gen) for k in range(args.videos)]
    ids = write_dataset(args.out, samples)
    print(f"wrote {len(ids)} videos to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .io import read_dataset
    from .train import fit

    cfg = _load_cfg(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    videos = read_dataset(args.data)
    result = fit(videos, cfg.model, cfg.train, args.out, resume=args.resume)
    last = result.records[-1] if result.records else None
    if last is not None:
        print(
            f"finished step {last.step}: loss_all={last.loss_all:.4f} "
            f"(cls={last.loss_cls:.4f} cent={last.loss_cent:.4f} box={last.loss_box:.4f} "
            f"mask={last.loss_mask:.4f} track={last.loss_track:.4f})"
        )
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_infer(args) -> int:
    from .infer import run_video
    from .io import load_checkpoint, model_from_checkpoint, read_dataset, track_records, write_predictions

    cfg = _load_cfg(args.config)
    payload = load_checkpoint(args.checkpoint)
    model, _ = model_from_checkpoint(payload)
    videos = read_dataset(args.data)
    records = []
    total_skipped = 0
    for video in videos:
        results, skipped = run_video(model, video.frames, cfg.infer, return_skipped=True)
        total_skipped += skipped
        records.extend(track_records(video.video_id, results))
    write_predictions(args.out, records)
    msg = f"wrote {len(records)} track predictions to {args.out}"
    if total_skipped:
        msg += f" ({total_skipped} detections skipped: box below mask stride)"
    print(msg)
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .io import (
        format_metrics_table,
        gt_to_tracks,
        predictions_to_tracks,
        read_dataset,
        read_predictions,
        write_metrics,
    )

    videos = read_dataset(args.data)
    records = read_predictions(args.predictions)
    sizes = {v.video_id: (v.frames.shape[1], v.frames.shape[2]) for v in videos}
    preds = predictions_to_tracks(records, sizes)
    gts = gt_to_tracks(videos)
    metrics = evaluate(preds, gts)
    print(format_metrics_table(metrics))
    if args.out is not None:
        write_metrics(args.out, metrics)
        print(f"metrics written to {args.out}")
    return 0


def _cmd_overlay(args) -> int:
    from .infer import TrackResult
    from .io import read_dataset, read_predictions
    from .overlay import render_overlays
    from .rle import RleMask, rle_decode

    videos = read_dataset(args.data)
    records = read_predictions(args.predictions)
    out_root = Path(args.out)
    total = 0
    for video in videos:
        h = video.frames.shape[1]
        tracks = []
        for rec in (r for r in records if r["video_id"] == video.video_id):
            masks, stride = [], 1
            for seg in rec["segmentations"]:
                if seg is None:
                    masks.append(None)
                else:
                    m = rle_decode(RleMask.from_json(seg))
                    stride = max(1, h // m.shape[0])
                    masks.append(m)
            tracks.append(
                TrackResult(
                    track_id=rec["instance_id"],
                    class_id=rec["class_id"],
                    score=rec["score"],
                    masks=masks,
                    centers=rec["centers"],
                    mask_stride=stride,
                )
            )
        paths = render_overlays(video.frames, tracks, out_root / video.video_id)
        total += len(paths)
    print(f"wrote {total} overlay frames to {out_root}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "overlay": _cmd_overlay,
}


def run_command(argv: List[str]) -> int:
    """Parse argv and dispatch; returns a process exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # surfaced with type for debuggability
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
