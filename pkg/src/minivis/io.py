"""On-disk formats: dataset directories, predictions, metrics, checkpoints.

All JSON documents carry a ``schema_version`` field. Datasets are one
directory per video holding lossless PNG frames plus an annotations JSON
with full-resolution RLE masks. Predictions are a single JSON document with
per-track, per-frame RLE masks at the mask stride and center points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .data import GtInstance, VideoSample
from .rle import RleFormatError, RleMask, rle_decode, rle_encode

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """Document does not match the expected schema."""


@dataclass
class LoadedVideo:
    video_id: str
    frames: np.ndarray  # (T, H, W, 3) float32
    annotations: List[List[GtInstance]]
    fps: float
    seed: int


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(root, samples: Sequence[VideoSample]) -> List[str]:
    """Write videos as PNG frames + annotations JSON; returns video ids."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    ids = []
    for v, sample in enumerate(samples):
        video_id = f"video_{v:04d}"
        ids.append(video_id)
        vdir = root / video_id
        vdir.mkdir(exist_ok=True)
        h, w = sample.size
        frame_names = []
        for t in range(sample.num_frames):
            name = f"frame_{t:04d}.png"
            frame_names.append(name)
            img = np.clip(np.round(sample.frames[t] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(vdir / name)
        frames_ann = []
        for anns in sample.annotations:
            frames_ann.append(
                [
                    {
                        "id": a.id,
                        "class_id": a.class_id,
                        "box": [float(x) for x in a.box],
                        "center": [float(x) for x in a.center],
                        "mask": rle_encode(a.mask).to_json(),
                    }
                    for a in anns
                ]
            )
        doc = {
            "schema_version": SCHEMA_VERSION,
            "video_id": video_id,
            "width": w,
            "height": h,
            "fps": sample.fps,
            "seed": sample.seed,
            "frames": frame_names,
            "annotations": frames_ann,
        }
        (vdir / "annotations.json").write_text(json.dumps(doc, sort_keys=True))
        index.append({"video_id": video_id, "dir": video_id, "num_frames": sample.num_frames, "width": w, "height": h})
    (root / "dataset.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "videos": index}, sort_keys=True, indent=2)
    )
    return ids


def read_dataset(root) -> List[LoadedVideo]:
    root = Path(root)
    index_path = root / "dataset.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    _require(index, "schema_version", index_path)
    videos = []
    for entry in index["videos"]:
        vdir = root / entry["dir"]
        doc = json.loads((vdir / "annotations.json").read_text())
        h, w = doc["height"], doc["width"]
        frames = np.stack(
            [np.asarray(Image.open(vdir / name), dtype=np.float32) / 255.0 for name in doc["frames"]]
        )
        annotations = []
        for frame_anns in doc["annotations"]:
            insts = []
            for a in frame_anns:
                mask = rle_decode(RleMask.from_json(a["mask"]))
                if mask.shape != (h, w):
                    raise FormatError(f"mask shape {mask.shape} != video size {(h, w)}")
                insts.append(
                    GtInstance(
                        id=int(a["id"]),
                        class_id=int(a["class_id"]),
                        box=tuple(float(x) for x in a["box"]),
                        mask=mask,
                        center=tuple(float(x) for x in a["center"]),
                    )
                )
            annotations.append(insts)
        videos.append(
            LoadedVideo(
                video_id=doc["video_id"],
                frames=frames,
                annotations=annotations,
                fps=float(doc["fps"]),
                seed=int(doc["seed"]),
            )
        )
    return videos


def _require(obj: dict, key: str, where) -> None:
    if key not in obj:
        raise FormatError(f"{where}: missing required key {key!r}")


# ---------------------------------------------------------------------------
# predictions


def write_predictions(path, records: List[dict]) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "predictions": records}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def validate_predictions(doc: dict, where="predictions") -> List[dict]:
    """Schema-check a predictions document; returns the record list."""
    _require(doc, "schema_version", where)
    _require(doc, "predictions", where)
    records = doc["predictions"]
    if not isinstance(records, list):
        raise FormatError(f"{where}: 'predictions' must be a list")
    for k, rec in enumerate(records):
        for key in ("video_id", "instance_id", "class_id", "score", "segmentations", "centers"):
            if key not in rec:
                raise FormatError(f"{where}[{k}]: missing key {key!r}")
        if not isinstance(rec["score"], (int, float)) or not (0.0 <= rec["score"] <= 1.0):
            raise FormatError(f"{where}[{k}]: score must be in [0, 1]")
        if len(rec["segmentations"]) != len(rec["centers"]):
            raise FormatError(f"{where}[{k}]: segmentations and centers lengths differ")
        for seg in rec["segmentations"]:
            if seg is not None:
                RleMask.from_json(seg)
        for ctr in rec["centers"]:
            if ctr is not None and len(ctr) != 2:
                raise FormatError(f"{where}[{k}]: center must be [x, y]")
    return records


def read_predictions(path) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no predictions file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON ({e})") from None
    try:
        return validate_predictions(doc, where=str(path))
    except RleFormatError as e:
        raise FormatError(f"{path}: bad mask payload ({e})") from None


def track_records(video_id: str, results) -> List[dict]:
    """TrackResult list -> predictions JSON records for one video."""
    records = []
    for r in results:
        records.append(
            {
                "video_id": video_id,
                "instance_id": int(r.track_id),
                "class_id": int(r.class_id),
                "score": float(r.score),
                "segmentations": [None if m is None else rle_encode(m).to_json() for m in r.masks],
                "centers": [None if c is None else [float(c[0]), float(c[1])] for c in r.centers],
            }
        )
    return records


def predictions_to_tracks(records: List[dict], video_sizes: Dict[str, Tuple[int, int]]):
    """Prediction records -> evaluator Tracks with full-resolution masks."""
    from .evaluate import Track
    from .infer import upsample_mask

    tracks = []
    for rec in records:
        if rec["video_id"] not in video_sizes:
            raise FormatError(f"prediction references unknown video {rec['video_id']!r}")
        h, w = video_sizes[rec["video_id"]]
        masks: List[Optional[np.ndarray]] = []
        for seg in rec["segmentations"]:
            if seg is None:
                masks.append(None)
                continue
            m = rle_decode(RleMask.from_json(seg))
            if m.shape != (h, w):
                if h % m.shape[0] != 0 or w % m.shape[1] != 0:
                    raise FormatError(
                        f"mask size {m.shape} does not divide video size {(h, w)}"
                    )
                m = upsample_mask(m, h // m.shape[0], (h, w))
            masks.append(m)
        tracks.append(
            Track(
                video_id=rec["video_id"],
                track_id=int(rec["instance_id"]),
                class_id=int(rec["class_id"]),
                score=float(rec["score"]),
                masks=masks,
            )
        )
    return tracks


def gt_to_tracks(videos: Sequence[LoadedVideo]):
    """Ground-truth annotations -> evaluator Tracks (score 1.0)."""
    from .evaluate import Track

    tracks = []
    for video in videos:
        t_total = video.frames.shape[0]
        by_id: Dict[int, dict] = {}
        for t, anns in enumerate(video.annotations):
            for a in anns:
                entry = by_id.setdefault(
                    a.id, {"class_id": a.class_id, "masks": [None] * t_total}
                )
                entry["masks"][t] = a.mask
        for track_id in sorted(by_id):
            entry = by_id[track_id]
            tracks.append(
                Track(
                    video_id=video.video_id,
                    track_id=track_id,
                    class_id=entry["class_id"],
                    score=1.0,
                    masks=entry["masks"],
                )
            )
    return tracks


# ---------------------------------------------------------------------------
# metrics


def write_metrics(path, metrics: Dict[str, float]) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "metrics": {k: float(v) for k, v in metrics.items()}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2))


def format_metrics_table(metrics: Dict[str, float]) -> str:
    keys = ["AP", "AP@0.5", "AP@0.75", "AR@1", "AR@10"]
    header = " | ".join(f"{k:>7s}" for k in keys)
    values = " | ".join(f"{metrics[k]:7.4f}" for k in keys)
    rule = "-" * len(header)
    return f"{header}\n{rule}\n{values}"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, model_cfg, train_cfg=None, optimizer=None, step: int = 0) -> None:
    """Flat named-parameter map with shape metadata plus optimizer state."""
    from dataclasses import asdict

    state = model.state_dict()
    payload = {
        "schema_version": SCHEMA_VERSION,
        "step": int(step),
        "model_state": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "model_config": asdict(model_cfg),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("schema_version", "model_state", "shapes", "model_config"):
        if key not in payload:
            raise FormatError(f"{path}: missing checkpoint key {key!r}")
    for name, shape in payload["shapes"].items():
        if list(payload["model_state"][name].shape) != shape:
            raise FormatError(f"{path}: shape metadata mismatch for {name}")
    return payload


def model_from_checkpoint(payload: dict):
    from .config import ModelConfig
    from .model import VisModel

    cfg_dict = dict(payload["model_config"])
    cfg_dict["level_ranges"] = tuple(tuple(r) for r in cfg_dict["level_ranges"])
    cfg = ModelConfig(**cfg_dict)
    model = VisModel(cfg)
    model.load_state_dict(payload["model_state"])
    return model, cfg
