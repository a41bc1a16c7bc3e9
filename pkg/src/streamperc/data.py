"""Streaming datasets: COCO-style ingestion, training triplets, speed
re-sampling and prediction dumps.
"""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from .geometry import BBox, Detection, GroundTruthBox, InvalidInputError


class DatasetError(ValueError):
    """Raised when a dataset file is missing or malformed."""


@dataclass(frozen=True)
class Frame:
    frame_index: int
    timestamp: float
    image_size: tuple[int, int]
    gt: tuple[GroundTruthBox, ...] = ()


@dataclass(frozen=True)
class VideoStream:
    video_id: str
    fps: float
    frames: tuple[Frame, ...]

    def __post_init__(self):
        if self.fps <= 0:
            raise DatasetError(f"fps must be positive, got {self.fps}")
        if not self.frames:
            raise DatasetError(f"video {self.video_id!r} has no frames")
        for i, f in enumerate(self.frames):
            if f.frame_index != i:
                raise DatasetError(
                    f"video {self.video_id!r}: frame indices must run 0..n-1, "
                    f"found {f.frame_index} at position {i}")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DatasetError(f"video {self.video_id!r}: timestamps must strictly increase")

    def __len__(self):
        return len(self.frames)

    @property
    def frame_interval(self) -> float:
        return 1.0 / self.fps


@dataclass(frozen=True)
class Triplet:
    """Training unit: two input frames and the supervising ground truth."""
    prev: Frame
    cur: Frame
    target_gt: tuple[GroundTruthBox, ...]
    target_index: int


# (video_id, frame_index) -> detections
PredictionDump = dict[tuple[str, int], list[Detection]]


def build_triplets(stream: VideoStream) -> list[Triplet]:
    """``(F[t-1], F[t], G[t+1])`` for t = 1 .. n-2."""
    f = stream.frames
    return [Triplet(f[t - 1], f[t], f[t + 1].gt, t + 1) for t in range(1, len(f) - 1)]


def resample_speed(stream: VideoStream, factor: int) -> list[Triplet]:
    """Triplets simulating a static (0), normal (1) or doubled (2) motion speed.

    0: ``(F[t], F[t], G[t])`` for every frame.
    1: same as :func:`build_triplets`.
    2: ``(F[t-2], F[t], G[t+2])`` for t = 2 .. n-3.
    """
    f = stream.frames
    if factor == 0:
        return [Triplet(fr, fr, fr.gt, fr.frame_index) for fr in f]
    if factor == 1:
        return build_triplets(stream)
    if factor == 2:
        return [Triplet(f[t - 2], f[t], f[t + 2].gt, t + 2) for t in range(2, len(f) - 2)]
    raise ValueError(f"unsupported speed factor {factor!r}; expected 0, 1 or 2")


def subsample_stream(stream: VideoStream, step: int) -> VideoStream:
    """Keep every ``step``-th frame and re-time the result at the original fps.

    Objects then move ``step`` times faster per frame, which is how a 2x
    speed stream is produced from recorded data.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    kept = stream.frames[::step]
    frames = tuple(
        replace(fr, frame_index=i, timestamp=i / stream.fps) for i, fr in enumerate(kept))
    return VideoStream(stream.video_id, stream.fps, frames)


# ---------------------------------------------------------------- COCO I/O

def _box_from_record(rec: Mapping, where: str) -> BBox:
    try:
        if "bbox_xyxy" in rec:
            return BBox(*map(float, rec["bbox_xyxy"]))
        x, y, w, h = map(float, rec["bbox"])
        return BBox.from_xywh(x, y, w, h)
    except (InvalidInputError, TypeError, ValueError, KeyError) as exc:
        raise DatasetError(f"{where}: bad bbox ({exc})") from exc


def _box_record(box: BBox) -> dict:
    # bbox_xyxy keeps corners bit-exact; x + (x2 - x1) does not always round back to x2
    return {"bbox": box.to_xywh(), "bbox_xyxy": list(box.as_tuple())}


def load_stream_dataset(path: str | os.PathLike) -> list[VideoStream]:
    """Read a COCO-style streaming annotation file.

    Images need ``video_id`` and ``frame_index``; annotations carry
    ``bbox`` as ``[x, y, w, h]`` and may carry ``track_id``. Per-video fps is
    read from an optional top-level ``videos`` list (default 30). Frames
    without annotations are kept with an empty ground-truth list.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"dataset file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc or "annotations" not in doc:
        raise DatasetError(f"{path}: expected an object with 'images' and 'annotations'")

    fps_by_video = {str(v["id"]): float(v.get("fps", 30.0)) for v in doc.get("videos", [])}

    images = {}
    for img in doc["images"]:
        try:
            images[img["id"]] = (str(img["video_id"]), int(img["frame_index"]),
                                 (int(img["width"]), int(img["height"])), img.get("timestamp"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: image record {img!r} is missing fields ({exc})") from exc

    gts = defaultdict(list)
    for k, ann in enumerate(doc["annotations"]):
        where = f"{path}: annotation #{k}"
        if ann.get("image_id") not in images:
            raise DatasetError(f"{where}: unknown image_id {ann.get('image_id')!r}")
        box = _box_from_record(ann, where)
        tid = ann.get("track_id")
        try:
            gt = GroundTruthBox(box, int(ann["category_id"]), None if tid is None else int(tid))
        except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from exc
        gts[ann["image_id"]].append(gt)

    by_video = defaultdict(list)
    for image_id, (vid, fidx, size, ts) in images.items():
        by_video[vid].append((fidx, size, ts, image_id))

    streams = []
    for vid in sorted(by_video):
        fps = fps_by_video.get(vid, 30.0)
        entries = sorted(by_video[vid])
        idx = [e[0] for e in entries]
        if idx != list(range(len(idx))):
            raise DatasetError(f"{path}: video {vid!r} has non-contiguous frame indices {idx}")
        frames = []
        for fidx, size, ts, image_id in entries:
            track_ids = [g.track_id for g in gts[image_id] if g.track_id is not None]
            if len(track_ids) != len(set(track_ids)):
                raise DatasetError(f"{path}: duplicate track_id in video {vid!r} frame {fidx}")
            frames.append(Frame(fidx, fidx / fps if ts is None else float(ts), size,
                                tuple(gts[image_id])))
        streams.append(VideoStream(vid, fps, tuple(frames)))
    return streams


def save_stream_dataset(streams: Iterable[VideoStream], path: str | os.PathLike) -> None:
    """Write streams in the format read by :func:`load_stream_dataset`."""
    images, annotations, videos, cats = [], [], [], set()
    for s in streams:
        videos.append({"id": s.video_id, "fps": s.fps})
        for fr in s.frames:
            image_id = len(images)
            w, h = fr.image_size
            images.append({
                "id": image_id,
                "file_name": f"{s.video_id}/{fr.frame_index:06d}.jpg",
                "width": w, "height": h,
                "video_id": s.video_id,
                "frame_index": fr.frame_index,
                "timestamp": fr.timestamp,
            })
            for g in fr.gt:
                cats.add(g.category)
                ann = {"id": len(annotations), "image_id": image_id,
                       "category_id": g.category, "area": g.box.area, **_box_record(g.box)}
                if g.track_id is not None:
                    ann["track_id"] = g.track_id
                annotations.append(ann)
    doc = {
        "videos": videos,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c, "name": str(c)} for c in sorted(cats)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ------------------------------------------------------------ predictions

def save_predictions(dump: PredictionDump, path: str | os.PathLike) -> None:
    """Write detections as a JSON array of per-box records.

    Floats are written with ``repr`` precision (17 significant digits), so
    loading returns the identical dump.
    """
    records = []
    for (vid, fidx) in sorted(dump, key=lambda k: (str(k[0]), k[1])):
        for d in dump[(vid, fidx)]:
            records.append({"video_id": vid, "frame_index": fidx,
                            **_box_record(d.box),
                            "category_id": d.category, "score": d.score})
    with open(path, "w") as fh:
        json.dump(records, fh)


def load_predictions(path: str | os.PathLike,
                     streams: Iterable[VideoStream] | None = None) -> PredictionDump:
    """Inverse of :func:`save_predictions`; validates against ``streams`` if given."""
    try:
        with open(path) as fh:
            records = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"predictions file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(records, list):
        raise DatasetError(f"{path}: predictions must be a JSON array")
    dump: PredictionDump = {}
    for k, rec in enumerate(records):
        where = f"{path}: prediction #{k}"
        try:
            key = (str(rec["video_id"]), int(rec["frame_index"]))
            det = Detection(_box_from_record(rec, where), int(rec["category_id"]),
                            float(rec["score"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: schema mismatch ({exc})") from exc
        dump.setdefault(key, []).append(det)
    if streams is not None:
        validate_predictions(dump, streams)
    return dump


def validate_predictions(dump: PredictionDump, streams: Iterable[VideoStream]) -> None:
    known = {(s.video_id, f.frame_index) for s in streams for f in s.frames}
    orphans = sorted(k for k in dump if k not in known)
    if orphans:
        raise DatasetError(f"predictions reference frames absent from the dataset: {orphans[:5]}")
