"""Synthetic constant-velocity scenes and a noisy mock detector.

Randomness uses NumPy's ``Generator`` over the PCG64 bit generator, seeded
through ``numpy.random.SeedSequence``. PCG64 output is identical across
platforms, so a (config, seed) pair reproduces bit-identical streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Frame, VideoStream
from .geometry import BBox, Detection, GroundTruthBox


@dataclass(frozen=True)
class MovingObject:
    center0: tuple[float, float]
    velocity: tuple[float, float]
    size: tuple[float, float]
    category: int = 0
    spawn: int = 0
    despawn: Optional[int] = None  # exclusive

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError(f"object size must be positive, got {self.size}")

    def alive(self, t: int) -> bool:
        return t >= self.spawn and (self.despawn is None or t < self.despawn)

    def center(self, t: int) -> tuple[float, float]:
        return (self.center0[0] + t * self.velocity[0], self.center0[1] + t * self.velocity[1])


@dataclass(frozen=True)
class RandomSpawn:
    """Parameters for drawing objects at random instead of listing them."""
    n_objects: int = 5
    size_range: tuple[float, float] = (40.0, 120.0)
    speed_range: tuple[float, float] = (0.0, 4.0)
    n_categories: int = 2
    keep_in_frame: bool = True


@dataclass(frozen=True)
class SceneConfig:
    frame_count: int = 60
    fps: float = 30.0
    image_size: tuple[int, int] = (960, 600)
    objects: Optional[tuple[MovingObject, ...]] = None
    spawn: RandomSpawn = field(default_factory=RandomSpawn)
    rng_seed: int = 0
    video_id: str = "synthetic"

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.frame_count < 1:
            raise ValueError(f"frame_count must be >= 1, got {self.frame_count}")


@dataclass(frozen=True)
class MockDetectorConfig:
    coordinate_noise_sigma: float = 0.0
    drop_probability: float = 0.0
    score_model: str = "constant"  # or "noise"
    constant_score: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.coordinate_noise_sigma < 0:
            raise ValueError("coordinate_noise_sigma must be >= 0")
        if not 0.0 <= self.drop_probability < 1.0:
            raise ValueError("drop_probability must lie in [0, 1)")
        if self.score_model not in ("constant", "noise"):
            raise ValueError(f"unknown score_model {self.score_model!r}")


def _random_objects(cfg: SceneConfig) -> tuple[MovingObject, ...]:
    sp = cfg.spawn
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0]))
    W, H = cfg.image_size
    span = cfg.frame_count - 1
    objs = []
    for _ in range(sp.n_objects):
        w, h = rng.uniform(*sp.size_range, size=2)
        speed = rng.uniform(*sp.speed_range)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        if sp.keep_in_frame:
            # center range that keeps the whole box inside for every frame
            lo_x = w / 2 - min(0.0, vx * span)
            hi_x = W - w / 2 - max(0.0, vx * span)
            lo_y = h / 2 - min(0.0, vy * span)
            hi_y = H - h / 2 - max(0.0, vy * span)
            if hi_x < lo_x or hi_y < lo_y:
                raise ValueError("scene too small to keep objects in frame; "
                                 "reduce speed_range, size_range or frame_count")
            cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        else:
            cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        cat = int(rng.integers(sp.n_categories))
        objs.append(MovingObject((float(cx), float(cy)), (float(vx), float(vy)),
                                 (float(w), float(h)), cat))
    return tuple(objs)


def scene_objects(cfg: SceneConfig) -> tuple[MovingObject, ...]:
    return cfg.objects if cfg.objects is not None else _random_objects(cfg)


def with_speed(cfg: SceneConfig, factor: float) -> SceneConfig:
    """Same scene with every velocity multiplied by ``factor``.

    Object placement is resolved first, so ``factor`` changes motion only.
    """
    objs = tuple(replace(o, velocity=(o.velocity[0] * factor, o.velocity[1] * factor))
                 for o in scene_objects(cfg))
    return replace(cfg, objects=objs)


def render_box(obj: MovingObject, t: int, image_size: tuple[int, int]) -> Optional[BBox]:
    cx, cy = obj.center(t)
    w, h = obj.size
    W, H = image_size
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(float(W), cx + w / 2), min(float(H), cy + h / 2)
    if x2 <= x1 or y2 <= y1:
        return None
    return BBox(x1, y1, x2, y2)


def generate_stream(cfg: SceneConfig) -> VideoStream:
    """Render ground truth for every frame; deterministic given the config."""
    objs = scene_objects(cfg)
    frames = []
    for t in range(cfg.frame_count):
        gt = []
        for tid, obj in enumerate(objs):
            if not obj.alive(t):
                continue
            box = render_box(obj, t, cfg.image_size)
            if box is not None:
                gt.append(GroundTruthBox(box, obj.category, tid))
        frames.append(Frame(t, t / cfg.fps, tuple(cfg.image_size), tuple(gt)))
    return VideoStream(cfg.video_id, cfg.fps, tuple(frames))


def frame_rng(seed: int, frame_index: int, stream_key: int = 0) -> np.random.Generator:
    """Per-frame generator, so detections do not depend on processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream_key, frame_index]))


def mock_detect(frame: Frame, cfg: MockDetectorConfig,
                rng: np.random.Generator) -> list[Detection]:
    """Drop and jitter ground-truth boxes to imitate a detector.

    Each box is dropped with ``drop_probability``; survivors get independent
    Gaussian noise on all four corners. Random draws happen for every box,
    dropped or not, so the noise of one object is unaffected by the others.
    """
    sigma = cfg.coordinate_noise_sigma
    dets = []
    for g in frame.gt:
        u = rng.random()
        noise = rng.normal(0.0, sigma, size=4) if sigma > 0 else np.zeros(4)
        if u < cfg.drop_probability:
            continue
        x1, y1, x2, y2 = np.array(g.box.as_tuple()) + noise
        box = BBox(float(min(x1, x2)), float(min(y1, y2)), float(max(x1, x2)), float(max(y1, y2)))
        if cfg.score_model == "constant":
            score = cfg.constant_score
        else:
            score = math.exp(-float(np.mean(noise ** 2)) / (2.0 * max(sigma, 1e-12) ** 2))
        dets.append(Detection(box, g.category, float(score)))
    return dets


def detect_stream(stream: VideoStream, cfg: MockDetectorConfig) -> dict[int, list[Detection]]:
    return {f.frame_index: mock_detect(f, cfg, frame_rng(cfg.rng_seed, f.frame_index))
            for f in stream.frames}


def objects_from_records(records: Sequence[dict]) -> tuple[MovingObject, ...]:
    out = []
    for r in records:
        out.append(MovingObject(
            center0=tuple(map(float, r["center0"])),
            velocity=tuple(map(float, r.get("velocity", (0.0, 0.0)))),
            size=tuple(map(float, r["size"])),
            category=int(r.get("category", 0)),
            spawn=int(r.get("spawn", 0)),
            despawn=None if r.get("despawn") is None else int(r["despawn"]),
        ))
    return tuple(out)


def mixed_speed_config(seed: int, n_slow: int, n_fast: int,
                       slow_speed_range=(0.0, 2.0), fast_speed_range=(8.0, 14.0),
                       frame_count: int = 20, size_range=(40.0, 120.0),
                       image_size=(960, 600), fps: float = 30.0, n_categories: int = 1,
                       video_id: str = "mixed") -> SceneConfig:
    """Scene with a slow group and a fast group of in-frame objects."""
    def group(n, speeds, key):
        sub = SceneConfig(frame_count=frame_count, fps=fps, image_size=image_size,
                          spawn=RandomSpawn(n, size_range, speeds, n_categories, True),
                          rng_seed=int(np.random.SeedSequence([seed, key]).generate_state(1)[0]))
        return _random_objects(sub)
    objs = group(n_slow, slow_speed_range, 1) + group(n_fast, fast_speed_range, 2)
    return SceneConfig(frame_count=frame_count, fps=fps, image_size=image_size, objects=objs,
                       rng_seed=seed, video_id=video_id)
