"""Run configuration: a YAML mapping of sections, validated against known keys.

Every random component takes its seed from the single global ``seed`` via
:func:`derive_seed`, which hashes the component name into a NumPy
``SeedSequence``. Changing the global seed therefore re-seeds everything,
and no component shares a stream with another.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Optional

import numpy as np
import yaml

from .forecast import KFConfig
from .metrics import APParams
from .scene import MockDetectorConfig, RandomSpawn, SceneConfig, objects_from_records
from .stream_sim import LatencyModel

DEFAULT_SEED = 0


class ConfigFileError(ValueError):
    pass


def derive_seed(global_seed: int, component: str) -> int:
    """64-bit seed for ``component`` from ``SeedSequence([global_seed, crc32(component)])``."""
    ss = np.random.SeedSequence([global_seed, zlib.crc32(component.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SceneSection:
    frame_count: int = 60
    fps: float = 30.0
    image_size: tuple = (960, 600)
    video_count: int = 1
    n_objects: int = 5
    size_range: tuple = (40.0, 120.0)
    speed_range: tuple = (0.0, 4.0)
    n_categories: int = 2
    keep_in_frame: bool = True
    objects: Optional[list] = None


@dataclass
class LatencySection:
    kind: str = "constant"
    ms: float = 25.0
    values_ms: list = field(default_factory=list)
    mean_ms: float = 25.0
    jitter_ms: float = 0.0


@dataclass
class DetectorSection:
    noise_sigma: float = 0.0
    drop_probability: float = 0.0
    score_model: str = "constant"
    constant_score: float = 1.0


@dataclass
class AgentSection:
    name: str = "kalman"
    model: Optional[str] = None


@dataclass
class KalmanSection:
    process_noise: float = 1e-2
    measurement_noise: float = 1.0
    initial_position_variance: float = 10.0
    initial_velocity_variance: float = 100.0
    iou_threshold: float = 0.3
    max_age: int = 2
    two_point_velocity_init: bool = True
    horizon_frames: int = 1


@dataclass
class APSection:
    iou_thresholds: Optional[list] = None
    small_max_area: float = 32.0 ** 2
    large_min_area: float = 96.0 ** 2
    max_dets: int = 100


@dataclass
class TrainSection:
    lr: float = 0.01
    epochs: int = 300
    tal_enabled: bool = True
    tau: float = 0.3
    nu: float = 1.4
    init_scale: float = 1e-3
    cosine_schedule: bool = True
    momentum: float = 0.0
    precondition: bool = True
    fast_miou: float = 0.7
    normalize_scope: str = "triplet"
    input_noise_sigma: float = 2.0
    slow_speed_range: tuple = (0.0, 2.0)
    fast_speed_range: tuple = (8.0, 14.0)
    n_slow: int = 6
    n_fast: int = 2
    video_count: int = 4
    frame_count: int = 20


@dataclass
class TalSection:
    tau: float = 0.3
    nu: float = 1.4
    triplet: Optional[int] = None


@dataclass
class CompareSection:
    agents: list = field(default_factory=lambda: ["delayed-oracle", "kalman"])
    latencies_ms: list = field(default_factory=lambda: [25.0])
    speeds: list = field(default_factory=lambda: [0, 1, 2])
    extra_latency_ms: dict = field(default_factory=dict)


@dataclass
class GradcheckSection:
    seeds: int = 20
    tolerance: float = 1e-4
    step: float = 1e-5


@dataclass
class RunConfig:
    seed: Optional[int] = None
    out: str = "out"
    speed_factor: int = 1
    dataset: Optional[str] = None
    scene: SceneSection = field(default_factory=SceneSection)
    latency: LatencySection = field(default_factory=LatencySection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    agent: AgentSection = field(default_factory=AgentSection)
    kalman: KalmanSection = field(default_factory=KalmanSection)
    ap: APSection = field(default_factory=APSection)
    train: TrainSection = field(default_factory=TrainSection)
    tal: TalSection = field(default_factory=TalSection)
    compare: CompareSection = field(default_factory=CompareSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    @property
    def global_seed(self) -> int:
        return DEFAULT_SEED if self.seed is None else int(self.seed)

    # -- builders
    def scene_config(self, video: int = 0) -> SceneConfig:
        s = self.scene
        objs = objects_from_records(s.objects) if s.objects is not None else None
        return SceneConfig(
            frame_count=int(s.frame_count), fps=float(s.fps),
            image_size=tuple(int(v) for v in s.image_size), objects=objs,
            spawn=RandomSpawn(int(s.n_objects), tuple(s.size_range), tuple(s.speed_range),
                              int(s.n_categories), bool(s.keep_in_frame)),
            rng_seed=derive_seed(self.global_seed, f"scene/{video}"),
            video_id=f"video{video:03d}")

    def latency_model(self, extra_ms: float = 0.0) -> LatencyModel:
        lat = self.latency
        if lat.kind == "constant":
            return LatencyModel.constant((lat.ms + extra_ms) / 1000.0)
        if lat.kind == "per_frame":
            return LatencyModel.per_frame([(v + extra_ms) / 1000.0 for v in lat.values_ms])
        if lat.kind == "random":
            return LatencyModel.random((lat.mean_ms + extra_ms) / 1000.0, lat.jitter_ms / 1000.0,
                                       derive_seed(self.global_seed, "latency"))
        raise ConfigFileError(f"unknown latency kind {lat.kind!r}")

    def detector_config(self, video_id: str) -> Optional[MockDetectorConfig]:
        d = self.detector
        if d.noise_sigma == 0 and d.drop_probability == 0 and d.score_model == "constant" \
                and d.constant_score == 1.0:
            return None
        return MockDetectorConfig(float(d.noise_sigma), float(d.drop_probability), d.score_model,
                                  float(d.constant_score),
                                  derive_seed(self.global_seed, f"detector/{video_id}"))

    def kf_config(self) -> KFConfig:
        return KFConfig(**vars(self.kalman))

    def ap_params(self) -> APParams:
        a = self.ap
        kw = dict(small_max_area=a.small_max_area, large_min_area=a.large_min_area,
                  max_dets=a.max_dets)
        if a.iou_thresholds is not None:
            kw["iou_thresholds"] = tuple(float(t) for t in a.iou_thresholds)
        return APParams(**kw)


def _fill(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigFileError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigFileError(f"{where}: unknown key(s) {', '.join(unknown)}")
    obj = cls()
    for k, v in data.items():
        cur = getattr(obj, k)
        if is_dataclass(cur):
            v = _fill(type(cur), v, f"{where}.{k}" if where else k)
        elif isinstance(cur, tuple) and isinstance(v, list):
            v = tuple(v)
        setattr(obj, k, v)
    return obj


def parse_config(data: dict | None) -> RunConfig:
    return _fill(RunConfig, data or {}, "")


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigFileError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"malformed config {path}: {exc}") from exc
    return parse_config(data)


def describe_keys() -> str:
    """One line per config key, for ``--help`` output."""
    lines = []

    def walk(cls, prefix):
        obj = cls()
        for f in fields(cls):
            val = getattr(obj, f.name)
            if is_dataclass(val):
                walk(type(val), f"{prefix}{f.name}.")
            else:
                lines.append(f"  {prefix}{f.name} (default: {val!r})")
    walk(RunConfig, "")
    return "\n".join(lines)
