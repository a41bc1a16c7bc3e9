"""Experiment drivers shared by the command line and the demo scripts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import dfp
from .config import RunConfig, derive_seed
from .data import VideoStream, build_triplets, load_stream_dataset, subsample_stream
from .forecast import (LinearForecaster, LinearForecasterAgent, KalmanAgent, TrainConfig,
                       build_batch, forecast_errors, grad_check, random_batch,
                       train_linear_forecaster)
from .metrics import APResult, evaluate_ap, offline_instances, streaming_instances
from .scene import generate_stream, mixed_speed_config, with_speed
from .stream_sim import (FutureOracle, LatencyModel, OracleDetector, ScheduleTrace, simulate)
from .trend_loss import TrendConfig

AGENTS = ("oracle", "delayed-oracle", "kalman", "linear-forecaster")


def build_streams(cfg: RunConfig, speed: int) -> tuple[list[VideoStream], bool]:
    """Streams at the requested speed, plus whether evaluation must pair offline.

    Synthetic scenes change speed by scaling velocities (0 freezes every
    object). Recorded datasets are sub-sampled for speed 2; speed 0 on a
    recorded dataset falls back to offline pairing, which is what a frozen
    world amounts to.
    """
    if speed not in (0, 1, 2):
        raise ValueError(f"speed factor must be 0, 1 or 2, got {speed}")
    if cfg.dataset:
        streams = load_stream_dataset(cfg.dataset)
        if speed == 2:
            streams = [subsample_stream(s, 2) for s in streams]
        return streams, speed == 0
    streams = [generate_stream(with_speed(cfg.scene_config(v), speed))
               for v in range(int(cfg.scene.video_count))]
    return streams, False


def make_agent(name: str, cfg: RunConfig, stream: VideoStream,
               model: Optional[LinearForecaster] = None):
    detector = OracleDetector(cfg.detector_config(stream.video_id))
    if name == "oracle":
        return FutureOracle(stream)
    if name == "delayed-oracle":
        return detector
    if name == "kalman":
        return KalmanAgent(cfg.kf_config(), detector)
    if name == "linear-forecaster":
        if model is None:
            if not cfg.agent.model:
                raise ValueError("agent 'linear-forecaster' needs agent.model (a trained model JSON)")
            with open(cfg.agent.model) as fh:
                model = LinearForecaster.from_json(fh.read())
        return LinearForecasterAgent(model, detector, cfg.kalman.iou_threshold)
    raise ValueError(f"unknown agent {name!r}; choose from {', '.join(AGENTS)}")


@dataclass
class RunResult:
    result: APResult
    traces: list[ScheduleTrace]
    per_video: list[list]  # evaluation instances, one list per stream


def run_sap(streams: Sequence[VideoStream], agent_name: str, cfg: RunConfig,
            latency: LatencyModel, offline_pairing: bool = False,
            model: Optional[LinearForecaster] = None) -> RunResult:
    """Simulate every stream and pool all evaluation instants into one AP."""
    traces, per_video = [], []
    for s in streams:
        tr = simulate(s, make_agent(agent_name, cfg, s, model), latency)
        traces.append(tr)
        per_video.append(streaming_instances(tr, s, offline=offline_pairing))
    pooled = [i for v in per_video for i in v]
    return RunResult(evaluate_ap(pooled, cfg.ap_params()), traces, per_video)


def run_offline(streams: Sequence[VideoStream], agent_name: str, cfg: RunConfig,
                model: Optional[LinearForecaster] = None) -> RunResult:
    per_video = [offline_instances(s, make_agent(agent_name, cfg, s, model)) for s in streams]
    pooled = [i for v in per_video for i in v]
    return RunResult(evaluate_ap(pooled, cfg.ap_params()), [], per_video)


def compare(cfg: RunConfig, model: Optional[LinearForecaster] = None) -> list[dict]:
    """sAP for every (agent, latency, speed) cell; one row per (agent, latency)."""
    cmp = cfg.compare
    speeds = [int(s) for s in cmp.speeds]
    streams = {sp: build_streams(cfg, sp) for sp in speeds}
    rows = []
    for agent in cmp.agents:
        extra = float(cmp.extra_latency_ms.get(agent, 0.0))
        for lat_ms in cmp.latencies_ms:
            row = {"agent": agent, "latency_ms": float(lat_ms), "extra_latency_ms": extra}
            for sp in speeds:
                ss, offline = streams[sp]
                lat = LatencyModel.constant((float(lat_ms) + extra) / 1000.0)
                row[f"sAP_{sp}x"] = run_sap(ss, agent, cfg, lat, offline, model).result.ap
            rows.append(row)
    return rows


def compare_columns(cfg: RunConfig) -> list[str]:
    return (["agent", "latency_ms"] + [f"sAP_{int(s)}x" for s in cfg.compare.speeds]
            + ["extra_latency_ms"])


# ---------------------------------------------------------------- training

def train_config(cfg: RunConfig, tal_enabled: Optional[bool] = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lr=float(t.lr), epochs=int(t.epochs), seed=derive_seed(cfg.global_seed, "train"),
                       tal_enabled=t.tal_enabled if tal_enabled is None else tal_enabled,
                       trend=TrendConfig(float(t.tau), float(t.nu)), init_scale=float(t.init_scale),
                       cosine_schedule=bool(t.cosine_schedule), momentum=float(t.momentum),
                       precondition=bool(t.precondition), fast_miou=float(t.fast_miou),
                       normalize_scope=t.normalize_scope)


def mixed_speed_streams(cfg: RunConfig, split: str = "train") -> list[VideoStream]:
    t = cfg.train
    out = []
    for v in range(int(t.video_count)):
        sc = mixed_speed_config(derive_seed(cfg.global_seed, f"{split}/{v}"), int(t.n_slow),
                                int(t.n_fast), tuple(t.slow_speed_range), tuple(t.fast_speed_range),
                                int(t.frame_count), tuple(cfg.scene.size_range),
                                tuple(int(x) for x in cfg.scene.image_size), float(cfg.scene.fps),
                                video_id=f"{split}{v:03d}")
        out.append(generate_stream(sc))
    return out


def training_batch(cfg: RunConfig, split: str = "train"):
    triplets = [tr for s in mixed_speed_streams(cfg, split) for tr in build_triplets(s)]
    return build_batch(triplets, float(cfg.train.input_noise_sigma),
                       derive_seed(cfg.global_seed, f"{split}/noise"))


def tal_benefit(cfg: RunConfig) -> dict:
    """Train with and without trend weights on the same data and seed;
    report held-out L1 error on fast and slow objects."""
    train = training_batch(cfg, "train")
    test = training_batch(cfg, "test")
    fast = test.m_iou < cfg.train.fast_miou
    out = {}
    for label, tal in (("tal", True), ("uniform", False)):
        model, log = train_linear_forecaster([], train_config(cfg, tal), batch=train)
        err = forecast_errors(model, test)
        out[label] = {"fast_l1": float(err[fast].mean()), "slow_l1": float(err[~fast].mean()),
                      "final_loss": log[-1].loss}
    return out


# ---------------------------------------------------------- gradient checks

def gradcheck_suite(n_seeds: int = 20, step: float = 1e-5, forecaster_grad=None,
                    dfp_grad=None) -> dict:
    forecaster, fusion = [], []
    for seed in range(1, n_seeds + 1):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
        model = LinearForecaster(0.1 * rng.standard_normal((4, 9)))
        batch = random_batch(seed)
        w_hat = rng.uniform(0.5, 2.0, len(batch))
        forecaster.append(grad_check(model, batch, w_hat, step=step, seed=seed,
                                     grad_fn=forecaster_grad))
        params, f_prev, f_cur = dfp.random_instance(seed)
        fusion.append(dfp.dfp_grad_check(params, f_prev, f_cur, step=step, grad_fn=dfp_grad))
    return {"forecaster": forecaster, "dfp": fusion,
            "max_forecaster": max(forecaster), "max_dfp": max(fusion)}
