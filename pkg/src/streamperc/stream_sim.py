"""Discrete-event simulation of a detector consuming a frame stream.

The detector is single-threaded and blocking: it starts on frame 0 when it
arrives and, whenever it finishes, starts the newest frame that has arrived
since, skipping anything in between. If nothing new has arrived it idles
until the next arrival. Each ground-truth instant is then judged against the
most recent output that had completed by that instant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol, Sequence

import numpy as np

from .data import Frame, VideoStream
from .geometry import Detection

# Comparisons between completion and arrival times treat values within this
# many seconds as simultaneous, so i/fps + 1/fps lands on (i+1)/fps.
TIME_EPS = 1e-9


class ConfigError(ValueError):
    """Invalid latency model or simulator configuration."""


@dataclass(frozen=True)
class LatencyModel:
    """Processing time per invocation, in seconds.

    ``kind`` is ``"constant"`` (uses ``value``), ``"per_frame"`` (``values``
    indexed by input frame) or ``"random"`` (``mean`` plus uniform jitter in
    ``[-jitter, jitter]``, drawn per input frame from ``seed``).
    """
    kind: str = "constant"
    value: float = 0.025
    values: tuple[float, ...] = ()
    mean: float = 0.025
    jitter: float = 0.0
    seed: int = 0

    @classmethod
    def constant(cls, seconds: float) -> "LatencyModel":
        return cls(kind="constant", value=seconds)

    @classmethod
    def per_frame(cls, seconds: Sequence[float]) -> "LatencyModel":
        return cls(kind="per_frame", values=tuple(seconds))

    @classmethod
    def random(cls, mean: float, jitter: float, seed: int = 0) -> "LatencyModel":
        return cls(kind="random", mean=mean, jitter=jitter, seed=seed)

    def sample(self, frame_index: int) -> float:
        if self.kind == "constant":
            lat = self.value
        elif self.kind == "per_frame":
            if frame_index >= len(self.values):
                raise ConfigError(f"no latency given for frame {frame_index}")
            lat = self.values[frame_index]
        elif self.kind == "random":
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, frame_index]))
            lat = self.mean + rng.uniform(-self.jitter, self.jitter)
        else:
            raise ConfigError(f"unknown latency kind {self.kind!r}")
        lat = float(lat)
        if not (math.isfinite(lat) and lat > 0):
            raise ConfigError(f"latency must be positive and finite, got {lat} for frame {frame_index}")
        return lat


class DetectorAgent(Protocol):
    """What the simulator drives.

    ``initial_state`` is called once with the first frame the agent sees and
    must always succeed; two-frame agents use it to duplicate the current
    frame as a stand-in history. ``process`` receives the state returned by
    the previous call.
    """

    def initial_state(self, frame: Frame) -> Any: ...

    def process(self, frame: Frame, state: Any) -> tuple[list[Detection], Any]: ...


@dataclass(frozen=True)
class TraceRecord:
    input_frame_index: int
    start_time: float
    completion_time: float
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class ScheduleTrace:
    video_id: str
    records: tuple[TraceRecord, ...]

    def processed_indices(self) -> list[int]:
        return [r.input_frame_index for r in self.records]


@dataclass(frozen=True)
class EvalPairing:
    frame_index: int
    record: Optional[TraceRecord]  # None: nothing had completed yet

    @property
    def detections(self) -> tuple[Detection, ...]:
        return () if self.record is None else self.record.detections


def simulate(stream: VideoStream, agent: DetectorAgent, latency: LatencyModel) -> ScheduleTrace:
    frames = stream.frames
    arrivals = [f.timestamp for f in frames]
    records = []
    state = agent.initial_state(frames[0])
    idx, start = 0, arrivals[0]
    while True:
        lat = latency.sample(idx)
        dets, state = agent.process(frames[idx], state)
        done = start + lat
        records.append(TraceRecord(idx, start, done, tuple(dets)))
        # newest frame that has arrived by `done`
        newest = idx
        while newest + 1 < len(frames) and arrivals[newest + 1] <= done + TIME_EPS:
            newest += 1
        if newest > idx:
            idx, start = newest, max(done, arrivals[newest])
        elif idx + 1 < len(frames):
            idx, start = idx + 1, arrivals[idx + 1]
        else:
            break
    return ScheduleTrace(stream.video_id, tuple(records))


def _check_trace(trace: ScheduleTrace, stream: VideoStream):
    if trace.video_id != stream.video_id:
        raise ValueError(f"trace is for video {trace.video_id!r}, stream is {stream.video_id!r}")
    n = len(stream.frames)
    if any(not 0 <= r.input_frame_index < n for r in trace.records):
        raise ValueError("trace references frames outside the stream")


def pair_for_sap(trace: ScheduleTrace, stream: VideoStream) -> list[EvalPairing]:
    """For each frame, the latest record completed no later than its timestamp.

    An output completing exactly at a frame's timestamp counts as available.
    """
    _check_trace(trace, stream)
    recs = sorted(trace.records, key=lambda r: r.completion_time)
    done = [r.completion_time for r in recs]
    out = []
    k = -1
    for f in stream.frames:
        while k + 1 < len(recs) and done[k + 1] <= f.timestamp + TIME_EPS:
            k += 1
        out.append(EvalPairing(f.frame_index, recs[k] if k >= 0 else None))
    return out


def pair_offline(trace: ScheduleTrace, stream: VideoStream) -> list[EvalPairing]:
    """Pair every frame with the output computed from that same frame."""
    _check_trace(trace, stream)
    by_input = {r.input_frame_index: r for r in trace.records}
    return [EvalPairing(f.frame_index, by_input.get(f.frame_index)) for f in stream.frames]


def trace_to_json(trace: ScheduleTrace) -> dict:
    return {
        "video_id": trace.video_id,
        "records": [{
            "input_frame_index": r.input_frame_index,
            "start_time": r.start_time,
            "completion_time": r.completion_time,
            "detections": [{"bbox": d.box.to_xywh(), "category_id": d.category,
                            "score": d.score} for d in r.detections],
        } for r in trace.records],
    }


def pairing_to_json(pairings: Sequence[EvalPairing]) -> list[dict]:
    return [{"frame_index": p.frame_index,
             "source_frame_index": None if p.record is None else p.record.input_frame_index,
             "completion_time": None if p.record is None else p.record.completion_time}
            for p in pairings]


# ------------------------------------------------------------------ agents

@dataclass
class OracleDetector:
    """Reports the ground truth of the frame it was given (score 1).

    Under latency its output is stale, which makes it the latency-only
    baseline. Pass a ``MockDetectorConfig`` as ``noise`` to degrade it.
    """
    noise: Any = None

    def initial_state(self, frame: Frame) -> None:
        return None

    def process(self, frame: Frame, state: None):
        if self.noise is None:
            return [Detection(g.box, g.category, 1.0) for g in frame.gt], None
        from .scene import frame_rng, mock_detect
        rng = frame_rng(self.noise.rng_seed, frame.frame_index)
        return mock_detect(frame, self.noise, rng), None


@dataclass
class FutureOracle:
    """Reports the ground truth of the following frame: a perfect forecaster."""
    stream: VideoStream

    def initial_state(self, frame: Frame) -> None:
        return None

    def process(self, frame: Frame, state: None):
        nxt = self.stream.frames[min(frame.frame_index + 1, len(self.stream.frames) - 1)]
        return [Detection(g.box, g.category, 1.0) for g in nxt.gt], None


@dataclass
class RecordingAgent:
    """Wraps an agent and records the state handed to each call (for audits)."""
    inner: Any
    seen_states: list = field(default_factory=list)
    emitted_states: list = field(default_factory=list)

    def initial_state(self, frame: Frame):
        s = self.inner.initial_state(frame)
        self.emitted_states.append(s)
        return s

    def process(self, frame: Frame, state):
        self.seen_states.append(state)
        dets, new = self.inner.process(frame, state)
        self.emitted_states.append(new)
        return dets, new
