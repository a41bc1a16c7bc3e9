"""Next-frame forecasting agents.

Two forecasters are provided: a constant-velocity Kalman tracker that
extrapolates each track one frame ahead, and a linear box forecaster that
maps (previous box, current box) to the next box and is trained by
full-batch gradient descent on a trend-weighted L1 loss.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from .data import Frame, Triplet
from .geometry import BBox, Detection, GroundTruthBox, greedy_match
from .stream_sim import OracleDetector
from .trend_loss import TrendConfig, matching_iou, normalize_weights, trend_factor


class NumericalError(RuntimeError):
    """Raised when a filter covariance loses symmetry or positive semi-definiteness."""


# ------------------------------------------------------------------ Kalman

@dataclass(frozen=True)
class KFConfig:
    process_noise: float = 1e-2
    measurement_noise: float = 1.0
    initial_position_variance: float = 10.0
    initial_velocity_variance: float = 100.0
    iou_threshold: float = 0.3
    max_age: int = 2
    two_point_velocity_init: bool = True
    horizon_frames: int = 1

    def __post_init__(self):
        for name in ("process_noise", "measurement_noise",
                     "initial_position_variance", "initial_velocity_variance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_age < 0:
            raise ValueError("max_age must be >= 0")


@dataclass(frozen=True)
class KalmanTrack:
    """Center-size state ``(cx, cy, w, h, vcx, vcy, vw, vh)``; velocities in px/frame."""
    state: np.ndarray
    covariance: np.ndarray
    category: int = 0
    track_id: int = 0
    score: float = 1.0
    age: int = 0
    hits: int = 1
    time_since_update: int = 0
    last_measurement: Optional[np.ndarray] = None
    elapsed: float = 0.0  # frames since last_measurement

    @classmethod
    def from_box(cls, box: BBox, cfg: KFConfig, category: int = 0, track_id: int = 0,
                 score: float = 1.0) -> "KalmanTrack":
        z = box.to_cxcywh()
        P = np.diag([cfg.initial_position_variance] * 4 + [cfg.initial_velocity_variance] * 4)
        return cls(np.concatenate([z, np.zeros(4)]), P, category, track_id, score,
                   last_measurement=z)

    def box(self) -> BBox:
        return _state_box(self.state)


def _state_box(x: np.ndarray) -> BBox:
    cx, cy, w, h = x[:4]
    return BBox.from_cxcywh(cx, cy, max(w, 1e-6), max(h, 1e-6))


def _transition(dt: float) -> np.ndarray:
    F = np.eye(8)
    F[:4, 4:] = dt * np.eye(4)
    return F


_H = np.hstack([np.eye(4), np.zeros((4, 4))])


def _check_psd(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise NumericalError("covariance has non-finite entries")
    lo = np.linalg.eigvalsh(P).min()
    if lo < -1e-9 * max(1.0, np.abs(P).max()):
        raise NumericalError(f"covariance is not positive semi-definite (min eigenvalue {lo:g})")
    return P


def kf_predict(track: KalmanTrack, cfg: KFConfig, dt: float = 1.0) -> KalmanTrack:
    F = _transition(dt)
    P = F @ track.covariance @ F.T + cfg.process_noise * dt * np.eye(8)
    return replace(track, state=F @ track.state, covariance=_check_psd(P),
                   age=track.age + 1, time_since_update=track.time_since_update + 1,
                   elapsed=track.elapsed + dt)


def kf_step(track: KalmanTrack, measurement: Optional[BBox], cfg: KFConfig,
            dt: float = 1.0) -> KalmanTrack:
    """Predict ``dt`` frames ahead, then correct with ``measurement`` if given.

    With ``two_point_velocity_init`` the second measurement a track receives
    resets its state to that measurement with velocity equal to the
    displacement from the first, divided by the frames elapsed between them.
    """
    pred = kf_predict(track, cfg, dt)
    if measurement is None:
        return pred
    z = measurement.to_cxcywh()
    if cfg.two_point_velocity_init and track.hits == 1:
        v = (z - track.last_measurement) / pred.elapsed
        P = np.diag([cfg.initial_position_variance] * 4 + [cfg.initial_velocity_variance] * 4)
        return replace(pred, state=np.concatenate([z, v]), covariance=P, hits=2,
                       time_since_update=0, last_measurement=z, elapsed=0.0)
    P = pred.covariance
    R = cfg.measurement_noise * np.eye(4)
    S = _H @ P @ _H.T + R
    K = np.linalg.solve(S, _H @ P).T
    x = pred.state + K @ (z - _H @ pred.state)
    IKH = np.eye(8) - K @ _H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return replace(pred, state=x, covariance=_check_psd(P), hits=track.hits + 1,
                   time_since_update=0, last_measurement=z, elapsed=0.0)


def kf_forecast(track: KalmanTrack, steps: float = 1.0) -> BBox:
    return _state_box(_transition(steps) @ track.state)


@dataclass(frozen=True)
class KalmanState:
    tracks: tuple[KalmanTrack, ...] = ()
    last_frame_index: Optional[int] = None
    next_id: int = 0


@dataclass
class KalmanAgent:
    """Associates detections to tracks and emits one-frame-ahead forecasts."""
    cfg: KFConfig = field(default_factory=KFConfig)
    detector: Any = field(default_factory=OracleDetector)

    def initial_state(self, frame: Frame) -> KalmanState:
        return KalmanState()

    def process(self, frame: Frame, state: KalmanState):
        cfg = self.cfg
        dets, _ = self.detector.process(frame, None)
        dt = 1.0 if state.last_frame_index is None else frame.frame_index - state.last_frame_index
        predicted = [kf_predict(t, cfg, dt) for t in state.tracks]
        as_gt = [GroundTruthBox(p.box(), p.category) for p in predicted]
        pairs = greedy_match(dets, as_gt, cfg.iou_threshold)
        det_for_track = {ti: di for di, ti in pairs}

        tracks = []
        for ti, trk in enumerate(state.tracks):
            if ti in det_for_track:
                d = dets[det_for_track[ti]]
                tracks.append(replace(kf_step(trk, d.box, cfg, dt), score=d.score))
            else:
                coasted = predicted[ti]
                if coasted.time_since_update <= cfg.max_age:
                    tracks.append(coasted)
        next_id = state.next_id
        matched = {di for di, _ in pairs}
        for di, d in enumerate(dets):
            if di not in matched:
                tracks.append(KalmanTrack.from_box(d.box, cfg, d.category, next_id, d.score))
                next_id += 1

        out = [Detection(kf_forecast(t, cfg.horizon_frames), t.category, t.score) for t in tracks]
        return out, KalmanState(tuple(tracks), frame.frame_index, next_id)


def kalman_agent(cfg: KFConfig | None = None, detector: Any = None) -> KalmanAgent:
    return KalmanAgent(cfg or KFConfig(), detector or OracleDetector())


# --------------------------------------------------------- linear forecaster

def _norm_params(box: BBox, image_size) -> np.ndarray:
    W, H = image_size
    return box.to_cxcywh() / np.array([W, H, W, H], dtype=float)


def _denorm_box(p: np.ndarray, image_size) -> BBox:
    W, H = image_size
    cx, cy, w, h = p * np.array([W, H, W, H], dtype=float)
    return BBox.from_cxcywh(cx, cy, max(w, 1e-6), max(h, 1e-6))


@dataclass
class LinearForecaster:
    """``next = cur + weights @ [prev, cur, 1]`` on image-normalized (cx, cy, w, h)."""
    weights: np.ndarray = field(default_factory=lambda: np.zeros((4, 9)))

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (4, 9):
            raise ValueError(f"weights must be 4x9, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def predict_params(self, prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
        x = np.concatenate([prev, cur, [1.0]])
        return cur + self.weights @ x

    def predict(self, prev: BBox, cur: BBox, image_size) -> BBox:
        p = self.predict_params(_norm_params(prev, image_size), _norm_params(cur, image_size))
        return _denorm_box(p, image_size)

    def to_json(self, metadata: dict | None = None) -> str:
        return json.dumps({
            "shape": [4, 9],
            "weights": [float(v) for v in self.weights.ravel()],
            "layout": "row-major; inputs prev(cx,cy,w,h) cur(cx,cy,w,h) bias; outputs delta from cur",
            "metadata": metadata or {},
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LinearForecaster":
        doc = json.loads(text)
        return cls(np.array(doc["weights"], dtype=float).reshape(doc["shape"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 300
    seed: int = 0
    tal_enabled: bool = True
    trend: TrendConfig = field(default_factory=TrendConfig)
    init_scale: float = 1e-3
    cosine_schedule: bool = True
    momentum: float = 0.0
    precondition: bool = True
    fast_miou: float = 0.7  # objects below this matching IoU are reported as "fast"
    normalize_scope: str = "triplet"  # or "batch"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.normalize_scope not in ("triplet", "batch"):
            raise ValueError(f"unknown normalize_scope {self.normalize_scope!r}")


@dataclass
class TrainingBatch:
    """Aligned per-object arrays: inputs (N, 9), current (N, 4), target (N, 4)."""
    inputs: np.ndarray
    current: np.ndarray
    target: np.ndarray
    m_iou: np.ndarray
    group: np.ndarray  # index of the supervising triplet

    def __len__(self):
        return len(self.target)


def build_batch(triplets: Sequence[Triplet], input_noise_sigma: float = 0.0,
                seed: int = 0) -> TrainingBatch:
    """Collect objects with a full previous/current/next chain of track ids.

    ``input_noise_sigma`` (px) jitters the two input boxes the way a detector
    would; targets and matching IoUs always come from clean ground truth.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    rows_x, rows_c, rows_t, mious, groups = [], [], [], [], []
    for k, tr in enumerate(triplets):
        size = tr.cur.image_size
        prev = {g.track_id: g for g in tr.prev.gt if g.track_id is not None}
        cur = {g.track_id: g for g in tr.cur.gt if g.track_id is not None}
        m = matching_iou(tr.target_gt, tr.cur.gt)
        for i, g in enumerate(tr.target_gt):
            if g.track_id is None or g.track_id not in prev or g.track_id not in cur:
                continue
            scale = input_noise_sigma / np.array([size[0], size[1], size[0], size[1]], dtype=float)
            noise = rng.standard_normal(8) * np.concatenate([scale, scale])
            p = _norm_params(prev[g.track_id].box, size) + noise[:4]
            c = _norm_params(cur[g.track_id].box, size) + noise[4:]
            rows_x.append(np.concatenate([p, c, [1.0]]))
            rows_c.append(c)
            rows_t.append(_norm_params(g.box, size))
            mious.append(m[i])
            groups.append(k)
    if not rows_x:
        raise ValueError("no usable training objects (need track ids present in all three frames)")
    return TrainingBatch(np.array(rows_x), np.array(rows_c), np.array(rows_t),
                         np.array(mious), np.array(groups))


def residuals(weights: np.ndarray, batch: TrainingBatch) -> np.ndarray:
    return batch.current + batch.inputs @ weights.T - batch.target


def per_object_l1(weights: np.ndarray, batch: TrainingBatch) -> np.ndarray:
    return np.abs(residuals(weights, batch)).sum(axis=1)


def weighted_l1(weights: np.ndarray, batch: TrainingBatch, w_hat: np.ndarray) -> float:
    return float(np.dot(w_hat, per_object_l1(weights, batch)) / len(batch))


def weighted_l1_grad(weights: np.ndarray, batch: TrainingBatch, w_hat: np.ndarray) -> np.ndarray:
    """Gradient of :func:`weighted_l1` with ``w_hat`` held constant."""
    s = np.sign(residuals(weights, batch)) * w_hat[:, None]
    return s.T @ batch.inputs / len(batch)


def tal_weights(weights: np.ndarray, batch: TrainingBatch, cfg: TrainConfig) -> np.ndarray:
    """Normalized trend weights for the current parameters (uniform if TAL is off)."""
    if not cfg.tal_enabled:
        return np.ones(len(batch))
    omega = np.asarray(trend_factor(batch.m_iou, cfg.trend), dtype=float).reshape(-1)
    L = per_object_l1(weights, batch)
    if cfg.normalize_scope == "batch":
        return normalize_weights(omega, L)
    w_hat = np.empty_like(omega)
    for g in np.unique(batch.group):
        sel = batch.group == g
        w_hat[sel] = normalize_weights(omega[sel], L[sel])
    return w_hat


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    mean_w_fast: float
    mean_w_slow: float


def _group_mean(values, mask):
    return float(values[mask].mean()) if mask.any() else math.nan


def feature_transform(batch: TrainingBatch) -> np.ndarray:
    """9x9 map from raw inputs ``[prev, cur, 1]`` to standardized
    ``[motion, cur, 1]`` features, with ``motion = cur - prev``.

    Raw inputs are nearly collinear (prev ~ cur), which makes plain gradient
    descent crawl along the motion direction; the standardized basis spans
    the same linear model with a well-conditioned loss surface.
    """
    raw = batch.inputs
    motion = raw[:, 4:8] - raw[:, 0:4]
    cur = raw[:, 4:8]
    mu = np.concatenate([motion.mean(axis=0), cur.mean(axis=0)])
    sd = np.maximum(np.concatenate([motion.std(axis=0), cur.std(axis=0)]), 1e-3)
    B = np.zeros((9, 9))
    B[0:4, 0:4] = -np.eye(4)
    B[0:4, 4:8] = np.eye(4)
    B[4:8, 4:8] = np.eye(4)
    B[8, 8] = 1.0
    T = np.zeros((9, 9))
    T[:8, :] = (B[:8, :] - np.outer(mu, B[8, :])) / sd[:, None]
    T[8, 8] = 1.0
    return T


def train_linear_forecaster(triplets: Sequence[Triplet], cfg: TrainConfig = TrainConfig(),
                            batch: TrainingBatch | None = None):
    """Full-batch gradient descent (optional heavy-ball momentum, cosine-decayed step)
    on the trend-weighted L1 loss.

    With ``cfg.precondition`` the descent runs on weights ``V`` over the
    features of :func:`feature_transform`; the returned raw weights are
    ``V @ T``. Trend weights are recomputed every epoch from the current
    per-object losses and held constant within the step.

    Returns ``(model, log)``; ``log`` holds one :class:`TrainLogRow` per
    epoch with the loss before that epoch's update.
    """
    batch = batch if batch is not None else build_batch(triplets)
    T = feature_transform(batch) if cfg.precondition else np.eye(9)
    feats = TrainingBatch(batch.inputs @ T.T, batch.current, batch.target, batch.m_iou, batch.group)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    V = cfg.init_scale * rng.standard_normal((4, 9))
    fast = batch.m_iou < cfg.fast_miou
    velocity = np.zeros_like(V)
    log = []
    for epoch in range(cfg.epochs):
        w_hat = tal_weights(V, feats, cfg)
        loss = weighted_l1(V, feats, w_hat)
        log.append(TrainLogRow(epoch, loss, _group_mean(w_hat, fast), _group_mean(w_hat, ~fast)))
        lr = cfg.lr
        if cfg.cosine_schedule:
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        velocity = cfg.momentum * velocity - lr * weighted_l1_grad(V, feats, w_hat)
        V = V + velocity
    return LinearForecaster(V @ T), log


def log_to_csv(log: Sequence[TrainLogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "mean_w_fast", "mean_w_slow"])
    for r in log:
        w.writerow([r.epoch, repr(r.loss),
                    "" if math.isnan(r.mean_w_fast) else repr(r.mean_w_fast),
                    "" if math.isnan(r.mean_w_slow) else repr(r.mean_w_slow)])
    return buf.getvalue()


def forecast_errors(model: LinearForecaster, batch: TrainingBatch) -> np.ndarray:
    """Per-object L1 error of the forecast in normalized units."""
    return per_object_l1(model.weights, batch)


# --------------------------------------------------------- gradient check

def random_batch(seed: int, n: int = 16) -> TrainingBatch:
    """Random normalized boxes for gradient checks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    prev = np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    cur = prev + rng.normal(0, 0.02, (n, 4))
    tgt = cur + rng.normal(0, 0.02, (n, 4))
    x = np.column_stack([prev, cur, np.ones(n)])
    return TrainingBatch(x, cur, tgt, rng.uniform(0.2, 1.0, n), np.arange(n) // 4)


def grad_check(model: LinearForecaster, batch: TrainingBatch, w_hat: np.ndarray | None = None,
               step: float = 1e-5, seed: int = 0, grad_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``w_hat`` is held constant. If a residual lies close enough to zero that
    a finite-difference step could cross the L1 kink, the evaluation point
    is nudged by a small seeded perturbation until it is safe.
    ``grad_fn`` overrides the analytic gradient (used to test failure paths).
    """
    w_hat = np.ones(len(batch)) if w_hat is None else np.asarray(w_hat, dtype=float)
    grad_fn = grad_fn or weighted_l1_grad
    W = model.weights.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    margin = 4 * step * np.abs(batch.inputs).sum(axis=1, keepdims=True)
    for _ in range(100):
        if np.all(np.abs(residuals(W, batch)) > margin):
            break
        W = W + 1e-3 * rng.standard_normal(W.shape)
    analytic = grad_fn(W, batch, w_hat)
    numeric = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += step
        Wm[idx] -= step
        numeric[idx] = (weighted_l1(Wp, batch, w_hat) - weighted_l1(Wm, batch, w_hat)) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ------------------------------------------------------ forecaster agent

@dataclass
class LinearForecasterAgent:
    """Two-frame agent: buffers the previous detections and forecasts the next frame.

    On the first frame the buffer is a copy of the current detections, i.e.
    the model sees a static history.
    """
    model: LinearForecaster
    detector: Any = field(default_factory=OracleDetector)
    iou_threshold: float = 0.3

    def initial_state(self, frame: Frame):
        dets, _ = self.detector.process(frame, None)
        return dets

    def process(self, frame: Frame, state):
        dets, _ = self.detector.process(frame, None)
        prev = list(state)
        pairs = greedy_match(dets, [GroundTruthBox(d.box, d.category) for d in prev],
                             self.iou_threshold)
        prev_for = {di: pi for di, pi in pairs}
        out = []
        for di, d in enumerate(dets):
            pbox = prev[prev_for[di]].box if di in prev_for else d.box
            out.append(Detection(self.model.predict(pbox, d.box, frame.image_size),
                                 d.category, d.score))
        return out, dets
