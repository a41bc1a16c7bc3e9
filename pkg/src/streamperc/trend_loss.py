"""Trend-aware re-weighting of per-object regression losses.

Each object in the supervising frame gets a matching IoU against the boxes
of the current frame. Objects that moved a lot (low matching IoU) get a
larger weight ``1 / miou``; objects with no plausible match (miou below
``tau``) are treated as newly appeared and get ``1 / nu``. The weights are
then rescaled so the weighted regression loss sums to the unweighted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import GroundTruthBox, iou_matrix


@dataclass(frozen=True)
class TrendConfig:
    tau: float = 0.3
    nu: float = 1.4

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not (math.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be positive, got {self.nu}")


@dataclass(frozen=True)
class TrendWeights:
    m_iou: np.ndarray
    omega: np.ndarray
    omega_hat: np.ndarray

    @property
    def n(self) -> int:
        return len(self.m_iou)


def matching_iou(gts_next: Sequence[GroundTruthBox],
                 gts_cur: Sequence[GroundTruthBox]) -> np.ndarray:
    """Per box of the next frame: max IoU over same-category boxes of the current frame."""
    out = np.zeros(len(gts_next))
    if not gts_next or not gts_cur:
        return out
    ious = iou_matrix([g.box for g in gts_next], [g.box for g in gts_cur])
    same = (np.array([g.category for g in gts_next])[:, None]
            == np.array([g.category for g in gts_cur])[None, :])
    return np.where(same, ious, 0.0).max(axis=1)


def trend_factor(m_iou, cfg: TrendConfig = TrendConfig()):
    """``1/m_iou`` when ``m_iou >= tau``, else ``1/nu``. Works elementwise on arrays."""
    m = np.asarray(m_iou, dtype=float)
    if np.any((m < 0) | (m > 1)):
        raise ValueError("matching IoU must lie in [0, 1]")
    tracked = m >= cfg.tau
    out = np.where(tracked, 1.0 / np.where(tracked, m, 1.0), 1.0 / cfg.nu)
    return float(out) if out.ndim == 0 else out


def normalize_weights(omegas: Sequence[float], reg_losses: Sequence[float]) -> np.ndarray:
    """Rescale weights so that ``sum(w_hat * L) == sum(L)``.

    If ``sum(omega * L)`` is zero there is no loss to preserve and the
    weights are returned unchanged.
    """
    w = np.asarray(omegas, dtype=float)
    L = np.asarray(reg_losses, dtype=float)
    if w.shape != L.shape:
        raise ValueError(f"length mismatch: {w.shape} weights vs {L.shape} losses")
    weighted = float(np.dot(w, L))
    if weighted <= 0:
        return w.copy()
    return w * (float(np.sum(L)) / weighted)


def total_loss(weights: Sequence[float], reg_losses: Sequence[float],
               cls_loss: float = 0.0, obj_loss: float = 0.0) -> float:
    w = np.asarray(weights, dtype=float)
    L = np.asarray(reg_losses, dtype=float)
    if w.shape != L.shape:
        raise ValueError(f"length mismatch: {w.shape} weights vs {L.shape} losses")
    if np.any(L < 0) or cls_loss < 0 or obj_loss < 0:
        raise ValueError("losses must be non-negative")
    return float(np.dot(w, L)) + cls_loss + obj_loss


def trend_weights(gts_next: Sequence[GroundTruthBox], gts_cur: Sequence[GroundTruthBox],
                  reg_losses: Sequence[float], cfg: TrendConfig = TrendConfig()) -> TrendWeights:
    m = matching_iou(gts_next, gts_cur)
    omega = np.asarray(trend_factor(m, cfg), dtype=float).reshape(-1)
    return TrendWeights(m, omega, normalize_weights(omega, reg_losses))


def weights_csv(tw: TrendWeights) -> str:
    lines = ["object,m_iou,omega,omega_hat"]
    for i in range(tw.n):
        lines.append(f"{i},{float(tw.m_iou[i])!r},{float(tw.omega[i])!r},{float(tw.omega_hat[i])!r}")
    return "\n".join(lines) + "\n"
