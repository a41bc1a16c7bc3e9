"""COCO-style average precision for offline and streaming evaluation.

Detections of one category are pooled over all evaluation instants, sorted
by score and matched greedily within their own instant. Precision is made
monotone and sampled at 101 recall points; the result is averaged over IoU
thresholds 0.50:0.05:0.95 and over categories that have ground truth.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import VideoStream
from .geometry import Detection, GroundTruthBox, iou_matrix
from .stream_sim import EvalPairing, ScheduleTrace, pair_for_sap, pair_offline

# (detections, ground truth) for one evaluation instant
Instance = tuple[Sequence[Detection], Sequence[GroundTruthBox]]

AREA_ALL = (0.0, math.inf)


def _default_iou_thresholds():
    return tuple(np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1))


def _default_recall_points():
    return tuple(np.linspace(0.0, 1.0, int(np.round(1.0 / 0.01)) + 1))


@dataclass(frozen=True)
class APParams:
    iou_thresholds: tuple[float, ...] = field(default_factory=_default_iou_thresholds)
    recall_points: tuple[float, ...] = field(default_factory=_default_recall_points)
    small_max_area: float = 32.0 ** 2
    large_min_area: float = 96.0 ** 2
    max_dets: int = 100

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"iou_thresholds must be strictly increasing in (0, 1]: {t}")

    @property
    def area_ranges(self) -> dict[str, tuple[float, float]]:
        # half-open [lo, hi)
        return {
            "all": AREA_ALL,
            "small": (0.0, self.small_max_area),
            "medium": (self.small_max_area, self.large_min_area),
            "large": (self.large_min_area, math.inf),
        }


@dataclass(frozen=True)
class APResult:
    """AP summary; ``None`` marks a value with no ground truth to score."""
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


def _match_instance(dets, gts, ious, thresholds, gt_ignore):
    """COCO matching for one instant and one category.

    Returns per-detection matched flags and ignore flags, shape (T, D).
    Non-ignored ground truth is preferred; a detection stops searching once
    it holds a regular match and only ignored candidates remain.
    """
    T, D, G = len(thresholds), len(dets), len(gts)
    matched = np.zeros((T, D), dtype=bool)
    ignored = np.zeros((T, D), dtype=bool)
    if G == 0:
        return matched, ignored
    gorder = np.argsort(gt_ignore, kind="stable")
    for ti, thr in enumerate(thresholds):
        taken = np.zeros(G, dtype=bool)
        for d in range(D):
            best, best_iou = -1, thr
            for g in gorder:
                if taken[g]:
                    continue
                if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                    break
                if ious[d, g] < best_iou or (best > -1 and ious[d, g] == best_iou):
                    continue
                best, best_iou = g, ious[d, g]
            if best > -1:
                taken[best] = True
                matched[ti, d] = True
                ignored[ti, d] = gt_ignore[best]
    return matched, ignored


def _interpolated_ap(tps: np.ndarray, fps: np.ndarray, n_pos: int, recall_points) -> float:
    tp = np.cumsum(tps)
    fp = np.cumsum(fps)
    rc = tp / n_pos
    pr = tp / np.maximum(tp + fp, 1)
    # monotone non-increasing envelope, right to left
    pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    inds = np.searchsorted(rc, recall_points, side="left")
    q = np.array([pr[i] if i < len(pr) else 0.0 for i in inds])
    return float(np.mean(q))


def _evaluate_stratum(instances, params, area_range):
    """AP per (threshold, category); NaN where the category has no gt."""
    lo, hi = area_range
    cats = sorted({g.category for _, gts in instances for g in gts}
                  | {d.category for dets, _ in instances for d in dets})
    T = len(params.iou_thresholds)
    table = np.full((T, len(cats)), np.nan)
    for ci, cat in enumerate(cats):
        scores, inst_ids, order_ids = [], [], []
        match_rows, ignore_rows = [], []
        n_pos = 0
        for k, (dets, gts) in enumerate(instances):
            cd = [d for d in dets if d.category == cat]
            cg = [g for g in gts if g.category == cat]
            cd_idx = sorted(range(len(cd)), key=lambda i: (-cd[i].score, i))[:params.max_dets]
            cd = [cd[i] for i in cd_idx]
            g_ign = np.array([not (lo <= g.box.area < hi) for g in cg], dtype=bool)
            n_pos += int((~g_ign).sum())
            if not cd:
                continue
            ious = iou_matrix([d.box for d in cd], [g.box for g in cg])
            m, ig = _match_instance(cd, cg, ious, params.iou_thresholds, g_ign)
            d_out = np.array([not (lo <= d.box.area < hi) for d in cd], dtype=bool)
            ig = ig | (~m & d_out[None, :])
            match_rows.append(m)
            ignore_rows.append(ig)
            scores.extend(d.score for d in cd)
            inst_ids.extend([k] * len(cd))
            order_ids.extend(range(len(cd)))
        if n_pos == 0:
            continue
        if not scores:
            table[:, ci] = 0.0
            continue
        matched = np.concatenate(match_rows, axis=1)
        ignored = np.concatenate(ignore_rows, axis=1)
        order = np.lexsort((np.array(order_ids), np.array(inst_ids), -np.array(scores)))
        matched, ignored = matched[:, order], ignored[:, order]
        for ti in range(T):
            keep = ~ignored[ti]
            tps = matched[ti][keep].astype(float)
            table[ti, ci] = _interpolated_ap(tps, 1.0 - tps, n_pos, params.recall_points)
    return table


def _mean_or_none(values: np.ndarray) -> Optional[float]:
    v = values[~np.isnan(values)]
    return float(np.mean(v)) if v.size else None


def evaluate_ap(instances: Sequence[Instance], params: APParams | None = None) -> APResult:
    """Average precision over a list of (detections, ground truth) instants."""
    params = params or APParams()
    instances = [(list(d), list(g)) for d, g in instances]
    thr = np.asarray(params.iou_thresholds)
    table = _evaluate_stratum(instances, params, AREA_ALL)

    def at(t):
        hits = np.where(np.isclose(thr, t))[0]
        return _mean_or_none(table[hits[0]]) if hits.size else None

    strata = {name: _mean_or_none(_evaluate_stratum(instances, params, rng))
              for name, rng in params.area_ranges.items() if name != "all"}
    return APResult(
        ap=_mean_or_none(table),
        ap50=at(0.5),
        ap75=at(0.75),
        ap_small=strata["small"],
        ap_medium=strata["medium"],
        ap_large=strata["large"],
    )


def pairing_instances(pairings: Sequence[EvalPairing], stream: VideoStream) -> list[Instance]:
    """Turn evaluation pairings into AP instances; empty pairings have no detections."""
    return [(p.detections, stream.frames[p.frame_index].gt) for p in pairings]


def streaming_instances(trace: ScheduleTrace, stream: VideoStream,
                        offline: bool = False) -> list[Instance]:
    pairings = pair_offline(trace, stream) if offline else pair_for_sap(trace, stream)
    return pairing_instances(pairings, stream)


def streaming_ap(trace: ScheduleTrace, stream: VideoStream, params: APParams | None = None,
                 offline: bool = False) -> APResult:
    """sAP of one simulated run (``offline=True`` pairs each frame with its own output)."""
    return evaluate_ap(streaming_instances(trace, stream, offline), params)


def offline_instances(stream: VideoStream, agent) -> list[Instance]:
    """Run ``agent`` on every frame in order with no latency."""
    state = agent.initial_state(stream.frames[0])
    out = []
    for f in stream.frames:
        dets, state = agent.process(f, state)
        out.append((dets, f.gt))
    return out


def offline_ap(stream: VideoStream, agent, params: APParams | None = None) -> APResult:
    return evaluate_ap(offline_instances(stream, agent), params)


# ----------------------------------------------------------------- output

RESULT_COLUMNS = ["video_id", "latency", "speed_factor", "ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"]


def result_row(result: APResult, video_id: str, latency: float, speed_factor: int) -> dict:
    return {"video_id": video_id, "latency": latency, "speed_factor": speed_factor,
            "ap": result.ap, "ap50": result.ap50, "ap75": result.ap75,
            "ap_s": result.ap_small, "ap_m": result.ap_medium, "ap_l": result.ap_large}


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = RESULT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def rows_to_json(rows: Sequence[dict]) -> str:
    return json.dumps(list(rows), indent=2)
