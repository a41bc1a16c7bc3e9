"""Acceptance gate: eleven criteria, each with a tolerance and a wall-clock budget.

Every test prints one ``ACn PASS|FAIL`` line; the same lines are repeated in the
terminal summary by ``conftest.py``. A criterion whose budget is ``None`` has
no runtime limit.
"""

import random
import time

import numpy as np
import pytest

import conftest
from oracles import brute_force_ap, kalman_cv_forecast
from streamperc import experiments as ex
from streamperc.config import RunConfig
from streamperc.data import Frame, VideoStream, resample_speed
from streamperc.dfp import DFPConfig, dfp_fuse, random_instance
from streamperc.forecast import KalmanAgent, KalmanTrack, KFConfig, kf_forecast, kf_step
from streamperc.geometry import BBox, Detection, GroundTruthBox
from streamperc.metrics import APParams, evaluate_ap, offline_ap, streaming_ap
from streamperc.scene import RandomSpawn, SceneConfig, generate_stream
from streamperc.stream_sim import LatencyModel, OracleDetector, pair_for_sap, simulate
from streamperc.trend_loss import normalize_weights, trend_factor


def gate(n: int, budget_s, check):
    t0 = time.perf_counter()
    detail, ok = "", False
    try:
        detail = check() or ""
        elapsed = time.perf_counter() - t0
        ok = budget_s is None or elapsed < budget_s
        if not ok:
            detail = f"{detail} over budget".strip()
    except AssertionError as exc:
        elapsed = time.perf_counter() - t0
        detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
    limit = "no limit" if budget_s is None else f"< {budget_s:g} s"
    line = f"AC{n} {'PASS' if ok else 'FAIL'} ({elapsed:.2f} s, {limit}) {detail}".rstrip()
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_ac1_normalization_preserves_total():
    def check():
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            omega = rng.uniform(1 / 1.4, 1 / 0.3, n)
            losses = rng.exponential(1.0, n) * 10.0 ** rng.uniform(-3, 3)
            w_hat = normalize_weights(omega, losses)
            worst = max(worst, abs(np.dot(w_hat, losses) - losses.sum()) / losses.sum())
        assert worst <= 1e-9, f"max rel err {worst:.3e}"
        return f"max rel err {worst:.1e}"
    gate(1, 1.0, check)


def test_ac2_trend_factor_defaults():
    def check():
        assert trend_factor(0.5) == 2.0
        assert trend_factor(0.2) == 1 / 1.4
        grid = trend_factor(np.linspace(0.3, 1.0, 701))
        assert np.all(np.diff(grid) <= 0), "not monotone on the tracked branch"
    gate(2, 1.0, check)


def test_ac3_realtime_pairing_pattern():
    class Echo:
        def initial_state(self, frame):
            return None

        def process(self, frame, state):
            return [Detection(BBox(0, 0, 1, 1), 0, 1.0 / (1 + frame.frame_index))], None

    def check():
        rng = random.Random(3)
        for k in range(100):
            fps = rng.choice([10.0, 15.0, 24.0, 30.0, 60.0])
            n = rng.randint(2, 120)
            dt = 1.0 / fps
            # include the inclusive endpoint
            lat = dt if k % 10 == 0 else rng.uniform(1e-9, dt)
            s = VideoStream(f"r{k}", fps, tuple(Frame(i, i / fps, (8, 8), ()) for i in range(n)))
            pairs = pair_for_sap(simulate(s, Echo(), LatencyModel.constant(lat)), s)
            assert pairs[0].record is None and pairs[0].detections == (), f"stream {k}: frame 0"
            for p in pairs[1:]:
                assert p.record.input_frame_index == p.frame_index - 1, \
                    f"stream {k} (lat={lat}, dt={dt}): frame {p.frame_index}"
        return "100 streams"
    gate(3, 5.0, check)


def _random_ap_instances(rng):
    out = []
    for _ in range(rng.randint(1, 3)):
        def box():
            x, y = rng.randint(0, 6), rng.randint(0, 6)
            return BBox(x, y, x + rng.randint(1, 5), y + rng.randint(1, 5))
        gts = [GroundTruthBox(box(), rng.randint(0, 1)) for _ in range(rng.randint(0, 5))]
        dets = [Detection(box(), rng.randint(0, 1), rng.choice([0.3, 0.6, rng.random()]))
                for _ in range(rng.randint(0, 5))]
        for g in gts[:rng.randint(0, len(gts))]:
            if len(dets) < 5:
                dets.append(Detection(BBox(g.box.x1, g.box.y1, g.box.x2 + rng.randint(0, 1), g.box.y2),
                                      g.category, rng.random()))
        out.append((dets[:5], gts))
    return out


def test_ac4_ap_matches_brute_force():
    def check():
        p = APParams()
        hand = evaluate_ap([([Detection(BBox(0, 0, 10, 10), 0, 1.0)],
                             [GroundTruthBox(BBox(0, 0, 10, 10), 0),
                              GroundTruthBox(BBox(50, 50, 60, 60), 0)])])
        assert abs(hand.ap - 51 / 101) <= 1e-12, f"hand case {hand.ap}"
        rng = random.Random(4)
        worst, defined = 0.0, 0
        for i in range(500):
            inst = _random_ap_instances(rng)
            ref = brute_force_ap(inst, p.iou_thresholds, p.recall_points)
            got = evaluate_ap(inst, p).ap
            if ref is None:
                assert got is None, f"case {i}: expected undefined"
                continue
            defined += 1
            worst = max(worst, abs(got - ref))
        assert worst <= 1e-12, f"max abs diff {worst:.3e}"
        return f"{defined} defined cases, max diff {worst:.1e}"
    gate(4, 10.0, check)


def test_ac5_offline_identity():
    def check():
        n = 0
        for seed in range(5):
            s = generate_stream(SceneConfig(frame_count=40, rng_seed=seed, video_id=f"t{seed}"))
            dt = 1.0 / s.fps
            for make in (OracleDetector, lambda: KalmanAgent(KFConfig())):
                for lat in (1e-4, dt / 2, dt):
                    tr = simulate(s, make(), LatencyModel.constant(lat))
                    assert streaming_ap(tr, s, offline=True) == offline_ap(s, make()), \
                        f"seed {seed} latency {lat}"
                    n += 1
        return f"{n} stream/agent/latency cases"
    gate(5, None, check)


def test_ac6_kalman_exact_and_beats_delay():
    def check():
        cfg = KFConfig()
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(200):
            c0, v = rng.uniform(0, 800, 2), rng.uniform(-15, 15, 2)
            s0, sv = rng.uniform(20, 120, 2), rng.uniform(-1, 1, 2)
            cs = [c0 + k * v for k in range(10)]
            ss = [s0 + k * sv for k in range(10)]
            box = lambda k: BBox.from_cxcywh(*cs[k], *ss[k])
            t = KalmanTrack.from_box(box(0), cfg)
            for k in range(1, 9):
                t = kf_step(t, box(k), cfg)
                if k >= 2:
                    ref_c, ref_s = kalman_cv_forecast(cs[:k + 1], ss[:k + 1])
                    got = kf_forecast(t).to_cxcywh()
                    worst = max(worst, float(np.max(np.abs(got - np.concatenate([ref_c, ref_s])))))
        assert worst < 1e-9, f"forecast error {worst:.3e} px"
        rows = {r["agent"]: r for r in ex.compare(RunConfig())}
        margin = {sp: rows["kalman"][f"sAP_{sp}x"] - rows["delayed-oracle"][f"sAP_{sp}x"]
                  for sp in (0, 1, 2)}
        assert margin[1] >= 0, f"kalman below delayed oracle at 1x ({margin[1]:.4f})"
        assert margin[2] > margin[1], f"margin 2x {margin[2]:.4f} <= 1x {margin[1]:.4f}"
        return f"err {worst:.1e} px, margins 1x {margin[1]:.4f} 2x {margin[2]:.4f}"
    gate(6, 30.0, check)


def test_ac7_speed_resample():
    def check():
        for n in (5, 6, 17, 40):
            frames = tuple(Frame(i, i / 30, (100, 100), (GroundTruthBox(BBox(i, 0, i + 5, 5), 0, 0),))
                           for i in range(n))
            s = VideoStream("v", 30.0, frames)
            zero = resample_speed(s, 0)
            assert len(zero) == n
            for t, f in zip(zero, frames):
                assert t.prev is f and t.cur is f and t.target_gt == f.gt
            two = resample_speed(s, 2)
            assert len(two) == n - 4, f"n={n}: {len(two)} triplets"
            for k, t in enumerate(two):
                i = k + 2
                assert (t.prev.frame_index, t.cur.frame_index, t.target_index) == (i - 2, i, i + 2)
                assert t.target_gt == frames[i + 2].gt
            assert len(resample_speed(s, 1)) == n - 2
    gate(7, 1.0, check)


def test_ac8_gradient_checks():
    def check():
        res = ex.gradcheck_suite(20)
        assert len(res["forecaster"]) == len(res["dfp"]) == 20
        assert res["max_forecaster"] < 1e-4, f"forecaster {res['max_forecaster']:.3e}"
        assert res["max_dfp"] < 1e-4, f"dfp {res['max_dfp']:.3e}"
        return f"forecaster {res['max_forecaster']:.1e}, dfp {res['max_dfp']:.1e}"
    gate(8, 10.0, check)


def test_ac9_dfp_invariants():
    def check():
        for seed in range(30):
            for c, h, w in ((2, 1, 1), (4, 3, 3), (6, 2, 5), (8, 4, 4)):
                for fusion in ("concat", "add"):
                    p, f_prev, f_cur = random_instance(seed, c, h, w, fusion)
                    for residual in (True, False):
                        cfg = DFPConfig(fusion, residual)
                        assert dfp_fuse(f_prev, f_cur, p, cfg).shape == f_cur.shape
                    if fusion == "concat":
                        same = dfp_fuse(f_cur, f_cur, p, DFPConfig(residual=False))
                        assert np.array_equal(same[:c // 2], same[c // 2:]), "halves differ"
                    buffer = f_cur.copy()
                    assert np.array_equal(dfp_fuse(buffer, f_cur, p, DFPConfig(fusion)),
                                          dfp_fuse(f_cur, f_cur, p, DFPConfig(fusion)))
    gate(9, 1.0, check)


def test_ac10_tal_helps_fast_objects():
    def check():
        res = ex.tal_benefit(RunConfig())
        tal, uni = res["tal"]["fast_l1"], res["uniform"]["fast_l1"]
        assert tal <= uni, f"fast L1 tal {tal:.5f} > uniform {uni:.5f}"
        return f"fast L1 tal {tal:.5f} vs uniform {uni:.5f}"
    gate(10, 60.0, check)


def test_ac11_latency_monotone():
    def check():
        grid = (1, 25, 50, 75, 100)
        for seed in range(5):
            s = generate_stream(SceneConfig(frame_count=90, rng_seed=seed,
                                            spawn=RandomSpawn(n_objects=6, keep_in_frame=True)))
            aps = [streaming_ap(simulate(s, OracleDetector(), LatencyModel.constant(ms / 1000)), s).ap
                   for ms in grid]
            assert all(b <= a for a, b in zip(aps, aps[1:])), f"seed {seed}: {aps}"
        return "5 scenes"
    gate(11, 30.0, check)
