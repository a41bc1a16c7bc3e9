import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from streamperc.data import build_triplets
from streamperc.forecast import (KalmanAgent, KalmanTrack, KFConfig, LinearForecaster,
                                 LinearForecasterAgent, NumericalError, TrainConfig, build_batch,
                                 forecast_errors, grad_check, kf_forecast, kf_predict, kf_step,
                                 log_to_csv, random_batch, train_linear_forecaster,
                                 weighted_l1, weighted_l1_grad)
from streamperc.geometry import BBox
from streamperc.scene import MovingObject, SceneConfig, generate_stream, mixed_speed_config
from streamperc.stream_sim import LatencyModel, pair_for_sap, simulate
from oracles import kalman_cv_forecast

CFG = KFConfig()


def box_at(cx, cy, w=20.0, h=10.0):
    return BBox.from_cxcywh(cx, cy, w, h)


def separated_scene(frames=15, n=4, seed=0):
    rng = np.random.default_rng(seed)
    objs = tuple(MovingObject((120.0 + 220 * k, 150.0 + 60 * k), tuple(rng.uniform(-3, 3, 2)),
                              tuple(rng.uniform(30, 60, 2)), category=k % 2) for k in range(n))
    return generate_stream(SceneConfig(frame_count=frames, objects=objs))


class TestKalmanStep:
    def test_static(self):
        t = KalmanTrack.from_box(box_at(50, 50), CFG)
        for _ in range(2):
            t = kf_step(t, box_at(50, 50), CFG)
        np.testing.assert_allclose(kf_forecast(t).to_cxcywh(), [50, 50, 20, 10], atol=1e-12)

    def test_two_point(self):
        t = KalmanTrack.from_box(box_at(0, 0), CFG)
        t = kf_step(t, box_at(3, 0), CFG)
        np.testing.assert_allclose(kf_forecast(t).to_cxcywh(), [6, 0, 20, 10], atol=1e-12)

    def test_predict_only(self):
        t = KalmanTrack.from_box(box_at(0, 0), CFG)
        t = kf_step(t, box_at(3, 0), CFG)
        p = kf_predict(t, CFG)
        assert p.state[0] - t.state[0] == pytest.approx(3.0)
        assert np.trace(p.covariance) > np.trace(t.covariance)
        assert kf_step(t, None, CFG).time_since_update == 1

    def test_two_point_after_gap(self):
        t = KalmanTrack.from_box(box_at(0, 0), CFG)
        t = kf_step(t, None, CFG)
        t = kf_step(t, box_at(8, 4), CFG)
        np.testing.assert_allclose(t.state[4:6], [4, 2], atol=1e-12)

    def test_classic_init(self):
        cfg = replace(CFG, two_point_velocity_init=False)
        t = KalmanTrack.from_box(box_at(0, 0), cfg)
        t = kf_step(t, box_at(3, 0), cfg)
        assert 0 < t.state[4] < 3

    def test_exact_from_third_observation(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            c0, v = rng.uniform(0, 500, 2), rng.uniform(-10, 10, 2)
            s0, sv = rng.uniform(20, 80, 2), rng.uniform(-0.5, 0.5, 2)
            cs = [c0 + k * v for k in range(8)]
            ss = [s0 + k * sv for k in range(8)]
            t = KalmanTrack.from_box(box_at(*cs[0], *ss[0]), CFG)
            for k in range(1, 7):
                t = kf_step(t, box_at(*cs[k], *ss[k]), CFG)
                if k >= 2:
                    ref_c, ref_s = kalman_cv_forecast(cs[:k + 1], ss[:k + 1])
                    got = kf_forecast(t).to_cxcywh()
                    assert np.max(np.abs(got - np.concatenate([ref_c, ref_s]))) < 1e-9

    def test_covariance_psd_over_cycles(self):
        rng = np.random.default_rng(0)
        t = KalmanTrack.from_box(box_at(100, 100), CFG)
        for _ in range(1000):
            z = None if rng.random() < 0.3 else box_at(*rng.uniform(50, 150, 2),
                                                       *rng.uniform(10, 40, 2))
            t = kf_step(t, z, CFG, dt=float(rng.integers(1, 3)))
            P = t.covariance
            np.testing.assert_allclose(P, P.T, atol=1e-9)
            assert np.linalg.eigvalsh(P).min() >= -1e-9 * max(1.0, np.abs(P).max())

    def test_non_psd_rejected(self):
        t = KalmanTrack.from_box(box_at(0, 0), CFG)
        bad = replace(t, covariance=-np.eye(8))
        with pytest.raises(NumericalError):
            kf_predict(bad, CFG)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            KFConfig(process_noise=0)
        with pytest.raises(ValueError):
            KFConfig(max_age=-1)


class TestKalmanAgent:
    def test_forecasts_match_next_gt(self):
        s = separated_scene()
        agent = KalmanAgent(CFG)
        state = agent.initial_state(s.frames[0])
        for t, f in enumerate(s.frames[:-1]):
            out, state = agent.process(f, state)
            if t >= 1:
                got = sorted((d.category, d.box.as_tuple()) for d in out)
                want = sorted((g.category, g.box.as_tuple()) for g in s.frames[t + 1].gt)
                np.testing.assert_allclose([b for _, b in got], [b for _, b in want], atol=1e-9)

    def test_static_scene(self):
        objs = (MovingObject((100.0, 100.0), (0.0, 0.0), (30.0, 30.0)),)
        s = generate_stream(SceneConfig(frame_count=5, objects=objs))
        agent = KalmanAgent(CFG)
        state = agent.initial_state(s.frames[0])
        for f in s.frames:
            out, state = agent.process(f, state)
            assert [d.box for d in out] == [g.box for g in f.gt]

    def test_aging(self):
        objs = (MovingObject((100.0, 100.0), (2.0, 0.0), (30.0, 30.0), despawn=4),)
        s = generate_stream(SceneConfig(frame_count=12, objects=objs))
        agent = KalmanAgent(CFG)
        state = agent.initial_state(s.frames[0])
        counts = []
        for f in s.frames:
            out, state = agent.process(f, state)
            counts.append(len(out))
        assert counts[:4] == [1, 1, 1, 1]
        assert sum(counts[4:]) == CFG.max_age
        assert counts[-1] == 0 and len(state.tracks) == 0

    def test_deterministic(self):
        s = separated_scene(seed=3)
        a = simulate(s, KalmanAgent(CFG), LatencyModel.constant(0.02))
        b = simulate(s, KalmanAgent(CFG), LatencyModel.constant(0.02))
        assert a == b


def cv_weights():
    W = np.zeros((4, 9))
    W[:, 0:4] = -np.eye(4)
    W[:, 4:8] = np.eye(4)
    return W


class TestLinearForecaster:
    def test_cv_model_is_exact(self):
        s = separated_scene()
        model = LinearForecaster(cv_weights())
        b = build_batch(build_triplets(s))
        assert np.max(forecast_errors(model, b)) < 1e-12

    def test_json_round_trip(self):
        m = LinearForecaster(np.arange(36, dtype=float).reshape(4, 9) / 7)
        back = LinearForecaster.from_json(m.to_json({"seed": 1}))
        np.testing.assert_array_equal(back.weights, m.weights)

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LinearForecaster(np.zeros((3, 9)))
        with pytest.raises(ValueError):
            LinearForecaster(np.full((4, 9), np.nan))

    def test_agent_first_frame_duplicates_buffer(self):
        s = separated_scene()
        agent = LinearForecasterAgent(LinearForecaster(cv_weights()))
        state = agent.initial_state(s.frames[0])
        out, _ = agent.process(s.frames[0], state)
        # static history: the forecast for the first frame is the frame itself
        np.testing.assert_allclose([d.box.as_tuple() for d in out],
                                   [g.box.as_tuple() for g in s.frames[0].gt], atol=1e-9)

    def test_agent_exact_after_first_frame(self):
        s = separated_scene()
        tr = simulate(s, LinearForecasterAgent(LinearForecaster(cv_weights())),
                      LatencyModel.constant(0.02))
        for p in pair_for_sap(tr, s)[2:]:
            got = sorted(d.box.as_tuple() for d in p.detections)
            want = sorted(g.box.as_tuple() for g in s.frames[p.frame_index].gt)
            np.testing.assert_allclose(got, want, atol=1e-9)


class TestTraining:
    def test_build_batch_skips_incomplete_chains(self):
        objs = (MovingObject((100.0, 100.0), (1.0, 0.0), (30.0, 30.0)),
                MovingObject((400.0, 100.0), (1.0, 0.0), (30.0, 30.0), spawn=2))
        s = generate_stream(SceneConfig(frame_count=5, objects=objs))
        b = build_batch(build_triplets(s))
        # triplets (0,1,2), (1,2,3), (2,3,4): second object usable only in the last
        assert len(b) == 4
        np.testing.assert_array_equal(b.group, [0, 1, 2, 2])
        with pytest.raises(ValueError):
            build_batch([])

    def test_static_converges(self):
        objs = tuple(MovingObject((100.0 + 200 * k, 200.0), (0.0, 0.0), (40.0 + 10 * k, 50.0))
                     for k in range(4))
        s = generate_stream(SceneConfig(frame_count=10, objects=objs))
        model, log = train_linear_forecaster(build_triplets(s), TrainConfig(epochs=300))
        assert log[-1].loss < 1e-4

    def test_deterministic(self):
        trip = build_triplets(generate_stream(mixed_speed_config(1, 3, 1)))
        cfg = TrainConfig(epochs=40, seed=9)
        m1, l1 = train_linear_forecaster(trip, cfg)
        m2, l2 = train_linear_forecaster(trip, cfg)
        np.testing.assert_array_equal(m1.weights, m2.weights)
        assert l1 == l2
        m3, _ = train_linear_forecaster(trip, replace(cfg, seed=10))
        assert not np.array_equal(m1.weights, m3.weights)

    def test_fast_weights_exceed_slow(self):
        trip = [t for v in range(2)
                for t in build_triplets(generate_stream(mixed_speed_config(v, 6, 2)))]
        _, log = train_linear_forecaster(trip, TrainConfig(epochs=60))
        assert all(r.mean_w_fast > r.mean_w_slow for r in log)

    @pytest.mark.parametrize("seed", range(4))
    def test_loss_non_increasing_with_backoff(self, seed):
        trip = build_triplets(generate_stream(mixed_speed_config(seed, 4, 2)))
        batch = build_batch(trip, input_noise_sigma=1.0, seed=seed)
        lr = 0.05
        for _ in range(12):
            cfg = TrainConfig(lr=lr, epochs=60, seed=seed, tal_enabled=False, momentum=0.0,
                              cosine_schedule=False)
            _, log = train_linear_forecaster([], cfg, batch=batch)
            losses = np.array([r.loss for r in log])
            if np.all(np.diff(losses) <= 1e-15):
                break
            lr /= 2
        else:
            pytest.fail("no learning rate gave a non-increasing loss")
        assert losses[-1] < losses[0]

    def test_log_csv(self):
        trip = build_triplets(generate_stream(mixed_speed_config(0, 2, 1)))
        _, log = train_linear_forecaster(trip, TrainConfig(epochs=3))
        rows = list(csv.reader(io.StringIO(log_to_csv(log))))
        assert rows[0] == ["epoch", "loss", "mean_w_fast", "mean_w_slow"]
        assert len(rows) == 4

    @pytest.mark.parametrize("kw", [{"lr": 0}, {"momentum": 1.0}, {"epochs": 0},
                                    {"normalize_scope": "video"}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestGradCheck:
    def test_seed_one(self):
        rng = np.random.default_rng(1)
        assert grad_check(LinearForecaster(0.1 * rng.standard_normal((4, 9))), random_batch(1)) < 1e-4

    def test_zero_model(self):
        assert grad_check(LinearForecaster(), random_batch(1)) < 1e-4

    def test_with_trend_weights(self):
        b = random_batch(2)
        w = np.random.default_rng(2).uniform(0.5, 2.0, len(b))
        assert grad_check(LinearForecaster(), b, w) < 1e-4

    def test_linear_in_weights(self):
        b = random_batch(3)
        W = 0.1 * np.random.default_rng(3).standard_normal((4, 9))
        w = np.random.default_rng(4).uniform(0.5, 2.0, len(b))
        np.testing.assert_array_equal(weighted_l1_grad(W, b, 2 * w), 2 * weighted_l1_grad(W, b, w))

    def test_detects_wrong_gradient(self):
        wrong = lambda W, b, w: 2 * weighted_l1_grad(W, b, w)  # noqa: E731
        assert grad_check(LinearForecaster(), random_batch(1), grad_fn=wrong) > 0.1

    def test_loss_value(self):
        b = random_batch(5)
        W = np.zeros((4, 9))
        manual = np.mean(np.abs(b.current - b.target).sum(axis=1))
        assert weighted_l1(W, b, np.ones(len(b))) == pytest.approx(manual, rel=1e-14)
