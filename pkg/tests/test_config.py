import zlib

import numpy as np
import pytest

from streamperc.config import (ConfigFileError, DEFAULT_SEED, RunConfig, derive_seed,
                               describe_keys, load_config, parse_config)
from streamperc.stream_sim import LatencyModel


class TestDeriveSeed:
    def test_definition(self):
        ss = np.random.SeedSequence([7, zlib.crc32(b"scene/0")])
        assert derive_seed(7, "scene/0") == int(ss.generate_state(1, dtype=np.uint64)[0])

    def test_distinct_components_and_seeds(self):
        names = ["scene/0", "scene/1", "latency", "train", "detector/video000"]
        seeds = {derive_seed(0, n) for n in names} | {derive_seed(1, n) for n in names}
        assert len(seeds) == 2 * len(names)

    def test_default_seed(self):
        assert RunConfig().global_seed == DEFAULT_SEED
        assert RunConfig(seed=12).global_seed == 12


class TestParsing:
    def test_empty_gives_defaults(self):
        assert parse_config(None) == RunConfig()
        assert load_config(None) == RunConfig()

    def test_nested_override(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 3\nscene:\n  frame_count: 12\n  image_size: [320, 240]\n"
                     "latency:\n  ms: 40\n")
        cfg = load_config(str(p))
        assert cfg.seed == 3 and cfg.scene.frame_count == 12
        assert cfg.scene.image_size == (320, 240)
        assert cfg.scene.n_objects == 5
        assert cfg.latency.ms == 40

    @pytest.mark.parametrize("doc", [{"bogus": 1}, {"scene": {"frames": 3}},
                                     {"train": {"lr": 0.1, "learning_rate": 0.1}}])
    def test_unknown_keys_rejected(self, doc):
        with pytest.raises(ConfigFileError, match="unknown key"):
            parse_config(doc)

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigFileError):
            parse_config({"scene": [1, 2]})

    def test_file_errors(self, tmp_path):
        with pytest.raises(ConfigFileError):
            load_config(str(tmp_path / "missing.yaml"))
        bad = tmp_path / "bad.yaml"
        bad.write_text("scene: [unclosed\n")
        with pytest.raises(ConfigFileError):
            load_config(str(bad))

    def test_describe_keys_lists_every_section(self):
        text = describe_keys()
        for key in ("seed", "scene.frame_count", "latency.kind", "train.momentum",
                    "tal.tau", "compare.speeds", "gradcheck.tolerance"):
            assert f"  {key} (default:" in text


class TestBuilders:
    def test_scene_seeds_follow_global(self):
        a, b = RunConfig(seed=1), RunConfig(seed=2)
        assert a.scene_config(0).rng_seed != b.scene_config(0).rng_seed
        assert a.scene_config(0).rng_seed != a.scene_config(1).rng_seed
        assert a.scene_config(0).rng_seed == RunConfig(seed=1).scene_config(0).rng_seed

    def test_explicit_objects(self):
        cfg = parse_config({"scene": {"objects": [
            {"center0": [10, 10], "velocity": [1, 0], "size": [5, 5]}]}})
        objs = cfg.scene_config().objects
        assert len(objs) == 1 and objs[0].velocity == (1.0, 0.0)

    def test_latency_models(self):
        assert RunConfig().latency_model().sample(0) == pytest.approx(0.025)
        assert RunConfig().latency_model(extra_ms=5).sample(0) == pytest.approx(0.030)
        cfg = parse_config({"latency": {"kind": "per_frame", "values_ms": [10, 20]}})
        assert cfg.latency_model().sample(1) == pytest.approx(0.020)
        cfg = parse_config({"latency": {"kind": "random", "mean_ms": 30, "jitter_ms": 5}})
        assert isinstance(cfg.latency_model(), LatencyModel)
        with pytest.raises(ConfigFileError):
            parse_config({"latency": {"kind": "poisson"}}).latency_model()

    def test_detector_default_is_exact(self):
        assert RunConfig().detector_config("v") is None
        cfg = parse_config({"detector": {"noise_sigma": 1.5}})
        d = cfg.detector_config("v")
        assert d.coordinate_noise_sigma == 1.5 and d.rng_seed == derive_seed(0, "detector/v")

    def test_ap_params(self):
        p = parse_config({"ap": {"iou_thresholds": [0.5]}}).ap_params()
        assert tuple(p.iou_thresholds) == (0.5,)
        assert RunConfig().ap_params().max_dets == 100

    def test_kf_config(self):
        kf = parse_config({"kalman": {"max_age": 5}}).kf_config()
        assert kf.max_age == 5
