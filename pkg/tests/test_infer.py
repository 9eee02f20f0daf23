import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import anomaly_map_bruteforce, gaussian_smooth_bruteforce, hull_bruteforce, mean_filter3d_bruteforce
from sdmae.config import ExperimentConfig, load_config
from sdmae.data import load_dataset
from sdmae.infer import (
    ScoringError,
    ScoreSeries,
    anomaly_map,
    frame_scores,
    inference_plan,
    localize,
    read_scores_csv,
    score_video,
    smooth_volume,
    temporal_gaussian,
    write_localization_csv,
    write_map_images,
    write_scores_csv,
)
from sdmae.model import init_model, load_checkpoint

STRATEGIES = ("T", "T_S", "T_TSD", "T_S_TSD")


class TestAnomalyMap:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_identical_frames(self, strategy, rng):
        x = rng.random((4, 4, 2))
        assert not anomaly_map(x, x, x, strategy).any()

    def test_single_pixel_fixture(self):
        x, xt, xs = (np.full((1, 1, 1), v) for v in (0.0, 0.5, 0.1))
        assert anomaly_map(x, xt, xs, "T_TSD")[0, 0] == pytest.approx(0.41, abs=1e-12)
        assert anomaly_map(x, xt, xs, "T")[0, 0] == pytest.approx(0.25, abs=1e-12)
        assert anomaly_map(x, xt, xs, "T_S")[0, 0] == pytest.approx(0.26, abs=1e-12)
        assert anomaly_map(x, xt, xs, "T_S_TSD")[0, 0] == pytest.approx(0.42, abs=1e-12)

    def test_default_strategy(self):
        assert ExperimentConfig().score_strategy == "T_TSD"
        x, xt, xs = (np.full((1, 1, 1), v) for v in (0.0, 0.5, 0.1))
        assert anomaly_map(x, xt, xs)[0, 0] == pytest.approx(0.41)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_matches_bruteforce(self, strategy, rng):
        for _ in range(5):
            x, xt, xs = (rng.random((5, 6, 3)) for _ in range(3))
            np.testing.assert_allclose(anomaly_map(x, xt, xs, strategy),
                                       anomaly_map_bruteforce(x, xt, xs, strategy), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 3, 3, 2), elements=st.floats(0, 1)))
    def test_nonnegative_and_dominance(self, frames):
        x, xt, xs = frames
        maps = {s: anomaly_map(x, xt, xs, s) for s in STRATEGIES}
        assert all((m >= 0).all() for m in maps.values())
        assert (maps["T_S_TSD"] >= maps["T_TSD"]).all()
        assert (maps["T_TSD"] >= maps["T"]).all()

    def test_predicted_map_added(self, rng):
        x = rng.random((4, 4, 1))
        pred = np.zeros((4, 4))
        pred[1, 2] = 0.5
        pred[0, 0] = 3.0  # clamped to 1
        pred[3, 3] = -1.0  # clamped to 0
        out = anomaly_map(x, x, x, "T_TSD", pred)
        expect = np.zeros((4, 4))
        expect[1, 2], expect[0, 0] = 0.25, 1.0
        np.testing.assert_allclose(out, expect)

    def test_errors(self):
        with pytest.raises(ValueError):
            anomaly_map(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)), np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            anomaly_map(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), "S")


class TestSmoothing:
    def test_constant_volume(self):
        v = np.full((4, 5, 6), 0.7)
        np.testing.assert_allclose(smooth_volume(v, (5, 5, 5)), v, atol=1e-12)

    def test_unit_kernel_identity(self, rng):
        v = rng.random((3, 4, 4))
        np.testing.assert_allclose(smooth_volume(v, (1, 1, 1)), v, atol=1e-15)

    def test_matches_bruteforce(self, rng):
        v = rng.random((5, 6, 7))
        np.testing.assert_allclose(smooth_volume(v, (3, 3, 3)), mean_filter3d_bruteforce(v, (3, 3, 3)), atol=1e-9)
        np.testing.assert_allclose(smooth_volume(v, (1, 3, 5)), mean_filter3d_bruteforce(v, (1, 3, 5)), atol=1e-9)

    def test_even_kernel(self):
        with pytest.raises(ValueError):
            smooth_volume(np.zeros((3, 3, 3)), (2, 3, 3))

    def test_linearity(self, rng):
        v = rng.random((4, 5, 5))
        for a in (0.0, 0.3, 2.0, 17.0):
            np.testing.assert_allclose(smooth_volume(a * v, (3, 3, 3)), a * smooth_volume(v, (3, 3, 3)), atol=1e-9)
            np.testing.assert_allclose(temporal_gaussian(a * v[:, 0, 0], 1.5),
                                       a * temporal_gaussian(v[:, 0, 0], 1.5), atol=1e-9)


class TestFrameScores:
    def test_zero(self):
        s = frame_scores(np.zeros((5, 3, 3)), 3.0)
        assert not s.raw.any() and not s.smoothed.any()

    def test_raw_is_per_frame_max(self, rng):
        maps = rng.random((6, 4, 4))
        np.testing.assert_array_equal(frame_scores(maps, 1.0).raw, maps.reshape(6, -1).max(axis=1))

    def test_delta_limit(self):
        raw = np.array([0, 0, 1, 0, 0], dtype=float)
        np.testing.assert_allclose(temporal_gaussian(raw, 1e-6), raw, atol=1e-12)

    def test_unit_sigma_matches_oracle(self):
        raw = np.array([0, 0, 1, 0, 0], dtype=float)
        np.testing.assert_allclose(temporal_gaussian(raw, 1.0), gaussian_smooth_bruteforce(raw, 1.0), atol=1e-12)

    def test_random_matches_oracle(self, rng):
        for sigma in (0.5, 1.0, 3.0):
            raw = rng.random(40)
            np.testing.assert_allclose(temporal_gaussian(raw, sigma), gaussian_smooth_bruteforce(raw, sigma),
                                       atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 2))),
           st.floats(0.05, 1.0))
    def test_spike_argmax_preserved(self, n_pos, sigma):
        n, pos = n_pos
        raw = np.zeros(n)
        raw[pos] = 1.0
        assert int(np.argmax(temporal_gaussian(raw, sigma))) == pos

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            frame_scores(np.zeros((2, 2, 2)), 0.0)


class TestLocalize:
    def test_empty(self):
        assert localize(np.zeros((16, 16)), 4, 0.1) == []

    def test_single_patch(self):
        m = np.zeros((16, 16))
        m[4:8, 8:12] = 1.0
        (region,) = localize(m, 4, 0.5)
        assert region.box == (8.0, 4.0, 12.0, 8.0)

    def test_block_hull_matches_oracle(self):
        m = np.zeros((16, 16))
        m[4:12, 0:8] = 1.0
        (region,) = localize(m, 4, 0.5)
        corners = [(c * 4 + dx, r * 4 + dy) for r in (1, 2) for c in (0, 1) for dx in (0, 4) for dy in (0, 4)]
        assert len(corners) == 16
        assert sorted(region.polygon) == [tuple(map(float, p)) for p in hull_bruteforce(corners)]
        assert region.box == (0.0, 4.0, 8.0, 12.0)

    def test_diagonal_patches_join(self):
        m = np.zeros((12, 12))
        m[0:4, 0:4] = m[4:8, 4:8] = 1.0
        assert len(localize(m, 4, 0.5)) == 1

    def test_separate_components(self):
        m = np.zeros((12, 12))
        m[0:4, 0:4] = m[8:12, 8:12] = 1.0
        assert len(localize(m, 4, 0.5)) == 2

    def test_l_shape_hull_matches_oracle(self):
        m = np.zeros((12, 12))
        m[0:4, 0:12] = m[4:12, 0:4] = 1.0
        (region,) = localize(m, 4, 0.5)
        hot = [(0, 0), (0, 1), (0, 2), (1, 0), (2, 0)]
        corners = [(c * 4 + dx, r * 4 + dy) for r, c in hot for dx in (0, 4) for dy in (0, 4)]
        assert sorted(region.polygon) == [tuple(map(float, p)) for p in hull_bruteforce(corners)]

    def test_negative_threshold(self):
        with pytest.raises(ValueError):
            localize(np.zeros((4, 4)), 2, -1.0)


class TestScoreVideo:
    def test_length_and_determinism(self, small_trained, small_toy):
        model, cfg, _, _ = small_trained
        video = small_toy[1][0]
        a, maps = score_video(model, video, cfg)
        b, _ = score_video(model, video, cfg)
        assert len(a) == len(video) and maps.shape == (len(video), 64, 64)
        np.testing.assert_array_equal(a.raw, b.raw)
        np.testing.assert_array_equal(a.smoothed, b.smoothed)
        # batching changes float summation order only
        c, _ = score_video(model, video, cfg, batch_size=7)
        np.testing.assert_allclose(c.raw, a.raw, rtol=1e-4)

    def test_abnormal_frames_score_higher(self, toy_pipeline):
        run = toy_pipeline["run"]
        cfg = load_config(run / "config.resolved", environ={})
        model = load_checkpoint(run / "checkpoints" / "student", cfg)
        for video in load_dataset(toy_pipeline["data"], cfg, "test"):
            s, _ = score_video(model, video, cfg)
            lab = video.labels.astype(bool)
            assert s.smoothed[lab].mean() > s.smoothed[~lab].mean(), video.video_id

    def test_untrained_student(self, toy_cfg, small_toy):
        model = init_model(toy_cfg)
        model.stage = "teacher"
        with pytest.raises(ScoringError, match="student"):
            score_video(model, small_toy[1][0], toy_cfg)
        s, _ = score_video(model, small_toy[1][0], toy_cfg.replace(score_strategy="T"))
        assert len(s) == len(small_toy[1][0])

    def test_inference_plan_is_keyed(self, toy_cfg):
        a = inference_plan(toy_cfg, "01", 3)
        np.testing.assert_array_equal(a.visible, inference_plan(toy_cfg, "01", 3).visible)
        assert not np.array_equal(a.visible, inference_plan(toy_cfg, "01", 4).visible)
        assert len(inference_plan(toy_cfg.replace(inference_mask_ratio=0.0), "01", 3).masked) == 0


class TestWriters:
    def test_scores_round_trip(self, tmp_path, rng):
        s = ScoreSeries("v1", rng.random(7), rng.random(7))
        write_scores_csv(tmp_path / "v1.csv", s)
        assert (tmp_path / "v1.csv").read_text().splitlines()[0] == "frame_index,raw_score,smoothed_score"
        back = read_scores_csv(tmp_path / "v1.csv")
        assert back.video_id == "v1"
        np.testing.assert_array_equal(back.raw, s.raw)
        np.testing.assert_array_equal(back.smoothed, s.smoothed)

    def test_localization_csv(self, tmp_path):
        m = np.zeros((8, 8))
        m[0:4, 4:8] = 1
        write_localization_csv(tmp_path / "loc.csv", [[], localize(m, 4, 0.5)])
        assert (tmp_path / "loc.csv").read_text() == "frame_index,x0,y0,x1,y1\n1,4,0,8,4\n"

    def test_map_images(self, tmp_path, rng):
        maps = rng.random((3, 8, 8)) * 5
        lo, hi = write_map_images(tmp_path / "maps", maps)
        assert (lo, hi) == (maps.min(), maps.max())
        assert len(list((tmp_path / "maps").glob("*.png"))) == 3
        assert "max = " in (tmp_path / "maps" / "scale.txt").read_text()
