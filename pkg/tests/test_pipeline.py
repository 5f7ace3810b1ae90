import os
import subprocess
import sys

import numpy as np
import pytest

from monovio import dataio
from monovio.cli import main as cli_main
from monovio.estimator import EstimatorConfig, FeatureTrack
from monovio.pipeline import (
    PipelineConfig,
    TrackObservationIndex,
    VioPipeline,
    align_4dof,
    evaluate_ate,
    EvaluationError,
    pipeline_from_scenario,
    tilt_errors,
)
from monovio.preintegration import BiasState, ImuSample, NoiseParams
from monovio.simulator import ScenarioConfig, build_scenario, camera_times
from monovio import geometry as geo

MODEL = NoiseParams(2e-3, 2e-5, 1e-6, 1e-7)


def quick_config(**kw):
    base = dict(duration=16.0, cam_rate=5.0, seed=3, traj={"period": 12.0})
    base.update(kw)
    return ScenarioConfig(**base)


class TestEvaluateAte:
    def test_zero_for_identical(self):
        t = np.linspace(0, 10, 51)
        p = np.stack([np.cos(t), np.sin(t), 0.1 * t], axis=1)
        res = evaluate_ate(t, p, t, p)
        assert res["rmse"] == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(res["final_drift"]) < 1e-12

    def test_alignment_absorbs_yaw_and_translation(self):
        t = np.linspace(0, 10, 51)
        p_gt = np.stack([np.cos(t), np.sin(t), 0.1 * t], axis=1)
        R = geo.rot_zyx(0.0, 0.0, np.deg2rad(15.0))
        p_est = p_gt @ R.T + np.array([2.0, -1.0, 0.5])
        res = evaluate_ate(t, p_est, t, p_gt)
        assert res["rmse"] < 1e-10
        assert np.linalg.norm(res["final_drift"]) < 1e-10

    def test_constructed_drift_percentage(self):
        t = np.linspace(0, 100, 501)
        p_gt = np.stack([0.5 * t, np.zeros_like(t), np.zeros_like(t)], axis=1)
        # inject drift growing linearly after the alignment window
        drift = np.zeros_like(p_gt)
        drift[150:, 1] = np.linspace(0, 0.5, len(t) - 150)
        res = evaluate_ate(t, p_gt + drift, t, p_gt, align_count=150)
        expected_pct = 0.5 / res["path_length"] * 100
        assert res["drift_pct"] == pytest.approx(expected_pct, rel=0.01)

    def test_too_few_matches(self):
        with pytest.raises(EvaluationError):
            evaluate_ate([0.0], [[0, 0, 0]], [10.0], [[0, 0, 0]])

    def test_6dof_mode(self):
        rng = np.random.default_rng(0)
        t = np.linspace(0, 5, 26)
        p_gt = rng.standard_normal((26, 3)).cumsum(axis=0) * 0.1
        R = geo.quat_to_rot(geo.quat_exp([0.2, -0.1, 0.4]))
        p_est = p_gt @ R.T + np.array([1.0, 2.0, 3.0])
        res = evaluate_ate(t, p_est, t, p_gt, mode="6dof")
        assert res["rmse"] < 1e-10


class TestDataIO:
    def test_imu_round_trip(self, tmp_path):
        samples = [
            ImuSample(k * 0.005, np.array([0.1 * k, -0.2, 9.8]), np.array([0.01, 0.02 * k, -0.03]))
            for k in range(10)
        ]
        path = tmp_path / "imu.csv"
        dataio.write_imu_csv(path, samples)
        back = dataio.read_imu_csv(path)
        assert len(back) == 10
        for a, b in zip(samples, back):
            assert a.t == pytest.approx(b.t, abs=1e-9)
            np.testing.assert_allclose(a.accel, b.accel, rtol=1e-8)
            np.testing.assert_allclose(a.gyro, b.gyro, rtol=1e-8)

    def test_imu_rejects_malformed(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1000,0.1,0.2\n")
        with pytest.raises(dataio.FormatError, match="bad.csv:1"):
            dataio.read_imu_csv(path)

    def test_tracks_round_trip(self, tmp_path):
        tr = FeatureTrack(7)
        tr.add(0.2, [0.1, 0.2, 0.97])
        tr.add(0.4, [0.15, 0.18, 0.97])
        path = tmp_path / "tracks.csv"
        dataio.write_tracks_csv(path, [tr])
        back = dataio.read_tracks_csv(path)
        assert back[0].feature_id == 7
        assert len(back[0]) == 2
        np.testing.assert_allclose(back[0].rays[0], tr.rays[0], atol=1e-8)

    def test_trajectory_round_trip(self, tmp_path):
        t = np.array([0.0, 0.1])
        p = np.array([[1, 2, 3], [4, 5, 6.0]])
        q = np.array([geo.quat_exp([0.1, 0, 0.2]), geo.quat_exp([0, 0.3, 0])])
        path = tmp_path / "traj.txt"
        dataio.write_trajectory(path, t, p, q)
        t2, p2, q2 = dataio.read_trajectory(path)
        np.testing.assert_allclose(t2, t, atol=1e-9)
        np.testing.assert_allclose(p2, p, atol=1e-8)
        for a, b in zip(q, q2):
            assert geo.quat_angle_between(a, b) < 1e-7

    def test_config_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("duration = 10\nnot_a_key = 5\n")
        with pytest.raises(dataio.FormatError, match="unknown key"):
            dataio.parse_config(path)

    def test_config_parses_vectors_and_comments(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("duration = 12.5  # comment\nbias_w = 0.01, -0.02, 0.03\nseed = 4\n")
        cfg = dataio.parse_config(path)
        assert cfg["duration"] == 12.5
        np.testing.assert_allclose(cfg["bias_w"], [0.01, -0.02, 0.03])
        assert cfg["seed"] == 4

    def test_loops_round_trip(self, tmp_path):
        from monovio.simulator import synthesize_loops, make_ground_truth

        cfg = quick_config(duration=26.0, loop_min_gap=8.0, loop_radius=0.8)
        gt = make_ground_truth(cfg)
        loops = synthesize_loops(gt, camera_times(cfg), seed=1)
        assert loops
        path = tmp_path / "loops.txt"
        dataio.write_loops(path, loops)
        back = dataio.read_loops(path)
        assert len(back) == len(loops)
        assert back[0].query_t == pytest.approx(loops[0].query_t, abs=1e-6)
        np.testing.assert_allclose(back[0].rays_candidate, loops[0].rays_candidate, atol=1e-8)


class TestPipeline:
    def test_noise_free_short_run(self):
        cfg = quick_config()
        data = build_scenario(cfg)
        pc = PipelineConfig(enable_loops=False, model_noise=MODEL)
        pipe = pipeline_from_scenario(data, pc)
        rep = pipe.run()
        assert rep.failure_events == []
        assert rep.init_events and rep.init_events[0][1] == "init"
        gt = data.ground_truth
        res = evaluate_ate(rep.window_times, rep.window_p, gt.t, gt.p, "4dof", 50)
        assert res["drift_pct"] < 0.1
        idx = [int(round(t * cfg.imu_rate)) for t in rep.window_times]
        assert np.rad2deg(tilt_errors(rep.window_q, gt.q[idx]).max()) < 0.2

    def test_imu_rate_output_dense(self):
        cfg = quick_config(duration=10.0)
        data = build_scenario(cfg)
        pipe = pipeline_from_scenario(data, PipelineConfig(enable_loops=False, model_noise=MODEL))
        rep = pipe.run()
        assert rep.rate_times is not None
        # IMU-rate stream is much denser than the window stream
        assert len(rep.rate_times) > 5 * len(rep.window_times)
        assert np.all(np.diff(rep.rate_times) > 0)

    def test_blackout_triggers_failure_and_new_segment(self):
        cfg = quick_config(
            duration=30.0, seed=3,
            noise=NoiseParams(0.02, 2e-4, 1e-4, 1e-5), pixel_sigma_px=1.5,
            bias0=BiasState(accel=[0.02, -0.01, 0.015], gyro=[0.003, -0.002, 0.004]),
            blackout_start=12.0, blackout_duration=2.0,
        )
        data = build_scenario(cfg)
        pipe = pipeline_from_scenario(data, PipelineConfig(enable_loops=True))
        rep = pipe.run()
        assert any(reason == "tracking" for _, reason in rep.failure_events)
        assert any(kind == "reinit" for _, kind in rep.init_events)
        assert rep.segments == 2
        graph = pipe.graph
        for e in graph.sequential_edges:
            assert graph.vertices[e.from_id].segment == graph.vertices[e.to_id].segment

    def test_file_driven_matches_formats(self, tmp_path):
        cfg = quick_config(duration=8.0)
        data = build_scenario(cfg)
        dataio.write_imu_csv(tmp_path / "imu.csv", data.imu)
        dataio.write_tracks_csv(tmp_path / "tracks.csv", data.tracks)
        dataio.write_sfm_poses(tmp_path / "sfm.txt", data.sfm)
        imu = dataio.read_imu_csv(tmp_path / "imu.csv")
        tracks = dataio.read_tracks_csv(tmp_path / "tracks.csv")
        sfm = dataio.read_sfm_poses(tmp_path / "sfm.txt")
        obs = TrackObservationIndex(tracks)
        pipe = VioPipeline(
            imu, obs.times(), obs, sfm, cfg.extrinsic,
            PipelineConfig(enable_loops=False, model_noise=MODEL), seed=3,
        )
        rep = pipe.run()
        assert rep.failure_events == []
        gt = data.ground_truth
        res = evaluate_ate(rep.window_times, rep.window_p, gt.t, gt.p, "4dof", 50)
        assert res["drift_pct"] < 0.5


class TestCli:
    def _write_cfg(self, tmp_path, duration=10.0):
        path = tmp_path / "scenario.cfg"
        path.write_text(
            "trajectory = figure_eight\n"
            f"duration = {duration}\n"
            "period = 12\n"
            "seed = 5\n"
            "cam_rate = 5\n"
            "imu_rate = 200\n"
        )
        return path

    def test_simulate_and_run(self, tmp_path):
        cfg = self._write_cfg(tmp_path)
        out_sim = tmp_path / "sim"
        assert cli_main(["simulate", "--scenario", str(cfg), "--out-dir", str(out_sim)]) == 0
        for name in ("imu.csv", "tracks.csv", "sfm.txt", "ground_truth.txt", "loops.txt"):
            assert (out_sim / name).exists()
        out_run = tmp_path / "run"
        assert cli_main([
            "run", "--scenario", str(cfg), "--out-dir", str(out_run), "--disable-loop",
        ]) == 0
        assert (out_run / "traj_window.txt").exists()
        assert (out_run / "report.txt").exists()

    def test_determinism_bit_identical(self, tmp_path):
        cfg = self._write_cfg(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli_main(["run", "--scenario", str(cfg), "--out-dir", str(a)]) == 0
        assert cli_main(["run", "--scenario", str(cfg), "--out-dir", str(b)]) == 0
        for name in ("traj_window.txt", "traj_imu_rate.txt", "report.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_eval_subcommand(self, tmp_path, capsys):
        t = np.linspace(0, 5, 26)
        p = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
        q = np.tile(geo.quat_identity(), (26, 1))
        dataio.write_trajectory(tmp_path / "est.txt", t, p, q)
        dataio.write_trajectory(tmp_path / "gt.txt", t, p, q)
        assert cli_main([
            "eval", "--estimate", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt"),
        ]) == 0
        out = capsys.readouterr().out
        assert "rmse = 0" in out

    def test_corrupt_csv_row_diagnostic(self, tmp_path, capsys):
        bad = tmp_path / "imu.csv"
        bad.write_text("100,0.1,0.2,0.3,0.4,0.5,oops\n" )
        tracks = tmp_path / "tracks.csv"
        tracks.write_text("100,1,0,0,1\n")
        rc = cli_main([
            "run", "--imu", str(bad), "--tracks", str(tracks),
            "--out-dir", str(tmp_path / "out"),
        ])
        assert rc == 1
        err = capsys.readouterr().err
        assert "imu.csv:1" in err

    def test_posegraph_subcommand(self, tmp_path):
        from monovio.posegraph import PoseGraph, vertex_from_state

        g = PoseGraph()
        for k in range(5):
            g.add_keyframe(vertex_from_state(k, float(k), np.array([0.5 * k, 0, 0]), geo.quat_identity()))
        src = tmp_path / "g.txt"
        g.save(src)
        dst = tmp_path / "g2.txt"
        assert cli_main([
            "posegraph", "--input", str(src), "--output", str(dst), "--optimize",
        ]) == 0
        g2 = PoseGraph.load(dst)
        assert len(g2) == 5


class TestAlignment4Dof:
    def test_recovers_injected_transform(self):
        rng = np.random.default_rng(1)
        p = rng.standard_normal((40, 3)).cumsum(axis=0)
        yaw = 0.7
        R = geo.rot_zyx(0.0, 0.0, yaw)
        T = np.array([1.5, -2.0, 0.3])
        p_est = (p - T) @ R  # inverse transform: R^T (p - T) applied rowwise
        R_fit, T_fit = align_4dof(p_est, p)
        np.testing.assert_allclose(R_fit, R, atol=1e-10)
        np.testing.assert_allclose(T_fit, T, atol=1e-10)
