"""File formats: IMU / feature-track CSV, trajectory text, loop candidates,
and the line-oriented run configuration."""

from __future__ import annotations

import numpy as np

from .estimator import FeatureTrack
from .geometry import quat_canonical, rot_to_quat, rot_zyx
from .initialization import ExtrinsicCalib, UpToScaleFrame
from .preintegration import BiasState, ImuSample, NoiseParams
from .simulator import LoopCandidate, ScenarioConfig


class FormatError(ValueError):
    """Malformed input file; message carries the offending line number."""


# ---------------------------------------------------------------------------
# IMU CSV: timestamp_ns, wx, wy, wz, ax, ay, az


def write_imu_csv(path, samples: list[ImuSample]) -> None:
    with open(path, "w") as f:
        f.write("#timestamp_ns,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            f.write(
                "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n"
                % (round(s.t * 1e9), *s.gyro, *s.accel)
            )


def read_imu_csv(path) -> list[ImuSample]:
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(parts)}")
            try:
                t = int(parts[0]) * 1e-9
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            samples.append(ImuSample(t, np.array(vals[3:6]), np.array(vals[0:3])))
    if len(samples) < 2:
        raise FormatError(f"{path}: needs at least two IMU samples")
    return samples


# ---------------------------------------------------------------------------
# feature tracks CSV: timestamp_ns, feature_id, ux, uy, uz


def write_tracks_csv(path, tracks: list[FeatureTrack]) -> None:
    rows = []
    for tr in tracks:
        for t, ray in zip(tr.times, tr.rays):
            rows.append((round(t * 1e9), tr.feature_id, ray))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as f:
        f.write("#timestamp_ns,feature_id,ux,uy,uz\n")
        for ts, fid, ray in rows:
            f.write("%d,%d,%.9g,%.9g,%.9g\n" % (ts, fid, ray[0], ray[1], ray[2]))


def read_tracks_csv(path) -> list[FeatureTrack]:
    tracks: dict[int, FeatureTrack] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 columns, got {len(parts)}")
            try:
                t = int(parts[0]) * 1e-9
                fid = int(parts[1])
                ray = np.array([float(x) for x in parts[2:5]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            track = tracks.setdefault(fid, FeatureTrack(fid))
            try:
                track.add(t, ray)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return [tracks[k] for k in sorted(tracks)]


# ---------------------------------------------------------------------------
# trajectories: "timestamp_s tx ty tz qx qy qz qw", one pose per line


def write_trajectory(path, times, positions, quaternions) -> None:
    with open(path, "w") as f:
        for t, p, q in zip(times, positions, quaternions):
            f.write(
                "%.9f %.9f %.9f %.9f %.9g %.9g %.9g %.9g\n"
                % (t, p[0], p[1], p[2], q[1], q[2], q[3], q[0])
            )


def read_trajectory(path):
    times, ps, qs = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            times.append(vals[0])
            ps.append(vals[1:4])
            qs.append([vals[7], vals[4], vals[5], vals[6]])  # wxyz internal
    if not times:
        raise FormatError(f"{path}: empty trajectory")
    return np.array(times), np.array(ps), quat_canonical(np.array(qs))


def read_sfm_poses(path) -> list[UpToScaleFrame]:
    """Up-to-scale pose stream in trajectory format (scale is arbitrary)."""
    times, ps, qs = read_trajectory(path)
    return [UpToScaleFrame(t, q, p) for t, p, q in zip(times, ps, qs)]


def write_sfm_poses(path, frames: list[UpToScaleFrame]) -> None:
    write_trajectory(
        path, [f.t for f in frames], [f.p_bar for f in frames], [f.q_c0_ck for f in frames]
    )


# ---------------------------------------------------------------------------
# loop candidates: header "LOOP query_t candidate_t" then correspondence rows
# "feature_id cux cuy cuz qux quy quz"


def write_loops(path, candidates: list[LoopCandidate]) -> None:
    with open(path, "w") as f:
        for c in candidates:
            f.write("LOOP %.9f %.9f\n" % (c.query_t, c.candidate_t))
            for fid, rc, rq in zip(c.feature_ids, c.rays_candidate, c.rays_query):
                f.write(
                    "%d %.9g %.9g %.9g %.9g %.9g %.9g\n"
                    % (fid, rc[0], rc[1], rc[2], rq[0], rq[1], rq[2])
                )


def read_loops(path) -> list[LoopCandidate]:
    candidates = []
    current = None

    def flush():
        if current is None:
            return
        fids, rcs, rqs = current["rows"]
        if fids:
            candidates.append(
                LoopCandidate(
                    current["query_t"], current["candidate_t"],
                    np.array(fids, dtype=int), np.array(rqs), np.array(rcs),
                    np.ones(len(fids), dtype=bool), None, None,
                )
            )

    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "LOOP":
                if len(parts) != 3:
                    raise FormatError(f"{path}:{lineno}: malformed LOOP header")
                flush()
                current = {
                    "query_t": float(parts[1]),
                    "candidate_t": float(parts[2]),
                    "rows": ([], [], []),
                }
            else:
                if current is None:
                    raise FormatError(f"{path}:{lineno}: correspondence before LOOP header")
                if len(parts) != 7:
                    raise FormatError(f"{path}:{lineno}: expected 7 columns, got {len(parts)}")
                try:
                    fid = int(parts[0])
                    vals = [float(x) for x in parts[1:]]
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
                fids, rcs, rqs = current["rows"]
                fids.append(fid)
                rcs.append(vals[0:3])
                rqs.append(vals[3:6])
    flush()
    return candidates


# ---------------------------------------------------------------------------
# run configuration: line-oriented "key = value"; unknown keys are hard errors


_SCALAR_KEYS = {
    "duration", "imu_rate", "cam_rate", "sigma_a", "sigma_w", "sigma_ba", "sigma_bw",
    "roll_amp", "pitch_amp", "roll_cycles", "pitch_cycles",
    "landmark_r_min", "landmark_r_max", "landmark_z_min", "landmark_z_max",
    "fov_deg", "pixel_sigma_px", "focal", "min_range",
    "scale_hidden", "sfm_rot_sigma", "sfm_pos_sigma",
    "loop_radius", "loop_min_gap", "loop_outliers",
    "blackout_start", "blackout_duration",
    "period", "width", "z0", "z_amp", "radius", "speed", "amp_y", "freq_y",
    "amp_z", "freq_z", "start", "amp", "freq", "ramp",
    "est_sigma_a", "est_sigma_w", "est_sigma_ba", "est_sigma_bw",
    "parallax_px", "pnp_threshold", "epipolar_threshold",
}
_INT_KEYS = {
    "seed", "landmarks", "loop_max_per_query", "window_size", "max_features",
    "min_tracked", "motion_ba_depth", "min_loop_inliers", "edge_fanout",
    "graph_capacity", "init_window", "solver_max_iterations", "align_count",
}
_BOOL_KEYS = {"optimize_extrinsic", "disable_loop", "test_mode"}
_VEC_KEYS = {"bias_a", "bias_w", "extrinsic_p", "extrinsic_rpy_deg"}
_STR_KEYS = {"trajectory"}

_TRAJ_PARAM_KEYS = {
    "period", "width", "z0", "z_amp", "radius", "speed", "amp_y", "freq_y",
    "amp_z", "freq_z", "start", "amp", "freq", "ramp",
}


def parse_config(path) -> dict:
    """Read key = value lines into a typed dict; unknown keys are errors."""
    out: dict = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key in _STR_KEYS:
                    out[key] = val
                elif key in _INT_KEYS:
                    out[key] = int(val)
                elif key in _BOOL_KEYS:
                    out[key] = val.lower() in ("1", "true", "yes", "on")
                elif key in _VEC_KEYS:
                    vec = np.array([float(x) for x in val.replace(",", " ").split()])
                    if vec.shape != (3,):
                        raise ValueError("expected three components")
                    out[key] = vec
                elif key in _SCALAR_KEYS:
                    out[key] = float(val)
                else:
                    raise FormatError(f"{path}:{lineno}: unknown key '{key}'")
            except FormatError:
                raise
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None
    return out


def scenario_from_config(cfg: dict) -> ScenarioConfig:
    traj = {k: cfg[k] for k in _TRAJ_PARAM_KEYS if k in cfg}
    noise = NoiseParams(
        cfg.get("sigma_a", 0.0), cfg.get("sigma_w", 0.0),
        cfg.get("sigma_ba", 0.0), cfg.get("sigma_bw", 0.0),
    )
    bias0 = BiasState(cfg.get("bias_a", np.zeros(3)), cfg.get("bias_w", np.zeros(3)))
    kwargs = dict(
        trajectory=cfg.get("trajectory", "figure_eight"),
        duration=cfg.get("duration", 60.0),
        imu_rate=cfg.get("imu_rate", 200.0),
        cam_rate=cfg.get("cam_rate", 5.0),
        seed=cfg.get("seed", 0),
        traj=traj,
        noise=noise,
        bias0=bias0,
    )
    if "extrinsic_p" in cfg or "extrinsic_rpy_deg" in cfg:
        rpy = np.deg2rad(cfg.get("extrinsic_rpy_deg", np.array([-90.0, 0.0, -90.0])))
        q = quat_canonical(rot_to_quat(rot_zyx(rpy[0], rpy[1], rpy[2])))
        kwargs["extrinsic"] = ExtrinsicCalib(cfg.get("extrinsic_p", np.zeros(3)), q)
    for name in (
        "roll_amp", "pitch_amp", "roll_cycles", "pitch_cycles",
        "fov_deg", "pixel_sigma_px", "focal", "min_range",
        "scale_hidden", "sfm_rot_sigma", "sfm_pos_sigma",
        "loop_radius", "loop_min_gap", "loop_max_per_query",
        "landmark_r_min", "landmark_r_max", "landmark_z_min", "landmark_z_max",
        "blackout_start", "blackout_duration",
    ):
        if name in cfg:
            kwargs[name] = cfg[name]
    if "landmarks" in cfg:
        kwargs["n_landmarks"] = cfg["landmarks"]
    if "loop_outliers" in cfg:
        kwargs["loop_outlier_frac"] = cfg["loop_outliers"]
    return ScenarioConfig(**kwargs)
