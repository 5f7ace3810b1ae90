"""IMU pre-integration between image frames.

Accumulates buffered IMU samples into relative-motion terms (alpha, beta,
gamma) that are independent of the absolute start state, together with a
15x15 covariance over the error state (d_alpha, d_beta, d_theta, d_ba, d_bw)
and the Jacobian of that error state with respect to the linearization-point
biases. Mean propagation uses the midpoint rule with an exact quaternion
increment; covariance and Jacobian use the first-order (I + F dt) transition.

The accelerometer model is a_hat = R_bw (a_world + g_w) + b_a + n_a with
g_w = (0, 0, +9.81): a resting sensor at identity attitude reads +g on z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    quat_canonical,
    quat_exp,
    quat_identity,
    quat_inverse,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_to_rot,
    skew,
    small_angle_quat,
)

MAX_SAMPLE_GAP = 0.1  # seconds; larger steps are rejected as data gaps

# first-order bias correction is valid only near the linearization point;
# beyond these deltas callers should re-propagate
REPROP_ACCEL_THRESHOLD = 0.05  # m/s^2
REPROP_GYRO_THRESHOLD = 0.01  # rad/s


class PreintegrationError(ValueError):
    """Invalid sample stream fed to the pre-integrator."""


_EYE3 = np.eye(3)
_EYE15 = np.eye(15)


def so3_right_jacobian(theta_vec) -> np.ndarray:
    """Right Jacobian of SO(3): d exp(theta + d) ~ exp(theta) exp(Jr d)."""
    theta_vec = np.asarray(theta_vec, dtype=float)
    th = np.sqrt(theta_vec @ theta_vec)
    K = skew(theta_vec)
    if th < 1e-6:
        return _EYE3 - 0.5 * K + (1.0 / 6.0) * (K @ K)
    return (
        _EYE3
        - (1.0 - np.cos(th)) / th**2 * K
        + (th - np.sin(th)) / th**3 * (K @ K)
    )


@dataclass
class ImuSample:
    """One inertial measurement: time (s), specific force (m/s^2), body rate (rad/s)."""

    t: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)


@dataclass
class BiasState:
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))

    max_accel: float = 2.0
    max_gyro: float = 1.0

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float)
        if not (np.all(np.isfinite(self.accel)) and np.all(np.isfinite(self.gyro))):
            raise ValueError("bias must be finite")
        if np.linalg.norm(self.accel) >= self.max_accel:
            raise ValueError("accelerometer bias exceeds sanity bound")
        if np.linalg.norm(self.gyro) >= self.max_gyro:
            raise ValueError("gyroscope bias exceeds sanity bound")

    def copy(self) -> "BiasState":
        return BiasState(self.accel.copy(), self.gyro.copy(), self.max_accel, self.max_gyro)


@dataclass
class NoiseParams:
    """Continuous-time noise densities, per axis.

    sigma_a / sigma_w are white-noise densities of the accelerometer and
    gyroscope; sigma_ba / sigma_bw are random-walk densities of the biases.
    The per-step discrete covariance is G Q Gt dt, so propagated covariance is
    independent of the IMU rate. Zero densities are allowed for noise-free
    simulation.
    """

    sigma_a: np.ndarray
    sigma_w: np.ndarray
    sigma_ba: np.ndarray
    sigma_bw: np.ndarray

    def __post_init__(self):
        for name in ("sigma_a", "sigma_w", "sigma_ba", "sigma_bw"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.ndim == 0:
                v = np.full(3, float(v))
            if v.shape != (3,) or not np.all(np.isfinite(v)) or np.any(v < 0.0):
                raise ValueError(f"{name} must be non-negative and finite, per axis")
            setattr(self, name, v)

    def q_diag(self) -> np.ndarray:
        """Diagonal of the 12x12 density matrix (variances)."""
        return np.concatenate(
            [self.sigma_a**2, self.sigma_w**2, self.sigma_ba**2, self.sigma_bw**2]
        )


class PreintegratedDelta:
    """Pre-integrated IMU terms between two frame timestamps.

    Mutated by a single owner while samples stream in; treat as immutable once
    the segment is closed.
    """

    def __init__(self, lin_bias: BiasState, noise: NoiseParams, with_covariance: bool = True):
        self.lin_bias = lin_bias.copy()
        self.noise = noise
        self.with_covariance = with_covariance
        self.alpha = np.zeros(3)
        self.beta = np.zeros(3)
        self.gamma = quat_identity()
        self.dt_total = 0.0
        self.P = np.zeros((15, 15))
        self.J = np.eye(15)
        self.samples: list[ImuSample] = []
        # hot-path caches: attitude matrix of gamma, noise diagonal, scratch
        self._R = np.eye(3)
        self._qd = noise.q_diag()
        self._F = np.zeros((15, 15))
        self._G = np.zeros((15, 12))
        self._G[6:9, 3:6] = -_EYE3
        self._G[9:12, 6:9] = _EYE3
        self._G[12:15, 9:12] = _EYE3
        self._A = np.empty((15, 15))
        self._S1 = np.empty((15, 15))

    def integrate_sample(self, s0: ImuSample, s1: ImuSample) -> "PreintegratedDelta":
        """Advance the delta by one sample interval [s0.t, s1.t]."""
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise PreintegrationError(f"non-monotonic timestamps: {s0.t} -> {s1.t}")
        if dt > MAX_SAMPLE_GAP:
            raise PreintegrationError(f"sample gap {dt:.4f}s exceeds {MAX_SAMPLE_GAP}s")
        if self.samples:
            if abs(self.samples[-1].t - s0.t) > 1e-9:
                raise PreintegrationError("sample s0 does not continue the buffer")
        else:
            self.samples.append(s0)

        ba, bw = self.lin_bias.accel, self.lin_bias.gyro
        w_mid = 0.5 * (s0.gyro + s1.gyro) - bw
        a0 = s0.accel - ba
        a1 = s1.accel - ba

        dq = quat_exp(w_mid * dt)
        dR = quat_to_rot(dq)
        Jr = so3_right_jacobian(w_mid * dt) if self.with_covariance else None
        sk0 = skew(a0) if self.with_covariance else None
        sk1 = skew(a1) if self.with_covariance else None
        self._step(dt, a0, a1, dq, dR, Jr, sk0, sk1)
        self.samples.append(s1)
        return self

    def _step(self, dt, a0, a1, dq, dR, Jr, sk0, sk1):
        """One midpoint step from precomputed per-step geometry."""
        gw, gx, gy, gz = self.gamma
        dw, dx, dy, dz = dq
        gamma_next = np.array(
            [
                gw * dw - gx * dx - gy * dy - gz * dz,
                gw * dx + gx * dw + gy * dz - gz * dy,
                gw * dy - gx * dz + gy * dw + gz * dx,
                gw * dz + gx * dy - gy * dx + gz * dw,
            ]
        )
        gamma_next /= np.sqrt(gamma_next @ gamma_next)

        # R1 continues the cached attitude chain; dR.T is the exact transport
        # of d_theta across the step
        R0 = self._R
        R1 = R0 @ dR
        a_mid = 0.5 * (R0 @ a0 + R1 @ a1)

        if self.with_covariance:
            # discrete transition of the midpoint step; its dt->0 limit is the
            # continuous-time error dynamics (alpha row coupled only through
            # beta). Exact attitude transport and SO(3) right Jacobian keep
            # the bias Jacobian consistent with finite differences of
            # re-propagation at the 1e-4 level.
            T = dR.T
            R1a1 = R1 @ sk1
            m_theta = -0.5 * (R0 @ sk0 + R1a1 @ T)
            bw_to_amid = (0.5 * dt) * (R1a1 @ Jr)
            R_sum = R0 + R1
            F = self._F
            F[0:3, 3:6] = _EYE3
            F[0:3, 6:9] = (0.5 * dt) * m_theta
            F[0:3, 9:12] = (-0.25 * dt) * R_sum
            F[0:3, 12:15] = (0.5 * dt) * bw_to_amid
            F[3:6, 6:9] = m_theta
            F[3:6, 9:12] = -0.5 * R_sum
            F[3:6, 12:15] = bw_to_amid
            F[6:9, 6:9] = (T - _EYE3) / dt
            F[6:9, 12:15] = -Jr
            self._G[3:6, 0:3] = -R0
            self.propagate_covariance(F, self._G, dt)

        self.alpha = self.alpha + self.beta * dt + 0.5 * a_mid * dt * dt
        self.beta = self.beta + a_mid * dt
        self.gamma = gamma_next
        self._R = R1
        self.dt_total += dt

    def propagate_covariance(self, F: np.ndarray, G: np.ndarray, dt: float) -> "PreintegratedDelta":
        """P <- (I+F dt) P (I+F dt)^T + (G dt) Qd (G dt)^T and J <- (I+F dt) J.

        Qd is the discrete noise covariance Q/dt, so the injected term reduces
        to G Q G^T dt with Q the density matrix.
        """
        if dt <= 0.0:
            raise PreintegrationError("dt must be positive")
        A = np.multiply(F, dt, out=self._A)
        A.flat[::16] += 1.0
        AP = np.matmul(A, self.P, out=self._S1)
        P = AP @ A.T
        P += (G * (self._qd * dt)) @ G.T
        self.P = 0.5 * (P + P.T)  # keep symmetric PSD
        self.J = A @ self.J
        return self

    # Jacobian sub-blocks of Eq-style bias correction
    @property
    def j_alpha_ba(self) -> np.ndarray:
        return self.J[0:3, 9:12]

    @property
    def j_alpha_bw(self) -> np.ndarray:
        return self.J[0:3, 12:15]

    @property
    def j_beta_ba(self) -> np.ndarray:
        return self.J[3:6, 9:12]

    @property
    def j_beta_bw(self) -> np.ndarray:
        return self.J[3:6, 12:15]

    @property
    def j_gamma_bw(self) -> np.ndarray:
        return self.J[6:9, 12:15]

    def bias_delta(self, new_bias: BiasState) -> tuple[np.ndarray, np.ndarray]:
        return new_bias.accel - self.lin_bias.accel, new_bias.gyro - self.lin_bias.gyro

    def needs_repropagation(self, new_bias: BiasState) -> bool:
        dba, dbw = self.bias_delta(new_bias)
        return (
            np.linalg.norm(dba) > REPROP_ACCEL_THRESHOLD
            or np.linalg.norm(dbw) > REPROP_GYRO_THRESHOLD
        )

    def correct_for_bias(self, new_bias: BiasState):
        """First-order corrected (alpha, beta, gamma) at a nearby bias."""
        dba, dbw = self.bias_delta(new_bias)
        if not np.any(dba) and not np.any(dbw):
            return self.alpha, self.beta, self.gamma
        alpha = self.alpha + self.j_alpha_ba @ dba + self.j_alpha_bw @ dbw
        beta = self.beta + self.j_beta_ba @ dba + self.j_beta_bw @ dbw
        gamma = quat_mul(self.gamma, small_angle_quat(self.j_gamma_bw @ dbw))
        return alpha, beta, gamma

    def repropagate(self, new_bias: BiasState) -> "PreintegratedDelta":
        """Full re-integration of the retained sample buffer at a new bias."""
        if len(self.samples) < 2:
            raise PreintegrationError("no retained samples to re-propagate")
        return integrate_segment(self.samples, new_bias, self.noise, self.with_covariance)


def merge_deltas(first: PreintegratedDelta, second: PreintegratedDelta) -> PreintegratedDelta:
    """Pre-integrate the concatenated sample buffers at the first delta's bias."""
    if not first.samples:
        return second.repropagate(first.lin_bias)
    if not second.samples:
        return first.repropagate(first.lin_bias)
    if abs(first.samples[-1].t - second.samples[0].t) > 1e-9:
        raise PreintegrationError("deltas are not adjacent")
    samples = first.samples + second.samples[1:]
    return integrate_segment(samples, first.lin_bias, first.noise, first.with_covariance)


def so3_right_jacobian_batch(rotvecs: np.ndarray) -> np.ndarray:
    """Vectorized right Jacobian over (N, 3) rotation vectors."""
    th = np.linalg.norm(rotvecs, axis=-1)
    K = skew(rotvecs)
    KK = K @ K
    small = th < 1e-6
    ths = np.where(small, 1.0, th)
    c1 = np.where(small, 0.5, (1.0 - np.cos(ths)) / ths**2)
    c2 = np.where(small, 1.0 / 6.0, (ths - np.sin(ths)) / ths**3)
    return _EYE3 - c1[:, None, None] * K + c2[:, None, None] * KK


def integrate_segment(
    samples: list[ImuSample],
    bias: BiasState,
    noise: NoiseParams,
    with_covariance: bool = True,
) -> PreintegratedDelta:
    """Pre-integrate a whole sample list, batching the per-step geometry.

    Identical math to streaming integrate_sample calls; the per-step
    increment quaternions, rotations, right Jacobians, and skews are just
    precomputed vectorized.
    """
    delta = PreintegratedDelta(bias, noise, with_covariance)
    if len(samples) < 2:
        return delta
    ts = np.array([s.t for s in samples])
    dts = np.diff(ts)
    if np.any(dts <= 0.0):
        raise PreintegrationError("non-monotonic timestamps in segment")
    if np.any(dts > MAX_SAMPLE_GAP):
        raise PreintegrationError(f"sample gap exceeds {MAX_SAMPLE_GAP}s")
    acc = np.array([s.accel for s in samples])
    gyr = np.array([s.gyro for s in samples])
    w_mid = 0.5 * (gyr[:-1] + gyr[1:]) - bias.gyro
    a0s = acc[:-1] - bias.accel
    a1s = acc[1:] - bias.accel
    rotvecs = w_mid * dts[:, None]
    dqs = quat_exp(rotvecs)
    dRs = quat_to_rot(dqs)
    if with_covariance:
        Jrs = so3_right_jacobian_batch(rotvecs)
        sk0s = skew(a0s)
        sk1s = skew(a1s)
    delta.samples = list(samples)
    for i in range(len(dts)):
        if with_covariance:
            delta._step(dts[i], a0s[i], a1s[i], dqs[i], dRs[i], Jrs[i], sk0s[i], sk1s[i])
        else:
            delta._step(dts[i], a0s[i], a1s[i], dqs[i], dRs[i], None, None, None)
    return delta


def interpolate_sample(s0: ImuSample, s1: ImuSample, t: float) -> ImuSample:
    """Linear interpolation of both channels at a frame-boundary time."""
    if not (s0.t <= t <= s1.t):
        raise PreintegrationError("interpolation time outside sample interval")
    w = 0.0 if s1.t == s0.t else (t - s0.t) / (s1.t - s0.t)
    return ImuSample(t, (1 - w) * s0.accel + w * s1.accel, (1 - w) * s0.gyro + w * s1.gyro)


def segment_samples(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1], with boundary samples interpolated at t0 and t1.

    Boundaries within 1e-9 s of a raw sample snap to it (matching the
    adjacency tolerance used when deltas are merged), so segments produced
    from the same boundary time share the identical junction sample.
    """
    if t1 <= t0:
        raise PreintegrationError("empty segment")
    times = np.array([s.t for s in samples])
    i0 = int(np.searchsorted(times, t0 + 1e-9, side="right")) - 1
    i1 = int(np.searchsorted(times, t1 - 1e-9, side="left"))
    if i0 < 0 or i1 >= len(samples):
        raise PreintegrationError("segment extends beyond the sample stream")
    seg: list[ImuSample] = []
    if abs(samples[i0].t - t0) < 1e-9:
        seg.append(samples[i0])
    else:
        seg.append(interpolate_sample(samples[i0], samples[i0 + 1], t0))
    for i in range(i0 + 1, i1):
        seg.append(samples[i])
    if abs(samples[i1].t - t1) < 1e-9:
        seg.append(samples[i1])
    else:
        seg.append(interpolate_sample(samples[i1 - 1], samples[i1], t1))
    return seg


def imu_residual(delta: PreintegratedDelta, state_k, state_k1, gravity) -> np.ndarray:
    """15-vector (d_alpha, d_beta, d_theta, d_ba, d_bw) of the pre-integrated
    IMU measurement against two window states.

    The stored terms are first corrected to state_k's bias. state_k/state_k1
    need fields p, v, q (world frame) and bias.
    """
    r, _, _ = imu_residual_jacobians(delta, state_k, state_k1, gravity, with_jacobians=False)
    return r


def quat_left_mat(q) -> np.ndarray:
    """4x4 matrix L(q) with L(q) @ p == q (x) p."""
    w, x, y, z = q
    return np.array(
        [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
    )


def quat_right_mat(q) -> np.ndarray:
    """4x4 matrix R(q) with R(q) @ p == p (x) q."""
    w, x, y, z = q
    return np.array(
        [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
    )


def imu_residual_jacobians(
    delta: PreintegratedDelta, state_k, state_k1, gravity, with_jacobians: bool = True
):
    """Residual plus 15x15 Jacobians w.r.t. both frame states.

    Per-frame tangent ordering is (dp, dtheta, dv, dba, dbw) with the attitude
    perturbed on the left in the world frame: q <- dq (x) q.
    """
    g = np.asarray(gravity, dtype=float)
    dt = delta.dt_total
    Rk_t = quat_to_rot(state_k.q).T

    alpha_c, beta_c, gamma_c = delta.correct_for_bias(state_k.bias)

    u = state_k1.p - state_k.p + 0.5 * g * dt * dt - state_k.v * dt
    w = state_k1.v + g * dt - state_k.v

    q_rel = quat_mul(quat_inverse(state_k.q), state_k1.q)
    e = quat_mul(q_rel, quat_inverse(gamma_c))

    r = np.zeros(15)
    r[0:3] = Rk_t @ u - alpha_c
    r[3:6] = Rk_t @ w - beta_c
    r[6:9] = 2.0 * e[1:]
    r[9:12] = state_k1.bias.accel - state_k.bias.accel
    r[12:15] = state_k1.bias.gyro - state_k.bias.gyro

    if not with_jacobians:
        return r, None, None

    I3 = np.eye(3)
    L = e[0] * I3 - skew(e[1:])  # d(2 vec([1, x/2] (x) e)) / dx

    # theta-row bias Jacobian, exact through the normalized correction
    # quaternion s = normalize([1, 0.5 J dbw]): e = q_rel (x) conj(s) (x) gamma_hat^-1
    _, dbw = delta.bias_delta(state_k.bias)
    s_un = np.concatenate([[1.0], 0.5 * delta.j_gamma_bw @ dbw])
    n = np.linalg.norm(s_un)
    s_hat = s_un / n
    ds_un = np.zeros((4, 3))
    ds_un[1:, :] = 0.5 * delta.j_gamma_bw
    ds = (np.eye(4) - np.outer(s_hat, s_hat)) @ ds_un / n
    conj4 = np.diag([1.0, -1.0, -1.0, -1.0])
    de_dbw = quat_left_mat(q_rel) @ quat_right_mat(quat_inverse(delta.gamma)) @ conj4 @ ds

    Jk = np.zeros((15, 15))
    Jk1 = np.zeros((15, 15))
    # alpha rows
    Jk[0:3, 0:3] = -Rk_t
    Jk[0:3, 3:6] = Rk_t @ skew(u)
    Jk[0:3, 6:9] = -Rk_t * dt
    Jk[0:3, 9:12] = -delta.j_alpha_ba
    Jk[0:3, 12:15] = -delta.j_alpha_bw
    Jk1[0:3, 0:3] = Rk_t
    # beta rows
    Jk[3:6, 3:6] = Rk_t @ skew(w)
    Jk[3:6, 6:9] = -Rk_t
    Jk[3:6, 9:12] = -delta.j_beta_ba
    Jk[3:6, 12:15] = -delta.j_beta_bw
    Jk1[3:6, 6:9] = Rk_t
    # theta rows
    Jk[6:9, 3:6] = -L @ Rk_t
    Jk[6:9, 12:15] = 2.0 * de_dbw[1:, :]
    Jk1[6:9, 3:6] = L @ Rk_t
    # bias rows
    Jk[9:12, 9:12] = -I3
    Jk[12:15, 12:15] = -I3
    Jk1[9:12, 9:12] = I3
    Jk1[12:15, 12:15] = I3
    return r, Jk, Jk1


def weight_residual(residual: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Whiten a residual by the square root of its covariance: L^-1 r, L L^T = P."""
    L = covariance_sqrt(P)
    return np.linalg.solve(L, residual)


def covariance_sqrt(P: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of P after +1e-12 I regularization."""
    P = 0.5 * (P + P.T) + 1e-12 * np.eye(P.shape[0])
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise PreintegrationError("covariance not positive definite") from exc
