"""Global 4-DOF pose graph with geometric loop verification.

Vertices carry free position and yaw plus fixed roll/pitch taken from the
odometry (those angles are observable and drift-free there). Sequential edges
chain consecutive keyframes; loop edges come from relocalization. Candidate
loops are verified by a two-stage RANSAC (epipolar test on ray pairs, then
absolute-pose test against window structure).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimator import LoopObservationSet, huber_weight, robust_cost
from .geometry import (
    quat_canonical,
    quat_inverse,
    quat_mul,
    quat_rotate,
    quat_to_rot,
    rot_zyx,
    skew,
    tangent_basis,
    wrap_angle,
    yaw_roll_pitch_decompose,
)

DEFAULT_RANSAC_ITERATIONS = 200
DEFAULT_EPIPOLAR_THRESHOLD = 1e-3
DEFAULT_PNP_THRESHOLD = 3.0 / 460.0
DEFAULT_MIN_INLIERS = 25
DEFAULT_EDGE_FANOUT = 4


class PoseGraphError(RuntimeError):
    pass


class DegenerateGeometryError(ValueError):
    """Two-view geometry is rank deficient (for example pure rotation)."""


class NoConsensusError(RuntimeError):
    pass


def _ransac_iterations_needed(inlier_ratio: float, sample_size: int,
                              confidence: float = 0.999) -> int:
    """Adaptive RANSAC stopping: draws needed to hit one all-inlier sample."""
    inlier_ratio = min(max(inlier_ratio, 1e-3), 1.0 - 1e-12)
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0 - 1e-12:
        return 1
    return int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - p_good))) + 1


@dataclass
class PoseGraphVertex:
    vid: int
    t: float
    p: np.ndarray  # free
    yaw: float  # free
    roll: float  # fixed from odometry
    pitch: float  # fixed from odometry
    segment: int = 0
    has_loop: bool = False
    # odometry values frozen at insertion; edges are built from these
    vio_p: np.ndarray = None
    vio_yaw: float = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.yaw = wrap_angle(self.yaw)
        if self.vio_p is None:
            self.vio_p = self.p.copy()
        if self.vio_yaw is None:
            self.vio_yaw = self.yaw

    def rotation(self) -> np.ndarray:
        return rot_zyx(self.roll, self.pitch, self.yaw)

    def vio_rotation(self) -> np.ndarray:
        return rot_zyx(self.roll, self.pitch, self.vio_yaw)

    def quaternion(self) -> np.ndarray:
        from .geometry import rot_to_quat

        return rot_to_quat(self.rotation())


@dataclass
class SequentialEdge:
    from_id: int
    to_id: int
    rel_p: np.ndarray  # in the from-vertex frame
    rel_yaw: float

    def __post_init__(self):
        self.rel_p = np.asarray(self.rel_p, dtype=float)
        self.rel_yaw = wrap_angle(self.rel_yaw)


@dataclass
class LoopEdge(SequentialEdge):
    inliers: int = 0


@dataclass
class CorrespondenceSet:
    """Feature matches between a query keyframe and a loop candidate frame."""

    feature_ids: np.ndarray
    rays_query: np.ndarray  # (K, 3) unit rays in the query camera
    rays_candidate: np.ndarray  # (K, 3) unit rays in the candidate camera

    def __post_init__(self):
        self.feature_ids = np.asarray(self.feature_ids, dtype=int)
        self.rays_query = np.asarray(self.rays_query, dtype=float)
        self.rays_candidate = np.asarray(self.rays_candidate, dtype=float)

    def __len__(self) -> int:
        return len(self.feature_ids)


# ---------------------------------------------------------------------------
# two-stage geometric verification


def _epipolar_distances(F: np.ndarray, rays_a: np.ndarray, rays_b: np.ndarray) -> np.ndarray:
    """Symmetric epipolar distance for unit-ray correspondences a' F b = 0."""
    lb = rays_b @ F.T  # epipolar plane normals seen from a
    la = rays_a @ F
    e = np.abs(np.sum(rays_a * lb, axis=1))
    da = e / np.maximum(np.linalg.norm(lb, axis=1), 1e-15)
    db = e / np.maximum(np.linalg.norm(la, axis=1), 1e-15)
    return np.maximum(da, db)


def _eight_point(rays_a: np.ndarray, rays_b: np.ndarray) -> np.ndarray:
    A = np.einsum("ki,kj->kij", rays_a, rays_b).reshape(len(rays_a), 9)
    _, s, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    # enforce rank 2
    U, S, Vt2 = np.linalg.svd(F)
    S[2] = 0.0
    return U @ np.diag(S) @ Vt2


def _rank_check(rays_a: np.ndarray, rays_b: np.ndarray) -> None:
    A = np.einsum("ki,kj->kij", rays_a, rays_b).reshape(len(rays_a), 9)
    s = np.linalg.svd(A, compute_uv=False)
    # nullity > 1 means a family of epipolar models fits: pure rotation
    if s[-2] < 1e-9 * s[0]:
        raise DegenerateGeometryError("epipolar geometry is degenerate (pure rotation?)")


def ransac_fundamental(
    rays_query: np.ndarray,
    rays_candidate: np.ndarray,
    threshold: float = DEFAULT_EPIPOLAR_THRESHOLD,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    seed: int = 0,
):
    """Epipolar model over unit-ray pairs inside RANSAC; returns (F, mask).

    The model is the two-view epipolar constraint u_q^T F u_c = 0 fit by the
    normalized eight-point algorithm (rays are already unit-norm), with the
    symmetric point-to-epipolar-plane distance as the inlier metric.
    """
    rays_query = np.asarray(rays_query, dtype=float)
    rays_candidate = np.asarray(rays_candidate, dtype=float)
    n = len(rays_query)
    if n < 8:
        raise PoseGraphError("need at least 8 correspondences for the epipolar test")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = iterations
    for it in range(iterations):
        if it >= needed:
            break
        pick = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(rays_query[pick], rays_candidate[pick])
        except np.linalg.LinAlgError:
            continue
        d = _epipolar_distances(F, rays_query, rays_candidate)
        mask = d < threshold
        if mask.sum() > best_count:
            best_count = int(mask.sum())
            best_mask = mask
            needed = min(iterations, _ransac_iterations_needed(best_count / n, 8))
    if best_mask is None or best_count < 8:
        raise NoConsensusError("no epipolar model with at least 8 inliers")
    _rank_check(rays_query[best_mask], rays_candidate[best_mask])
    F = _eight_point(rays_query[best_mask], rays_candidate[best_mask])
    mask = _epipolar_distances(F, rays_query, rays_candidate) < threshold
    if mask.sum() < 8:
        raise NoConsensusError("refined epipolar model lost consensus")
    return F, mask


def _pnp_dlt(points: np.ndarray, rays: np.ndarray):
    """Projection-matrix DLT from ray observations; returns (R, t), world->camera."""
    n = len(points)
    A = np.zeros((2 * n, 12))
    Xh = np.concatenate([points, np.ones((n, 1))], axis=1)
    b1, b2 = tangent_basis(rays)
    A[0::2] = (b1[:, :, None] * Xh[:, None, :]).reshape(n, 12)
    A[1::2] = (b2[:, :, None] * Xh[:, None, :]).reshape(n, 12)
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt2))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt2
    scale = S.mean() * d
    if abs(scale) < 1e-12:
        raise np.linalg.LinAlgError("degenerate projection matrix")
    t = P[:, 3] / scale
    # resolve the global sign by cheirality: points should sit along the rays
    proj = points @ R.T + t
    if np.sum(np.einsum("ki,ki->k", proj, rays) > 0) < n / 2:
        R = U @ np.diag([1.0, 1.0, -d]) @ Vt2
        t = -t
    return R, t


def _angular_errors(R, t, points, rays):
    pred = points @ R.T + t
    norms = np.linalg.norm(pred, axis=1)
    norms = np.maximum(norms, 1e-12)
    cosang = np.einsum("ki,ki->k", pred / norms[:, None], rays)
    return np.arccos(np.clip(cosang, -1.0, 1.0))


def _refine_pnp(R, t, points, rays, iterations=10):
    """Gauss-Newton on tangent-plane reprojection over (theta, t)."""
    from .geometry import quat_exp, rot_to_quat

    q = rot_to_quat(R)
    for _ in range(iterations):
        Rk = quat_to_rot(q)
        pred = points @ Rk.T + t
        norms = np.linalg.norm(pred, axis=1)
        nvec = pred / norms[:, None]
        b1, b2 = tangent_basis(rays)
        B = np.stack([b1, b2], axis=2)
        r = np.einsum("kir,ki->kr", B, rays - nvec).reshape(-1)
        I3 = np.eye(3)
        proj = I3[None] - nvec[:, :, None] * nvec[:, None, :]
        M = -np.einsum("kir,kij->krj", B, proj) / norms[:, None, None]
        J_th = -np.einsum("krj,kja->kra", M, skew(points @ Rk.T))
        J_t = M
        J = np.concatenate([J_th, J_t], axis=2).reshape(-1, 6)
        H = J.T @ J + 1e-12 * np.eye(6)
        dx = np.linalg.solve(H, -J.T @ r)
        q = quat_canonical(quat_mul(quat_exp(dx[:3]), q))
        t = t + dx[3:]
        if np.linalg.norm(dx) < 1e-14:
            break
    return quat_to_rot(q), t


def ransac_pnp(
    points: np.ndarray,
    rays: np.ndarray,
    threshold: float = DEFAULT_PNP_THRESHOLD,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    seed: int = 0,
):
    """Absolute pose from 3D-2D (unit-ray) pairs inside RANSAC.

    Returns (R, t, mask) with the world->camera transform refined on the
    inliers by Gauss-Newton reprojection minimization.
    """
    points = np.asarray(points, dtype=float)
    rays = np.asarray(rays, dtype=float)
    n = len(points)
    if n < 6:
        raise PoseGraphError("need at least 6 correspondences for the absolute-pose test")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    needed = iterations
    for it in range(iterations):
        if it >= needed:
            break
        pick = rng.choice(n, size=6, replace=False)
        try:
            R, t = _pnp_dlt(points[pick], rays[pick])
        except np.linalg.LinAlgError:
            continue
        errs = _angular_errors(R, t, points, rays)
        mask = errs < threshold
        if mask.sum() > best_count:
            best_count = int(mask.sum())
            best = (R, t, mask)
            needed = min(iterations, _ransac_iterations_needed(best_count / n, 6))
    if best is None or best_count < 6:
        raise NoConsensusError("no absolute-pose consensus")
    R, t, mask = best
    R, t = _refine_pnp(R, t, points[mask], rays[mask])
    mask = _angular_errors(R, t, points, rays) < threshold
    if mask.sum() < 6:
        raise NoConsensusError("refined absolute pose lost consensus")
    return R, t, mask


def verify_loop_candidate(
    correspondences: CorrespondenceSet,
    points_by_id: dict[int, np.ndarray],
    epipolar_threshold: float = DEFAULT_EPIPOLAR_THRESHOLD,
    pnp_threshold: float = DEFAULT_PNP_THRESHOLD,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    min_inliers: int = DEFAULT_MIN_INLIERS,
    seed: int = 0,
):
    """Two-step outlier rejection; returns (inlier mask, (R, t)) or None.

    Stage 1 tests the ray pairs against an epipolar model; stage 2 tests the
    surviving matches against the window's 3D structure with an absolute-pose
    model. Candidates without enough inliers are rejected (None).
    """
    try:
        _, mask_f = ransac_fundamental(
            correspondences.rays_query, correspondences.rays_candidate,
            epipolar_threshold, iterations, seed,
        )
    except (PoseGraphError, NoConsensusError, DegenerateGeometryError):
        return None
    have_point = np.array([fid in points_by_id for fid in correspondences.feature_ids])
    stage2 = mask_f & have_point
    if stage2.sum() < 6:
        return None
    points = np.array([points_by_id[fid] for fid in correspondences.feature_ids[stage2]])
    rays = correspondences.rays_candidate[stage2]
    try:
        R, t, mask_p = ransac_pnp(points, rays, pnp_threshold, iterations, seed)
    except (PoseGraphError, NoConsensusError):
        return None
    mask = np.zeros(len(correspondences), dtype=bool)
    idx = np.where(stage2)[0]
    mask[idx[mask_p]] = True
    if mask.sum() < min_inliers:
        return None
    return mask, (R, t)


# ---------------------------------------------------------------------------
# edges and residuals


def sequential_edge_from_vio(pose_i: PoseGraphVertex, pose_j: PoseGraphVertex) -> SequentialEdge:
    """4-DOF relative measurement from the odometry values of two vertices."""
    R_i = pose_i.vio_rotation()
    rel_p = R_i.T @ (pose_j.vio_p - pose_i.vio_p)
    rel_yaw = wrap_angle(pose_j.vio_yaw - pose_i.vio_yaw)
    return SequentialEdge(pose_i.vid, pose_j.vid, rel_p, rel_yaw)


def edge_residual(vi: PoseGraphVertex, vj: PoseGraphVertex, edge: SequentialEdge) -> np.ndarray:
    """[R(roll_i, pitch_i, yaw_i)^-1 (p_j - p_i) - rel_p ; wrap(yaw_j - yaw_i - rel_yaw)]."""
    R_i = vi.rotation()
    r = np.empty(4)
    r[:3] = R_i.T @ (vj.p - vi.p) - edge.rel_p
    r[3] = wrap_angle(vj.yaw - vi.yaw - edge.rel_yaw)
    return r


def relocalization_constraint(
    loop_vid: int,
    loop_q: np.ndarray,
    loop_p: np.ndarray,
    query_vid: int,
    query_q: np.ndarray,
    query_p: np.ndarray,
    observations: LoopObservationSet,
    inliers: int,
) -> tuple[LoopEdge, LoopObservationSet]:
    """Package the relocalization result: the 4-DOF loop edge for the graph
    plus the constant-pose observation set the estimator consumed.

    Both poses must be expressed in the same frame (the loop frame's pose as
    recovered in the window frame by the absolute-pose stage); the relative
    transform is then invariant to the window's own drift.
    """
    _, _, yaw_q = yaw_roll_pitch_decompose(query_q)
    roll_v, pitch_v, yaw_v = yaw_roll_pitch_decompose(loop_q)
    R_v = rot_zyx(roll_v, pitch_v, yaw_v)
    rel_p = R_v.T @ (np.asarray(query_p, dtype=float) - np.asarray(loop_p, dtype=float))
    rel_yaw = wrap_angle(yaw_q - yaw_v)
    edge = LoopEdge(loop_vid, query_vid, rel_p, rel_yaw, inliers=inliers)
    return edge, observations


# ---------------------------------------------------------------------------
# the graph


@dataclass
class PoseGraphConfig:
    edge_fanout: int = DEFAULT_EDGE_FANOUT
    min_inliers: int = DEFAULT_MIN_INLIERS
    huber_threshold: float = 1.0  # squared-norm scale for loop edges
    # loop information = identity * (inliers / min_inliers) * loop_weight_scale;
    # the scale makes loop constraints dominate the sequential-chain stiffness
    # so verified loops close to well under their own measurement noise
    loop_weight_scale: float = 100.0
    max_iterations: int = 25
    initial_lambda: float = 1e-6
    rel_cost_tol: float = 1e-12


class PoseGraph:
    """Keyframe vertices with sequential and loop edges; 4-DOF optimization."""

    def __init__(self, config: PoseGraphConfig | None = None):
        self.config = config or PoseGraphConfig()
        self.vertices: dict[int, PoseGraphVertex] = {}
        self.order: list[int] = []
        self.sequential_edges: list[SequentialEdge] = []
        self.loop_edges: list[LoopEdge] = []

    def __len__(self) -> int:
        return len(self.order)

    def add_keyframe(self, vertex: PoseGraphVertex) -> None:
        """Insert a vertex and connect it to its previous same-segment
        keyframes with sequential edges."""
        if vertex.vid in self.vertices:
            raise PoseGraphError(f"duplicate vertex id {vertex.vid}")
        prev = [v for v in self.order if self.vertices[v].segment == vertex.segment]
        self.vertices[vertex.vid] = vertex
        self.order.append(vertex.vid)
        for pid in prev[-self.config.edge_fanout :]:
            self.sequential_edges.append(
                sequential_edge_from_vio(self.vertices[pid], vertex)
            )

    def add_loop_edge(self, edge: LoopEdge) -> None:
        if edge.from_id not in self.vertices or edge.to_id not in self.vertices:
            raise PoseGraphError("loop edge references unknown vertices")
        self.loop_edges.append(edge)
        self.vertices[edge.from_id].has_loop = True
        self.vertices[edge.to_id].has_loop = True

    def segments(self) -> list[int]:
        return sorted({v.segment for v in self.vertices.values()})

    # -- optimization -------------------------------------------------------

    def _packed(self, fixed: set[int]):
        """Array views of the graph for batched optimization."""
        order = self.order
        idx = {vid: i for i, vid in enumerate(order)}
        p = np.array([self.vertices[v].p for v in order])
        yaw = np.array([self.vertices[v].yaw for v in order])
        roll = np.array([self.vertices[v].roll for v in order])
        pitch = np.array([self.vertices[v].pitch for v in order])
        free_col = np.full(len(order), -1, dtype=int)
        col = 0
        for i, vid in enumerate(order):
            if vid not in fixed:
                free_col[i] = col
                col += 1
        edges = self.sequential_edges + self.loop_edges
        fi = np.array([idx[e.from_id] for e in edges], dtype=int)
        ti = np.array([idx[e.to_id] for e in edges], dtype=int)
        rel_p = np.array([e.rel_p for e in edges]).reshape(-1, 3)
        rel_yaw = np.array([e.rel_yaw for e in edges])
        is_loop = np.array([isinstance(e, LoopEdge) for e in edges], dtype=bool)
        base_w = np.array(
            [
                max(e.inliers / self.config.min_inliers, 1.0) * self.config.loop_weight_scale
                if isinstance(e, LoopEdge)
                else 1.0
                for e in edges
            ]
        )
        return idx, p, yaw, roll, pitch, free_col, col, fi, ti, rel_p, rel_yaw, is_loop, base_w

    @staticmethod
    def _rotations(roll, pitch, yaw):
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cy, sy = np.cos(yaw), np.sin(yaw)
        R = np.empty(roll.shape + (3, 3))
        R[..., 0, 0] = cy * cp
        R[..., 0, 1] = cy * sp * sr - sy * cr
        R[..., 0, 2] = cy * sp * cr + sy * sr
        R[..., 1, 0] = sy * cp
        R[..., 1, 1] = sy * sp * sr + cy * cr
        R[..., 1, 2] = sy * sp * cr - cy * sr
        R[..., 2, 0] = -sp
        R[..., 2, 1] = cp * sr
        R[..., 2, 2] = cp * cr
        return R

    def optimize(self, fixed: set[int] | None = None) -> dict:
        """Damped Gauss-Newton over (p, yaw); roll/pitch stay constant.

        Sequential edges enter with identity information; loop edges with
        identity scaled by inliers / min_inliers and a robust kernel.
        """
        if not self.order:
            return {"iterations": 0, "costs": [], "termination": "empty"}
        if fixed is None:
            fixed = set()
            for seg in self.segments():
                fixed.add(next(v for v in self.order if self.vertices[v].segment == seg))
        if not fixed:
            raise PoseGraphError("at least one vertex must be fixed per segment")
        cfg = self.config
        (idx, p, yaw, roll, pitch, free_col, n_free, fi, ti, rel_p, rel_yaw,
         is_loop, base_w) = self._packed(fixed)
        if not len(fi) or n_free == 0:
            return {"iterations": 0, "costs": [], "termination": "nothing_to_do"}
        th = cfg.huber_threshold

        def residuals(p, yaw):
            R_i = self._rotations(roll[fi], pitch[fi], yaw[fi])
            d = p[ti] - p[fi]
            r_p = np.einsum("eba,eb->ea", R_i, d) - rel_p
            r_y = wrap_angle(yaw[ti] - yaw[fi] - rel_yaw)
            return R_i, d, r_p, r_y

        def total_cost(p, yaw):
            _, _, r_p, r_y = residuals(p, yaw)
            s = np.sum(r_p * r_p, axis=1) + r_y * r_y
            c = float(np.sum(s[~is_loop]))
            sl = base_w[is_loop] * s[is_loop] / th
            c += float(np.sum(robust_cost(sl))) * th
            return c

        # columns: 4 per free vertex plus a trash block for fixed vertices
        dim = 4 * n_free
        col_of = np.where(free_col >= 0, 4 * free_col, dim)
        zhat = np.array([0.0, 0.0, 1.0])

        def assemble(p, yaw):
            import scipy.sparse as sp

            R_i, d, r_p, r_y = residuals(p, yaw)
            s = np.sum(r_p * r_p, axis=1) + r_y * r_y
            w = np.where(is_loop, base_w * huber_weight(base_w * s / th), base_w)
            E = len(fi)
            J = np.zeros((E, 4, 8))
            R_it = np.swapaxes(R_i, 1, 2)
            J[:, :3, 0:3] = -R_it
            J[:, :3, 3] = -np.einsum("eab,eb->ea", R_it, np.cross(np.broadcast_to(zhat, d.shape), d))
            J[:, 3, 3] = -1.0
            J[:, :3, 4:7] = R_it
            J[:, 3, 7] = 1.0
            r = np.concatenate([r_p, r_y[:, None]], axis=1)
            # fixed vertices map to a trash block beyond the dim columns
            cols = np.empty((E, 8), dtype=int)
            cols[:, 0:4] = col_of[fi][:, None] + np.arange(4)
            cols[:, 4:8] = col_of[ti][:, None] + np.arange(4)
            Hb = np.einsum("e,eri,erj->eij", w, J, J)
            bb = np.einsum("e,eri,er->ei", w, J, r)
            rows_idx = np.repeat(cols[:, :, None], 8, axis=2).ravel()
            cols_idx = np.repeat(cols[:, None, :], 8, axis=1).ravel()
            H = sp.coo_matrix(
                (Hb.ravel(), (rows_idx, cols_idx)), shape=(dim + 4, dim + 4)
            ).tocsr()[:dim, :dim]
            b = np.zeros(dim + 4)
            np.add.at(b, cols, bb)
            return H, b[:dim]

        import scipy.sparse as sp
        import scipy.sparse.linalg as spla

        cost = total_cost(p, yaw)
        costs = [cost]
        lam = cfg.initial_lambda
        iterations = 0
        rel = np.inf
        free_rows = free_col >= 0
        for _ in range(cfg.max_iterations):
            H, b = assemble(p, yaw)
            diag = np.asarray(H.diagonal()).ravel()
            diag[diag < 1e-12] = 1e-12
            accepted = False
            for _try in range(12):
                try:
                    dx = spla.spsolve((H + sp.diags(lam * diag)).tocsc(), -b)
                except RuntimeError:
                    lam *= 10
                    continue
                if not np.all(np.isfinite(dx)):
                    lam *= 10
                    continue
                p_new = p.copy()
                yaw_new = yaw.copy()
                p_new[free_rows] += dx.reshape(-1, 4)[:, 0:3]
                yaw_new[free_rows] = wrap_angle(yaw_new[free_rows] + dx.reshape(-1, 4)[:, 3])
                new_cost = total_cost(p_new, yaw_new)
                if np.isfinite(new_cost) and new_cost <= cost:
                    rel = (cost - new_cost) / max(cost, 1e-30)
                    p, yaw = p_new, yaw_new
                    cost = new_cost
                    costs.append(cost)
                    lam = max(lam / 10, 1e-15)
                    accepted = True
                    break
                lam *= 10
            iterations += 1
            if not accepted:
                break
            if rel < cfg.rel_cost_tol or cost < 1e-20:
                break
        for i, vid in enumerate(self.order):
            v = self.vertices[vid]
            v.p = p[i]
            v.yaw = float(wrap_angle(yaw[i]))
        term = "converged" if accepted else "stalled"
        return {"iterations": iterations, "costs": costs, "termination": term}

    # -- residual-based bookkeeping ------------------------------------------

    def loop_edge_residuals(self) -> list[np.ndarray]:
        return [
            edge_residual(self.vertices[e.from_id], self.vertices[e.to_id], e)
            for e in self.loop_edges
        ]

    # -- downsampling ----------------------------------------------------------

    def downsample(self, capacity: int, seed: int = 0) -> int:
        """Remove dense non-loop vertices until at most capacity remain.

        Removal probability is proportional to local spatial density (inverse
        distance to the surviving chain neighbors); vertices with loop
        constraints and segment anchors are always kept. Sequential
        connectivity is re-stitched by composing the removed vertex's edges.
        """
        rng = np.random.default_rng(seed)
        removed = 0
        anchors = {next(v for v in self.order if self.vertices[v].segment == s)
                   for s in self.segments()}
        while len(self.order) > capacity:
            n = len(self.order)
            pos = np.array([self.vertices[v].p for v in self.order])
            seg = np.array([self.vertices[v].segment for v in self.order])
            removable = np.array(
                [not self.vertices[v].has_loop and v not in anchors for v in self.order]
            )
            if not removable.any():
                break
            gaps = np.full(n, np.inf)
            fwd = np.linalg.norm(pos[1:] - pos[:-1], axis=1)
            same = seg[1:] == seg[:-1]
            prev_gap = np.full(n, np.nan)
            next_gap = np.full(n, np.nan)
            prev_gap[1:][same] = fwd[same]
            next_gap[:-1][same] = fwd[same]
            mean_gap = np.nanmean(np.stack([prev_gap, next_gap]), axis=0)
            dens = 1.0 / np.maximum(np.where(np.isnan(mean_gap), 1e9, mean_gap), 1e-6)
            dens[~removable] = 0.0
            total = dens.sum()
            if total <= 0:
                break
            victim = self.order[int(rng.choice(n, p=dens / total))]
            self._remove_vertex(victim)
            removed += 1
        return removed

    def _remove_vertex(self, vid: int) -> None:
        incoming = [e for e in self.sequential_edges if e.to_id == vid]
        outgoing = [e for e in self.sequential_edges if e.from_id == vid]
        self.sequential_edges = [
            e for e in self.sequential_edges if e.from_id != vid and e.to_id != vid
        ]
        victim = self.vertices[vid]
        # re-stitch by composing the measurement chains through the victim
        seen = set()
        for ein in incoming:
            for eout in outgoing:
                key = (ein.from_id, eout.to_id)
                if key in seen or ein.from_id == eout.to_id:
                    continue
                if any(e.from_id == key[0] and e.to_id == key[1] for e in self.sequential_edges):
                    continue
                seen.add(key)
                vi = self.vertices[ein.from_id]
                R_i = vi.vio_rotation()
                R_m = victim.vio_rotation()
                rel_p = ein.rel_p + R_i.T @ (R_m @ eout.rel_p)
                rel_yaw = wrap_angle(ein.rel_yaw + eout.rel_yaw)
                self.sequential_edges.append(
                    SequentialEdge(ein.from_id, eout.to_id, rel_p, rel_yaw)
                )
        del self.vertices[vid]
        self.order.remove(vid)

    # -- serialization -----------------------------------------------------------

    def save(self, path) -> None:
        """Line-oriented text format:
        VERTEX id t px py pz roll pitch yaw segment
        EDGE type from to px py pz yaw inliers
        """
        with open(path, "w") as f:
            for vid in self.order:
                v = self.vertices[vid]
                f.write(
                    "VERTEX %d %.9g %.9g %.9g %.9g %.9g %.9g %.9g %d\n"
                    % (v.vid, v.t, v.p[0], v.p[1], v.p[2], v.roll, v.pitch, v.yaw, v.segment)
                )
            for e in self.sequential_edges:
                f.write(
                    "EDGE SEQ %d %d %.9g %.9g %.9g %.9g 0\n"
                    % (e.from_id, e.to_id, e.rel_p[0], e.rel_p[1], e.rel_p[2], e.rel_yaw)
                )
            for e in self.loop_edges:
                f.write(
                    "EDGE LOOP %d %d %.9g %.9g %.9g %.9g %d\n"
                    % (e.from_id, e.to_id, e.rel_p[0], e.rel_p[1], e.rel_p[2], e.rel_yaw, e.inliers)
                )

    @classmethod
    def load(cls, path, config: PoseGraphConfig | None = None) -> "PoseGraph":
        graph = cls(config)
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "VERTEX":
                    if len(parts) != 10:
                        raise PoseGraphError(f"malformed VERTEX on line {lineno}")
                    vid, t = int(parts[1]), float(parts[2])
                    p = np.array([float(x) for x in parts[3:6]])
                    roll, pitch, yaw = (float(x) for x in parts[6:9])
                    seg = int(parts[9])
                    graph.vertices[vid] = PoseGraphVertex(vid, t, p, yaw, roll, pitch, seg)
                    graph.order.append(vid)
                elif parts[0] == "EDGE":
                    if len(parts) != 9:
                        raise PoseGraphError(f"malformed EDGE on line {lineno}")
                    kind = parts[1]
                    from_id, to_id = int(parts[2]), int(parts[3])
                    rel_p = np.array([float(x) for x in parts[4:7]])
                    rel_yaw = float(parts[7])
                    inliers = int(parts[8])
                    if kind == "LOOP":
                        graph.add_loop_edge(LoopEdge(from_id, to_id, rel_p, rel_yaw, inliers=inliers))
                    elif kind == "SEQ":
                        graph.sequential_edges.append(SequentialEdge(from_id, to_id, rel_p, rel_yaw))
                    else:
                        raise PoseGraphError(f"unknown edge type '{kind}' on line {lineno}")
                else:
                    raise PoseGraphError(f"unknown record '{parts[0]}' on line {lineno}")
        return graph


def vertex_from_state(vid: int, t: float, p, q, segment: int = 0) -> PoseGraphVertex:
    """Build a vertex from an odometry pose, splitting fixed roll/pitch from
    free yaw."""
    roll, pitch, yaw = yaw_roll_pitch_decompose(q)
    return PoseGraphVertex(vid, t, np.asarray(p, dtype=float), yaw, roll, pitch, segment)
