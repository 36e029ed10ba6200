"""Bundle adjustment: robust reprojection cost, analytic Jacobians, and a
Levenberg-Marquardt solver with Schur elimination of landmark blocks.

Parameterization: keyframe poses are world-from-vehicle transforms G updated
by a left tangent increment, G <- (Exp(phi), rho) . G with delta = (rho, phi)
a 6-vector (translation first, axis-angle second); landmark positions update
additively.  Camera extrinsics are never variables: the fixed inter-camera
baselines anchor metric scale.

Residuals are r = observed_pixel - project(landmark), in pixels.  The solver
minimizes sum w * huber(||r||) via iteratively reweighted least squares; the
Jacobian blocks below differentiate sqrt(w) * r, so zero-weight observations
contribute exactly zero rows.  Observations whose landmark leaves the extended
field of view (theta_max + FOV_GUARD_RAD) or hits the camera center get a
constant capped residual with a zero Jacobian: they add a fixed huber-saturated
cost and exert no force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, RankDeficiencyError
from .geometry import (
    CAMERA_IDS,
    CameraRig,
    Pose,
    axis_angle_to_quat,
    compose,
    equidistant_pixels,
    inverse,
)

FOV_GUARD_RAD = 0.35
GRADIENT_TOL = 1e-10
COST_FLOOR = 1e-20
CAP_FACTOR = 8.0  # capped residual magnitude, in units of huber_delta


@dataclass(eq=False)
class BAConfig:
    window_n: int = 5
    max_iterations: int = 30
    initial_damping: float = 1e-4
    huber_delta_px: float = 2.0
    convergence_tol: float = 1e-8
    prune_underconstrained: bool = False

    def __post_init__(self):
        if self.window_n < 2:
            raise ValueError("window_n must be at least 2")
        if self.huber_delta_px <= 0:
            raise ValueError("huber_delta_px must be positive")
        if self.max_iterations < 0 or self.initial_damping <= 0 or self.convergence_tol <= 0:
            raise ValueError("bad BAConfig numeric field")


@dataclass(eq=False)
class BAReport:
    iterations: int
    initial_cost: float
    final_cost: float
    initial_rmse_px: float
    final_rmse_px: float
    converged: bool
    n_variable_poses: int
    n_variable_landmarks: int


def huber(e: float, delta: float) -> float:
    if e <= delta:
        return 0.5 * e * e
    return delta * (e - 0.5 * delta)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def equidistant_jacobian(focal: float, p_cam: np.ndarray) -> np.ndarray:
    """d(pixel)/d(p_cam) for the equidistant model, (n, 2, 3).

    Valid wherever p_cam is off the camera center and away from theta = pi;
    callers mask those cases out.  On the optical axis the pinhole limit
    applies.
    """
    p_cam = np.asarray(p_cam, dtype=np.float64).reshape(-1, 3)
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    rho = np.hypot(x, y)
    r2 = rho * rho + z * z
    theta = np.arctan2(rho, z)
    on_axis = rho < 1e-12
    safe_rho = np.where(on_axis, 1.0, rho)
    a = x / safe_rho
    b = y / safe_rho
    t_over_rho = theta / safe_rho

    j = np.empty((p_cam.shape[0], 2, 3))
    j[:, 0, 0] = focal * (z * a * a / r2 + t_over_rho * b * b)
    j[:, 0, 1] = focal * (z * a * b / r2 - t_over_rho * a * b)
    j[:, 0, 2] = -focal * a * rho / r2
    j[:, 1, 0] = j[:, 0, 1]
    j[:, 1, 1] = focal * (z * b * b / r2 + t_over_rho * a * a)
    j[:, 1, 2] = -focal * b * rho / r2
    if np.any(on_axis):
        safe_z = np.where(np.abs(z) < 1e-12, 1.0, z)
        pin = focal / safe_z
        j[on_axis] = 0.0
        j[on_axis, 0, 0] = pin[on_axis]
        j[on_axis, 1, 1] = pin[on_axis]
    return j


class _ObsTable:
    """Flat arrays over observations, grouped by (keyframe, camera)."""

    def __init__(self, keyframes, landmarks, rig: CameraRig, keep=None):
        n_lm = len(landmarks)
        kf_row: list[int] = []
        cam_row: list[int] = []
        lm_row: list[int] = []
        pix_row: list[np.ndarray] = []
        w_row: list[float] = []
        for ki, kf in enumerate(keyframes):
            for obs in kf.observations:
                if not 0 <= obs.landmark_id < n_lm:
                    raise IntegrityError(
                        f"keyframe {kf.keyframe_id} observation references landmark "
                        f"{obs.landmark_id} outside 0..{n_lm - 1}"
                    )
                if keep is not None and not keep(ki, obs.landmark_id):
                    continue
                kf_row.append(ki)
                cam_row.append(CAMERA_IDS.index(obs.camera_id))
                lm_row.append(obs.landmark_id)
                pix_row.append(np.asarray(obs.pixel, dtype=np.float64))
                w_row.append(obs.weight)
        self.kf = np.array(kf_row, dtype=np.int64)
        self.cam = np.array(cam_row, dtype=np.int64)
        self.lm = np.array(lm_row, dtype=np.int64)
        self.pixels = (
            np.stack(pix_row) if pix_row else np.zeros((0, 2))
        )
        self.weights = np.array(w_row, dtype=np.float64)
        self.n = len(kf_row)
        # group rows by (keyframe, camera) for vectorized projection
        self.groups: list[tuple[int, int, np.ndarray]] = []
        for ki in sorted(set(kf_row)):
            for ci in range(len(CAMERA_IDS)):
                rows = np.flatnonzero((self.kf == ki) & (self.cam == ci))
                if rows.size:
                    self.groups.append((ki, ci, rows))


def _cam_from_world_all(keyframes, rig: CameraRig):
    out = []
    for kf in keyframes:
        world_inv = inverse(kf.pose)
        out.append(
            [compose(rig.camera(cid).cam_from_vehicle, world_inv) for cid in CAMERA_IDS]
        )
    return out


def _evaluate(table: _ObsTable, keyframes, positions, rig, huber_delta):
    """Residuals, validity, cached camera-frame points for the current state."""
    cams = _cam_from_world_all(keyframes, rig)
    res = np.zeros((table.n, 2))
    valid = np.zeros(table.n, dtype=bool)
    p_cam_all = np.zeros((table.n, 3))
    cap = CAP_FACTOR * huber_delta
    for ki, ci, rows in table.groups:
        intr = rig.camera(CAMERA_IDS[ci]).intrinsics
        t = cams[ki][ci]
        p_cam = t.transform(positions[table.lm[rows]])
        pix, theta = equidistant_pixels(intr, p_cam)
        ok = (theta <= intr.theta_max + FOV_GUARD_RAD) & (
            np.linalg.norm(p_cam, axis=1) > 1e-9
        )
        r = table.pixels[rows] - pix
        r[~ok] = cap / math.sqrt(2.0)
        res[rows] = r
        valid[rows] = ok
        p_cam_all[rows] = p_cam
    return res, valid, p_cam_all


def _huber_vec(e: np.ndarray, delta: float) -> np.ndarray:
    quad = np.minimum(e, delta)
    return 0.5 * quad * quad + delta * np.maximum(e - delta, 0.0)


def _cost_and_rmse(table: _ObsTable, res: np.ndarray, huber_delta) -> tuple[float, float]:
    norms = np.linalg.norm(res, axis=1)
    w = table.weights
    pos = w > 0.0
    if not np.any(pos):
        return 0.0, 0.0
    e = norms[pos]
    cost = float(np.sum(w[pos] * _huber_vec(e, huber_delta)))
    wsum = float(np.sum(w[pos]))
    return cost, math.sqrt(float(np.sum(w[pos] * e * e)) / wsum)


def reprojection_residuals(keyframes, landmarks, rig: CameraRig, huber_delta_px: float = 2.0):
    """Raw residual vector (one 2-row per observation, keyframe order) and the
    weighted huber cost.  Out-of-model observations carry the capped residual."""
    table = _ObsTable(keyframes, landmarks, rig)
    positions = (
        np.stack([lm.position for lm in landmarks]) if landmarks else np.zeros((0, 3))
    )
    res, _, _ = _evaluate(table, keyframes, positions, rig, huber_delta_px)
    cost, _ = _cost_and_rmse(table, res, huber_delta_px)
    return res, cost


def ba_jacobian(keyframes, landmarks, rig: CameraRig, parameterization: str = "left-tangent"):
    """Dense Jacobian of the sqrt(weight)-scaled residuals, for diagnostics.

    Columns: 6 per keyframe in list order (translation rho then rotation phi),
    then 3 per landmark.  Returns (J, pose_cols, landmark_cols) where the
    dicts map keyframe id / landmark id to column slices.  Each residual row
    pair touches one pose block and one landmark block; zero-weight rows are
    identically zero.  The solver assembles normal equations directly and
    never materializes this matrix.
    """
    if parameterization != "left-tangent":
        raise ValueError(f"unsupported parameterization {parameterization!r}")
    table = _ObsTable(keyframes, landmarks, rig)
    positions = (
        np.stack([lm.position for lm in landmarks]) if landmarks else np.zeros((0, 3))
    )
    n_kf, n_lm = len(keyframes), len(landmarks)
    jac = np.zeros((2 * table.n, 6 * n_kf + 3 * n_lm))
    cams = _cam_from_world_all(keyframes, rig)
    sqrt_w = np.sqrt(table.weights)
    for ki, ci, rows in table.groups:
        cam = rig.camera(CAMERA_IDS[ci])
        t = cams[ki][ci]
        x_world = positions[table.lm[rows]]
        p_cam = t.transform(x_world)
        theta = np.arctan2(np.hypot(p_cam[:, 0], p_cam[:, 1]), p_cam[:, 2])
        ok = (theta <= cam.intrinsics.theta_max + FOV_GUARD_RAD) & (
            np.linalg.norm(p_cam, axis=1) > 1e-9
        )
        j_pi = equidistant_jacobian(cam.intrinsics.focal, p_cam)
        m = t.rotation_matrix()
        j_lm = -np.matmul(j_pi, m)  # d r / d X
        j_rho = -j_lm
        j_phi = np.matmul(j_lm, _skew_batch(x_world))
        scale = sqrt_w[rows] * ok
        for i, row in enumerate(rows):
            r0 = 2 * row
            s = scale[i]
            jac[r0 : r0 + 2, 6 * ki : 6 * ki + 3] = s * j_rho[i]
            jac[r0 : r0 + 2, 6 * ki + 3 : 6 * ki + 6] = s * j_phi[i]
            lm_col = 6 * n_kf + 3 * table.lm[row]
            jac[r0 : r0 + 2, lm_col : lm_col + 3] = s * j_lm[i]
    pose_cols = {kf.keyframe_id: slice(6 * i, 6 * i + 6) for i, kf in enumerate(keyframes)}
    lm_cols = {
        lm.landmark_id: slice(6 * n_kf + 3 * i, 6 * n_kf + 3 * i + 3)
        for i, lm in enumerate(landmarks)
    }
    return jac, pose_cols, lm_cols


def _apply_pose_step(pose: Pose, delta: np.ndarray) -> Pose:
    inc = Pose(axis_angle_to_quat(delta[3:]), delta[:3])
    return compose(inc, pose)


def bundle_adjust(
    keyframes,
    landmarks,
    rig: CameraRig,
    config: BAConfig,
    fixed: set,
    variable_landmark_ids=None,
):
    """Jointly optimize keyframe poses and landmark positions in place.

    ``fixed`` holds keyframe ids pinned as the gauge (at least one required);
    their Pose objects are never touched.  ``variable_landmark_ids`` restricts
    which landmarks move (None means all); observations of held landmarks
    still constrain poses.  Landmarks with a single positive-weight
    observation are rejected as rank-deficient unless
    config.prune_underconstrained excludes them from the problem; landmarks
    with no positive-weight observations are always held.  Returns
    (keyframes, landmarks, BAReport).
    """
    fixed = set(fixed)
    if not fixed:
        raise ValueError("at least one keyframe must be fixed to anchor the gauge")
    kf_ids = {kf.keyframe_id for kf in keyframes}
    if not fixed <= kf_ids:
        raise ValueError(f"fixed ids {sorted(fixed - kf_ids)} are not keyframes")

    var_kf_idx = {}  # list index -> variable index
    for i, kf in enumerate(keyframes):
        if kf.keyframe_id not in fixed:
            var_kf_idx[i] = len(var_kf_idx)
    n_p = len(var_kf_idx)

    if variable_landmark_ids is None:
        candidate_lms = {lm.landmark_id for lm in landmarks}
    else:
        candidate_lms = set(variable_landmark_ids)

    positive_obs = {lm.landmark_id: 0 for lm in landmarks}
    for kf in keyframes:
        for obs in kf.observations:
            if obs.weight > 0.0:
                positive_obs[obs.landmark_id] += 1

    var_lm_idx = {}
    for lm in landmarks:
        if lm.landmark_id not in candidate_lms:
            continue
        n_obs = positive_obs[lm.landmark_id]
        if n_obs == 0:
            continue  # dynamic-class landmark: never constrains, held as-is
        if n_obs == 1:
            if config.prune_underconstrained:
                continue
            raise RankDeficiencyError(
                f"landmark {lm.landmark_id} has a single positive-weight observation; "
                "its depth is unobservable"
            )
        var_lm_idx[lm.landmark_id] = len(var_lm_idx)
    n_l = len(var_lm_idx)

    for i, kf in enumerate(keyframes):
        if i in var_kf_idx and not any(o.weight > 0.0 for o in kf.observations):
            raise RankDeficiencyError(
                f"keyframe {kf.keyframe_id} has no positive-weight observations; "
                "its pose is unconstrained"
            )

    # Only observations touching a variable pose or landmark enter the problem.
    def keep(ki, lm_id):
        return ki in var_kf_idx or lm_id in var_lm_idx

    table = _ObsTable(keyframes, landmarks, rig, keep=keep)
    positions = (
        np.stack([lm.position for lm in landmarks]) if landmarks else np.zeros((0, 3))
    )
    delta_h = config.huber_delta_px

    def eval_cost(kfs, pos):
        res, valid, p_cam = _evaluate(table, kfs, pos, rig, delta_h)
        cost, rmse = _cost_and_rmse(table, res, delta_h)
        return res, valid, p_cam, cost, rmse

    res, valid, p_cam, cost, rmse0 = eval_cost(keyframes, positions)
    report = BAReport(0, cost, cost, rmse0, rmse0, False, n_p, n_l)
    if n_p == 0 and n_l == 0:
        report.converged = True
        return keyframes, landmarks, report

    kf_var = np.array(
        [var_kf_idx.get(i, -1) for i in range(len(keyframes))], dtype=np.int64
    )
    lm_var_arr = np.full(len(landmarks), -1, dtype=np.int64)
    for lm_id, vi in var_lm_idx.items():
        lm_var_arr[lm_id] = vi
    # observers[lv] = sorted variable-pose indices seeing that landmark
    observers: list[set] = [set() for _ in range(n_l)]
    for ki, ci, rows in table.groups:
        kv = kf_var[ki]
        if kv < 0:
            continue
        for lm_id in table.lm[rows]:
            lv = lm_var_arr[lm_id]
            if lv >= 0:
                observers[lv].add(int(kv))
    observer_idx = [np.array(sorted(s), dtype=np.int64) for s in observers]

    lam = config.initial_damping
    iterations = 0
    converged = False

    while iterations < config.max_iterations:
        u = np.zeros((n_p, 6, 6))
        v = np.zeros((n_l, 3, 3))
        w_blocks = np.zeros((n_p, n_l, 6, 3)) if n_p and n_l else None
        g_p = np.zeros((n_p, 6))
        g_l = np.zeros((n_l, 3))

        cams = _cam_from_world_all(keyframes, rig)
        for ki, ci, rows in table.groups:
            cam = rig.camera(CAMERA_IDS[ci])
            t = cams[ki][ci]
            x_world = positions[table.lm[rows]]
            pc = p_cam[rows]
            j_pi = equidistant_jacobian(cam.intrinsics.focal, pc)
            m = t.rotation_matrix()
            j_lm = -np.matmul(j_pi, m)
            r = res[rows]
            norms = np.linalg.norm(r, axis=1)
            irls = np.where(norms > delta_h, delta_h / np.maximum(norms, 1e-300), 1.0)
            s = table.weights[rows] * irls * valid[rows]

            kv = kf_var[ki]
            lv = lm_var_arr[table.lm[rows]]
            lmask = lv >= 0

            if kv >= 0:
                j_pose = np.concatenate(
                    [-j_lm, np.matmul(j_lm, _skew_batch(x_world))], axis=2
                )
                jtj = np.einsum("nij,nik->njk", j_pose, j_pose)
                u[kv] += np.sum(s[:, None, None] * jtj, axis=0)
                g_p[kv] += np.sum(s[:, None] * np.einsum("nij,ni->nj", j_pose, r), axis=0)
                if np.any(lmask) and w_blocks is not None:
                    jtl = np.einsum("nij,nik->njk", j_pose[lmask], j_lm[lmask])
                    np.add.at(
                        w_blocks[kv], lv[lmask], s[lmask, None, None] * jtl
                    )
            if np.any(lmask):
                jtj_l = np.einsum("nij,nik->njk", j_lm[lmask], j_lm[lmask])
                np.add.at(v, lv[lmask], s[lmask, None, None] * jtj_l)
                gl_rows = s[lmask, None] * np.einsum("nij,ni->nj", j_lm[lmask], r[lmask])
                np.add.at(g_l, lv[lmask], gl_rows)

        grad_inf = 0.0
        if n_p:
            grad_inf = max(grad_inf, float(np.max(np.abs(g_p))))
        if n_l:
            grad_inf = max(grad_inf, float(np.max(np.abs(g_l))))
        if grad_inf < GRADIENT_TOL or cost < COST_FLOOR:
            converged = True
            break

        accepted = False
        while lam < 1e12:
            u_aug = u.copy()
            for i in range(n_p):
                u_aug[i][np.diag_indices(6)] += lam * (np.diag(u[i]) + 1e-12)
            v_aug = v.copy()
            for i in range(n_l):
                v_aug[i][np.diag_indices(3)] += lam * (np.diag(v[i]) + 1e-12)

            try:
                v_inv = np.zeros_like(v_aug)
                for i in range(n_l):
                    v_inv[i] = np.linalg.inv(v_aug[i])
            except np.linalg.LinAlgError:
                raise RankDeficiencyError(
                    "singular landmark block in the Schur complement"
                ) from None

            delta_p = np.zeros((n_p, 6))
            if n_p:
                s_blocks = np.zeros((n_p, n_p, 6, 6))
                idx = np.arange(n_p)
                s_blocks[idx, idx] = u_aug
                rhs_p = -g_p.copy()
                for lv in range(n_l):
                    obs_k = observer_idx[lv]
                    if obs_k.size == 0:
                        continue
                    wl = w_blocks[obs_k, lv]  # (m, 6, 3)
                    y = np.matmul(wl, v_inv[lv])  # (m, 6, 3)
                    # Y_l W_l^T over all observer pairs; indices are unique per
                    # landmark so plain fancy-index accumulation is exact
                    corr = np.matmul(y[:, None], wl.transpose(0, 2, 1)[None])
                    s_blocks[obs_k[:, None], obs_k[None, :]] -= corr
                    rhs_p[obs_k] += y @ g_l[lv]
                s_mat = s_blocks.transpose(0, 2, 1, 3).reshape(6 * n_p, 6 * n_p)
                try:
                    delta_p = np.linalg.solve(s_mat, rhs_p.reshape(-1)).reshape(n_p, 6)
                except np.linalg.LinAlgError:
                    raise RankDeficiencyError(
                        "reduced camera system is singular; a pose block is "
                        "under-constrained"
                    ) from None

            delta_l = np.zeros((n_l, 3))
            for lv in range(n_l):
                acc = -g_l[lv].copy()
                obs_k = observer_idx[lv]
                if obs_k.size and n_p:
                    wl = w_blocks[obs_k, lv]
                    acc -= np.einsum("mij,mi->j", wl, delta_p[obs_k])
                delta_l[lv] = v_inv[lv] @ acc

            new_kf_poses = {}
            for i, kf in enumerate(keyframes):
                kv = kf_var[i]
                if kv >= 0:
                    new_kf_poses[i] = _apply_pose_step(kf.pose, delta_p[kv])
            new_positions = positions.copy()
            for lm_id, lv in var_lm_idx.items():
                new_positions[lm_id] = positions[lm_id] + delta_l[lv]

            saved = {i: keyframes[i].pose for i in new_kf_poses}
            for i, p in new_kf_poses.items():
                keyframes[i].pose = p
            new_res, new_valid, new_p_cam, new_cost, new_rmse = eval_cost(
                keyframes, new_positions
            )
            if new_cost <= cost:
                positions = new_positions
                res, valid, p_cam = new_res, new_valid, new_p_cam
                prev_cost, cost = cost, new_cost
                report.final_rmse_px = new_rmse
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                iterations += 1
                if prev_cost - cost < config.convergence_tol * max(prev_cost, 1e-300):
                    converged = True
                break
            for i, p in saved.items():
                keyframes[i].pose = p
            lam *= 4.0
        if not accepted:
            converged = True  # damping exhausted: no descent direction left
            break
        if converged:
            break

    for lm in landmarks:
        if lm.landmark_id in var_lm_idx:
            lm.position = positions[lm.landmark_id]
    report.iterations = iterations
    report.final_cost = cost
    report.converged = converged
    return keyframes, landmarks, report


def pose_residuals(
    positions: np.ndarray,
    pixels: np.ndarray,
    cam_indices: np.ndarray,
    rig: CameraRig,
    pose: Pose,
    huber_delta_px: float = 2.0,
):
    """Per-observation residuals for a single vehicle pose against fixed
    landmark positions.  Returns (res (n, 2), valid (n,), p_cam (n, 3)); rows
    whose point leaves the guarded field of view carry the capped residual
    and valid=False."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cam_indices = np.asarray(cam_indices, dtype=np.int64).reshape(-1)
    cap = CAP_FACTOR * huber_delta_px
    res = np.zeros((positions.shape[0], 2))
    valid = np.zeros(positions.shape[0], dtype=bool)
    pc_all = np.zeros_like(positions)
    world_inv = inverse(pose)
    for ci in range(len(CAMERA_IDS)):
        rows = np.flatnonzero(cam_indices == ci)
        if not rows.size:
            continue
        cam = rig.camera(CAMERA_IDS[ci])
        t = compose(cam.cam_from_vehicle, world_inv)
        pc = t.transform(positions[rows])
        pix, theta = equidistant_pixels(cam.intrinsics, pc)
        ok = (theta <= cam.intrinsics.theta_max + FOV_GUARD_RAD) & (
            np.linalg.norm(pc, axis=1) > 1e-9
        )
        r = pixels[rows] - pix
        r[~ok] = cap / math.sqrt(2.0)
        res[rows] = r
        valid[rows] = ok
        pc_all[rows] = pc
    return res, valid, pc_all


def refine_pose(
    positions: np.ndarray,
    pixels: np.ndarray,
    cam_indices: np.ndarray,
    weights: np.ndarray,
    rig: CameraRig,
    init_pose: Pose,
    huber_delta_px: float = 2.0,
    max_iterations: int = 30,
) -> tuple[Pose, float]:
    """Pose-only LM over fixed landmarks; returns (world_from_vehicle, cost).

    Raises RankDeficiencyError when the 6x6 system stays singular, which a
    degenerate RANSAC sample can cause.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    cam_indices = np.asarray(cam_indices, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    pose = init_pose

    def residuals(p: Pose):
        return pose_residuals(positions, pixels, cam_indices, rig, p, huber_delta_px)

    def cost_of(res):
        norms = np.linalg.norm(res, axis=1)
        pos = weights > 0.0
        return float(np.sum(weights[pos] * _huber_vec(norms[pos], huber_delta_px)))

    res, valid, pc_all = residuals(pose)
    cost = cost_of(res)
    lam = 1e-4
    for _ in range(max_iterations):
        h = np.zeros((6, 6))
        g = np.zeros(6)
        world_inv = inverse(pose)
        for ci in range(len(CAMERA_IDS)):
            rows = np.flatnonzero(cam_indices == ci)
            if not rows.size:
                continue
            cam = rig.camera(CAMERA_IDS[ci])
            t = compose(cam.cam_from_vehicle, world_inv)
            j_pi = equidistant_jacobian(cam.intrinsics.focal, pc_all[rows])
            m = t.rotation_matrix()
            j_lm = -np.matmul(j_pi, m)
            j_pose = np.concatenate(
                [-j_lm, np.matmul(j_lm, _skew_batch(positions[rows]))], axis=2
            )
            r = res[rows]
            norms = np.linalg.norm(r, axis=1)
            irls = np.where(norms > huber_delta_px, huber_delta_px / np.maximum(norms, 1e-300), 1.0)
            s = weights[rows] * irls * valid[rows]
            h += np.einsum("n,nij,nik->jk", s, j_pose, j_pose)
            g += np.einsum("n,nij,ni->j", s, j_pose, r)

        if float(np.max(np.abs(g))) < GRADIENT_TOL or cost < COST_FLOOR:
            break
        # damping would mask a structurally deficient sample, so test h itself
        if np.linalg.matrix_rank(h) < 6:
            raise RankDeficiencyError(
                "pose-only normal equations are rank deficient; the matches "
                "do not constrain all 6 degrees of freedom"
            )
        stepped = False
        while lam < 1e12:
            h_aug = h.copy()
            h_aug[np.diag_indices(6)] += lam * (np.diag(h) + 1e-12)
            try:
                delta = np.linalg.solve(h_aug, -g)
            except np.linalg.LinAlgError:
                raise RankDeficiencyError("pose-only system is singular") from None
            candidate = _apply_pose_step(pose, delta)
            new_res, new_valid, new_pc = residuals(candidate)
            new_cost = cost_of(new_res)
            if new_cost <= cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                pose, res, valid, pc_all, cost = candidate, new_res, new_valid, new_pc, new_cost
                lam = max(lam * 0.5, 1e-12)
                stepped = True
                if rel < 1e-10:
                    return pose, cost
                break
            lam *= 4.0
        if not stepped:
            break
    return pose, cost
