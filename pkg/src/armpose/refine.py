"""Iterative silhouette-based refinement of a pose-and-configuration estimate.

The estimate is parameterized as joint angles, a base rotation stored as a
3x3 matrix but searched through a continuous 6D encoding (the first two
matrix columns, re-orthogonalized on decode), and a positive scale factor
that slides the base origin along the camera ray through a fixed pixel.
The reference refiner is a deterministic coordinate pattern search on the
rendered-silhouette overlap, so it needs no derivatives of the renderer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .kinematics import RigidTransform, forward_kinematics, joint_points
from .metrics import add_metric
from .silhouette import RenderSettings, render_link_clouds, sample_link_clouds, silhouette_iou


def rot6d_to_matrix(r6):
    """Decode a 6-vector (two stacked 3-vectors) into a rotation matrix.

    Gram-Schmidt: the first 3-vector fixes column one, the second is made
    orthogonal to it, and column three is their cross product. Degenerate
    inputs (zero or parallel vectors) raise ValueError.
    """
    r6 = np.asarray(r6, dtype=float).reshape(6)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise ValueError("first rotation column is numerically zero")
    b1 = a1 / n1
    w = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(w)
    if n2 < 1e-12:
        raise ValueError("rotation columns are numerically parallel")
    b2 = w / n2
    b3 = np.cross(b1, b2)
    return np.column_stack([b1, b2, b3])


def matrix_to_rot6d(rotation):
    """First two columns of the matrix, stacked into a 6-vector."""
    rotation = np.asarray(rotation, dtype=float).reshape(3, 3)
    return np.concatenate([rotation[:, 0], rotation[:, 1]])


@dataclass(frozen=True)
class Estimate:
    """Joint angles plus camera-from-base pose split as (rotation, ray scale).

    The translation is recovered as scale * Kinv @ (u, v, 1) for the stored
    base pixel, so refinement moves the base along its viewing ray.
    """

    theta: np.ndarray
    rotation: np.ndarray
    scale: float
    base_pixel: np.ndarray
    provenance: str = "initial"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("estimate rotation is not a proper rotation matrix")
        if not self.scale > 0.0:
            raise ValueError("estimate scale must be positive")
        pix = np.array(self.base_pixel, dtype=float).reshape(2)
        for arr in (theta, rot, pix):
            arr.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "base_pixel", pix)

    def pose(self, k):
        """Camera-from-base transform implied by this estimate."""
        u, v = self.base_pixel
        ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        return RigidTransform(self.rotation, self.scale * ray)

    def to_json(self):
        # rotation is stored row-major as a flat list of 9 floats
        return {
            "theta": self.theta.tolist(),
            "rotation": self.rotation.ravel().tolist(),
            "lambda": self.scale,
            "p_base_pixel": self.base_pixel.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            theta=np.asarray(obj["theta"], dtype=float),
            rotation=np.asarray(obj["rotation"], dtype=float).reshape(3, 3),
            scale=float(obj["lambda"]),
            base_pixel=np.asarray(obj["p_base_pixel"], dtype=float),
            provenance=str(obj.get("provenance", "initial")),
        )


def save_estimate(estimate, path):
    atomic_write_text(path, json.dumps(estimate.to_json(), indent=2) + "\n")


def load_estimate(path):
    with open(path, "r", encoding="utf-8") as fh:
        return Estimate.from_json(json.load(fh))


@dataclass(frozen=True)
class EstimateUpdate:
    """Multiplicative update: new rotation is decode(delta_rot6) @ rotation,
    new scale is delta_scale * scale, angles add."""

    delta_theta: np.ndarray
    delta_rot6: np.ndarray
    delta_scale: float = 1.0

    def __post_init__(self):
        dt = np.array(self.delta_theta, dtype=float).reshape(-1)
        dr = np.array(self.delta_rot6, dtype=float).reshape(6)
        if not self.delta_scale > 0.0:
            raise ValueError("scale update must be positive")
        dt.flags.writeable = False
        dr.flags.writeable = False
        object.__setattr__(self, "delta_theta", dt)
        object.__setattr__(self, "delta_rot6", dr)
        object.__setattr__(self, "delta_scale", float(self.delta_scale))

    @classmethod
    def identity(cls, dof):
        return cls(np.zeros(dof), np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), 1.0)


def apply_update(estimate, update):
    if update.delta_theta.shape != estimate.theta.shape:
        raise ValueError("update has wrong number of joint angles")
    return Estimate(
        theta=estimate.theta + update.delta_theta,
        rotation=rot6d_to_matrix(update.delta_rot6) @ estimate.rotation,
        scale=update.delta_scale * estimate.scale,
        base_pixel=estimate.base_pixel,
        provenance=estimate.provenance,
    )


# ---------------------------------------------------------------------------
# losses


def config_loss(theta_a, theta_b):
    """L1 distance between (sin, cos) encodings; inherently 2pi-periodic."""
    a = np.asarray(theta_a, dtype=float).reshape(-1)
    b = np.asarray(theta_b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("configurations have different lengths")
    return float(np.sum(np.abs(np.sin(a) - np.sin(b))) + np.sum(np.abs(np.cos(a) - np.cos(b))))


def pose_loss(pose_est, pose_gt, points):
    """Rotation and translation errors decoupled through a shared point set.

    Swaps one component at a time against the reference transform and sums
    the L1 distances of the transformed points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rot_mix = pts @ pose_est.rotation.T + pose_gt.translation
    trans_mix = pts @ pose_gt.rotation.T + pose_est.translation
    ref = pose_gt.apply(pts)
    return float(np.sum(np.abs(rot_mix - ref)) + np.sum(np.abs(trans_mix - ref)))


def grad_normalize(blocks):
    """Scale each array to unit L2 norm; all-zero blocks pass through."""
    out = []
    for block in blocks:
        arr = np.asarray(block, dtype=float)
        norm = np.linalg.norm(arr)
        out.append(arr / norm if norm > 0.0 else arr.copy())
    return out


# ---------------------------------------------------------------------------
# reference refiner


@dataclass(frozen=True)
class RefinerConfig:
    iterations: int = 3
    inner_evals_per_iteration: int = 250
    step_theta: float = 0.05
    step_rot: float = 0.02
    step_scale: float = 0.02
    objective: str = "iou"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.inner_evals_per_iteration < 1:
            raise ValueError("need a positive evaluation budget")
        if self.objective not in ("iou", "pose_config"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not (0.0 < self.step_scale < 1.0):
            raise ValueError("step_scale must lie in (0, 1)")


@dataclass
class _SearchState:
    theta: np.ndarray
    rotation: np.ndarray
    r6: np.ndarray
    scale: float

    def candidate(self, base_pixel):
        return Estimate(self.theta, self.rotation, self.scale, base_pixel)


def refine(estimate, observed, chain, meshes, k, cfg=None, settings=None, ground_truth=None):
    """Pattern-search refinement against an observed silhouette.

    Returns (refined estimate, trace). The trace has one row per iteration
    plus a baseline row, each a dict with the iteration number, cumulative
    objective evaluations, and the best objective value so far; when ground
    truth is supplied each row also carries the current pose-point error.
    Objective "iou" needs only the observed mask; "pose_config" compares
    against ground_truth directly and is meant for diagnostics.
    """
    cfg = cfg or RefinerConfig()
    settings = settings or RenderSettings()
    observed = np.asarray(observed, dtype=bool)
    if observed.shape != (k.height, k.width):
        raise ValueError(f"observed mask is {observed.shape}, camera expects {(k.height, k.width)}")
    if cfg.objective == "pose_config" and ground_truth is None:
        raise ValueError("pose_config objective requires ground_truth")

    clouds = sample_link_clouds(meshes, settings)
    lo, hi = chain.limits()
    if ground_truth is not None:
        gt_points = joint_points(chain, ground_truth.theta).stacked()
        gt_pose = ground_truth.pose(k)

    def objective(est):
        if cfg.objective == "pose_config":
            return pose_loss(est.pose(k), gt_pose, gt_points) + config_loss(est.theta, ground_truth.theta)
        frames = [chain.base_frame] + forward_kinematics(chain, est.theta)
        mask = render_link_clouds(clouds, frames, est.pose(k), k, settings)
        return 1.0 - silhouette_iou(mask, observed)

    def tracked_error(est):
        if ground_truth is None:
            return None
        return add_metric(gt_pose, ground_truth.theta, est.pose(k), est.theta, chain)

    state = _SearchState(
        theta=estimate.theta.copy(),
        rotation=estimate.rotation,
        r6=matrix_to_rot6d(estimate.rotation),
        scale=estimate.scale,
    )
    f_curr = objective(state.candidate(estimate.base_pixel))
    trace = [_trace_row(0, 0, f_curr, tracked_error(state.candidate(estimate.base_pixel)))]
    evals_total = 0
    dof = chain.dof

    def probe(kind, index, direction, steps):
        """Build a candidate one step away along a single coordinate."""
        theta, r6, scl = state.theta, state.r6, state.scale
        rot = state.rotation
        if kind == "theta":
            theta = theta.copy()
            theta[index] = np.clip(theta[index] + direction * steps[0], lo[index], hi[index])
        elif kind == "rot":
            r6 = r6.copy()
            r6[index] += direction * steps[1]
            try:
                rot = rot6d_to_matrix(r6)
            except ValueError:
                return None
        else:
            scl = scl * (1.0 + direction * steps[2])
        return _SearchState(theta, rot, r6, scl)

    coords = [("theta", i) for i in range(dof)] + [("rot", i) for i in range(6)] + [("scale", 0)]

    for it in range(1, cfg.iterations + 1):
        steps = [cfg.step_theta, cfg.step_rot, cfg.step_scale]
        used = 0
        while used < cfg.inner_evals_per_iteration:
            moved = False
            for kind, index in coords:
                if used >= cfg.inner_evals_per_iteration:
                    break
                trials = []
                for direction in (1.0, -1.0):
                    if used >= cfg.inner_evals_per_iteration:
                        break
                    cand = probe(kind, index, direction, steps)
                    if cand is None:
                        continue
                    trials.append((objective(cand.candidate(estimate.base_pixel)), direction, cand))
                    used += 1
                if not trials:
                    continue
                best = min(trials, key=lambda t: t[0])
                if best[0] < f_curr:
                    f_curr, direction, accepted = best[0], best[1], best[2]
                    state = accepted
                    moved = True
                    # ride the same direction while it keeps paying off
                    while used < cfg.inner_evals_per_iteration:
                        cand = probe(kind, index, direction, steps)
                        if cand is None:
                            break
                        f_new = objective(cand.candidate(estimate.base_pixel))
                        used += 1
                        if f_new < f_curr:
                            f_curr = f_new
                            state = cand
                        else:
                            break
            if not moved:
                steps = [s * 0.5 for s in steps]
        evals_total += used
        trace.append(_trace_row(it, evals_total, f_curr, tracked_error(state.candidate(estimate.base_pixel))))

    refined = Estimate(
        theta=state.theta,
        rotation=state.rotation,
        scale=state.scale,
        base_pixel=estimate.base_pixel,
        provenance=f"refined({cfg.iterations})",
    )
    return refined, trace


def _trace_row(iteration, evaluations, value, point_error):
    row = {"iteration": iteration, "evaluations": evaluations, "objective": float(value)}
    if point_error is not None:
        row["point_error"] = point_error
    return row
