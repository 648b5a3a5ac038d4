"""Distance-geometric configuration recovery and the keypoint-to-distance regressor.

The skeleton of a configuration is the 2n-point set [p_1..p_n, q_1..q_n]. Its
matrix of squared pairwise distances determines the configuration up to a
rigid motion, a reflection, and a gauge in the first two joints (rotating the
cloud about the base axis, or about joint 2's axis, which contains both p_1
and q_1, leaves every distance unchanged). Alignment against anchor targets
resolves what the distances cannot.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text
from .kinematics import PointSet, check_configuration, dh_transform, joint_points, wrap_angle


class AlignmentDegenerateError(ValueError):
    """Anchor points too close to collinear to pin down a rigid map."""


class ConfigurationAmbiguousWarning(UserWarning):
    """Some joint angle had no perpendicular lever in the point set."""


class NonEmbeddableWarning(UserWarning):
    """The Gram matrix has a significantly negative eigenvalue."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


# ---------------------------------------------------------------------------
# distance matrices and classical scaling


def edm_from_points(points):
    """Squared-distance matrix of a point cloud (rows are points)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (m, 3) point array")
    diff = pts[:, None, :] - pts[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def edm_from_configuration(chain, theta):
    """Squared-distance matrix of the skeleton points of a configuration.

    Row/column order is [p_1..p_n, q_1..q_n]. Invariant to the chain's base
    placement since distances are rigid invariants.
    """
    return edm_from_points(joint_points(chain, theta).stacked())


def _check_edm(d):
    mat = np.asarray(d, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.all(np.isfinite(mat)):
        raise ValueError("distance matrix entries must be finite")
    if np.max(np.abs(mat - mat.T)) > 1e-9:
        raise ValueError("distance matrix must be symmetric within 1e-9")
    if np.max(np.abs(np.diag(mat))) > 1e-9:
        raise ValueError("distance matrix diagonal must be zero within 1e-9")
    if mat.min() < -1e-9:
        raise ValueError("squared distances must be nonnegative")
    return mat


def gram_from_edm(d):
    """Double-center a squared-distance matrix: G = -0.5 * J D J, J = I - (1/m) 11^T."""
    mat = _check_edm(d)
    m = mat.shape[0]
    centering = np.eye(m) - np.full((m, m), 1.0 / m)
    gram = -0.5 * (centering @ mat @ centering)
    return 0.5 * (gram + gram.T)


def points_from_gram(g):
    """Recover a centered (m, 3) embedding from a Gram matrix.

    Takes the three largest eigenpairs; eigenvalues clipped at zero before the
    square root. Eigenvalues below -1e-6 raise NonEmbeddableWarning. Each kept
    eigenvector's sign is fixed so its first component above 1e-12 magnitude
    is positive, which makes the output deterministic under eigenvalue ties.
    """
    gram = np.asarray(g, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ValueError("gram matrix must be square")
    if np.max(np.abs(gram - gram.T)) > 1e-9:
        raise ValueError("gram matrix must be symmetric within 1e-9")
    evals, evecs = np.linalg.eigh(gram)
    if evals.min() < -1e-6:
        warnings.warn(
            f"gram matrix has negative eigenvalue {evals.min():.3e}; "
            "distances are not embeddable in 3-space",
            NonEmbeddableWarning,
            stacklevel=2,
        )
    order = np.argsort(-evals, kind="stable")[:3]
    coords = np.zeros((gram.shape[0], 3))
    for col, idx in enumerate(order):
        vec = evecs[:, idx].copy()
        nonzero = np.nonzero(np.abs(vec) > 1e-12)[0]
        if nonzero.size and vec[nonzero[0]] < 0:
            vec = -vec
        coords[:, col] = math.sqrt(max(float(evals[idx]), 0.0)) * vec
    return coords


# ---------------------------------------------------------------------------
# anchoring


def _kabsch(src, dst):
    """Proper rotation + translation minimizing ||R src + t - dst||."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    if sign == 0:
        sign = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return rot, c_dst - rot @ c_src


def anchor_indices(chain):
    """Indices into the stacked point set used as alignment anchors.

    Scans base-side candidates (p_1, q_1, p_2, q_2, p_3, ...) at the zero
    configuration and keeps the first three that are pairwise distinct and not
    collinear. Depends only on the chain constants, never on a configuration.
    """
    n = chain.dof
    reference = joint_points(chain, np.zeros(n)).stacked()
    order = []
    for i in range(n):
        order.extend([i, n + i])
    scale = max(float(np.max(np.linalg.norm(reference - reference[0], axis=1))), 1e-6)
    chosen = [order[0]]
    for cand in order[1:]:
        pts = reference[chosen + [cand]]
        if len(chosen) == 1:
            if np.linalg.norm(pts[1] - pts[0]) > 1e-6 * scale:
                chosen.append(cand)
        else:
            area = np.linalg.norm(np.cross(pts[1] - pts[0], pts[2] - pts[0]))
            if area > 1e-8 * scale * scale:
                chosen.append(cand)
        if len(chosen) == 3:
            return chosen
    raise AlignmentDegenerateError(
        f"chain {chain.name!r} has no non-collinear anchor triple at the zero configuration"
    )


def align_points(x_raw, chain, targets=None):
    """Rigidly map a recovered cloud onto anchor targets, fixing reflections.

    x_raw is the (2n, 3) output of points_from_gram (any rigid placement,
    either chirality). The proper-rotation Procrustes solve always uses only
    the anchor rows selected by anchor_indices. targets is a (2n, 3) matrix
    of known point locations; when given, the cloud and its mirror image are
    both fit and the full-cloud residual decides between them. Three anchor
    points alone cannot decide chirality (a triangle superposes onto its
    mirror image under a proper rotation), so with targets=None the
    non-mirrored branch is kept unless the anchors clearly prefer the other,
    and the zero-configuration skeleton serves as the anchor reference. That
    canonical alignment leaves the first two joint angles in a gauge the
    distances carry no information about, and the configuration's chirality
    follows the embedding's sign convention rather than the true arm.
    """
    cloud = np.asarray(x_raw, dtype=float)
    n = chain.dof
    if cloud.shape != (2 * n, 3):
        raise ValueError(f"expected a ({2 * n}, 3) cloud for chain {chain.name!r}")
    if targets is None:
        target_full = joint_points(chain, np.zeros(n)).stacked()
        score_rows = anchor_indices(chain)
    else:
        target_full = np.asarray(targets, dtype=float)
        if target_full.shape != (2 * n, 3):
            raise ValueError("targets must match the stacked point-set shape")
        score_rows = slice(None)
    idx = anchor_indices(chain)

    best = None
    for mirror in (False, True):
        candidate = cloud * np.array([1.0, 1.0, -1.0]) if mirror else cloud
        rot, tra = _kabsch(candidate[idx], target_full[idx])
        mapped = candidate @ rot.T + tra
        residual = float(np.linalg.norm(mapped[score_rows] - target_full[score_rows]))
        if best is None or residual < best[0]:
            best = (residual, mapped)
    return PointSet.from_stacked(best[1], strict=False)


# ---------------------------------------------------------------------------
# analytic configuration recovery


def configuration_from_points(chain, points):
    """Recover joint angles from an anchored skeleton point set.

    Walks the chain from the base. For joint i the observed vectors from the
    previous frame origin to p_i and q_i are compared against their zero-angle
    references; the least-squares rotation angle about the previous z axis is
    the joint angle. Joints whose points all sit on the rotation axis have no
    perpendicular lever: those angles are returned as the zero-angle reference
    and flagged with ConfigurationAmbiguousWarning. Recovered angles are
    shifted by 2*pi into the joint limits when that makes them in-range.
    """
    if isinstance(points, PointSet):
        p_obs, q_obs = points.p, points.q
    else:
        stacked = np.asarray(points, dtype=float)
        half = stacked.shape[0] // 2
        p_obs, q_obs = stacked[:half], stacked[half:]
    if p_obs.shape[0] != chain.dof:
        raise ValueError(f"point set has {p_obs.shape[0]} origins, chain has {chain.dof} joints")

    frame = chain.base_frame
    angles = np.zeros(chain.dof)
    ambiguous = []
    for i, joint in enumerate(chain.joints):
        axis = frame.rotation[:, 2]
        origin = frame.translation
        ref_frame = frame @ dh_transform(joint, -joint.theta_offset)
        ref_vecs = [
            ref_frame.translation - origin,
            ref_frame.translation + ref_frame.rotation[:, 2] - origin,
        ]
        obs_vecs = [p_obs[i] - origin, q_obs[i] - origin]
        sin_acc = 0.0
        cos_acc = 0.0
        strength = 0.0
        for ref, obs in zip(ref_vecs, obs_vecs):
            ref_perp = ref - axis * (axis @ ref)
            obs_perp = obs - axis * (axis @ obs)
            sin_acc += float(axis @ np.cross(ref_perp, obs_perp))
            cos_acc += float(ref_perp @ obs_perp)
            strength += float(np.linalg.norm(ref_perp) * np.linalg.norm(obs_perp))
        if strength < 1e-10:
            ambiguous.append(i)
            phi = 0.0
        else:
            phi = math.atan2(sin_acc, cos_acc)
        theta = wrap_angle(phi - joint.theta_offset)
        if theta < joint.limit_lo and theta + 2.0 * math.pi <= joint.limit_hi:
            theta += 2.0 * math.pi
        elif theta > joint.limit_hi and theta - 2.0 * math.pi >= joint.limit_lo:
            theta -= 2.0 * math.pi
        angles[i] = theta
        frame = frame @ dh_transform(joint, phi - joint.theta_offset)
    if ambiguous:
        warnings.warn(
            f"joints {ambiguous} have no perpendicular lever; returned reference angles",
            ConfigurationAmbiguousWarning,
            stacklevel=2,
        )
    return angles


# ---------------------------------------------------------------------------
# the keypoint-to-distance regressor


@dataclass
class MlpRegressor:
    """Three-stage fully connected regressor from 2D keypoints to distances.

    Input is the flattened (u, v) keypoint list normalized to [0, 1] by the
    image dimensions; output is the upper triangle of the squared-distance
    matrix. Raw outputs are squared to enforce nonnegativity. Dropout acts on
    the hidden activations and is meant to stay active at inference time, so
    repeated estimates sample the regressor's predictive spread.
    """

    layer_dims: list
    weights: list
    biases: list
    activation: str = "tanh"
    dropout_rate: float = 0.1
    input_normalization: str = "image_size"

    def __post_init__(self):
        if len(self.layer_dims) != 4:
            raise ValueError("regressor is fixed at three weight stages (four layer dims)")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ValueError("expected exactly three weight matrices and bias vectors")
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[li + 1], self.layer_dims[li])
            if w.shape != expect or b.shape != (expect[0],):
                raise ValueError(f"stage {li} has shape {w.shape}, expected {expect}")

    @property
    def matrix_size(self):
        """Side length m of the emitted squared-distance matrix."""
        out = self.layer_dims[-1]
        m = int(round(0.5 * (1.0 + math.sqrt(1.0 + 8.0 * out))))
        if m * (m - 1) // 2 != out:
            raise ValueError(f"output width {out} is not a triangular number")
        return m

    def to_json(self):
        return {
            "layer_dims": [int(v) for v in self.layer_dims],
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
            "input_normalization": self.input_normalization,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj):
        dims = [int(v) for v in obj["layer_dims"]]
        weights = [
            np.asarray(obj["weights"][i], dtype=float).reshape(dims[i + 1], dims[i])
            for i in range(3)
        ]
        biases = [np.asarray(obj["biases"][i], dtype=float) for i in range(3)]
        return cls(
            layer_dims=dims,
            weights=weights,
            biases=biases,
            activation=obj.get("activation", "tanh"),
            dropout_rate=float(obj.get("dropout_rate", 0.1)),
            input_normalization=obj.get("input_normalization", "image_size"),
        )


def init_regressor(input_dim, output_dim, hidden=(160, 160), dropout_rate=0.1, seed=0):
    """Fresh regressor with uniform Glorot weights and zero biases."""
    dims = [int(input_dim), int(hidden[0]), int(hidden[1]), int(output_dim)]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = []
    biases = []
    for li in range(3):
        bound = math.sqrt(6.0 / (dims[li] + dims[li + 1]))
        weights.append(rng.uniform(-bound, bound, size=(dims[li + 1], dims[li])))
        biases.append(np.zeros(dims[li + 1]))
    return MlpRegressor(layer_dims=dims, weights=weights, biases=biases, dropout_rate=dropout_rate)


def save_regressor(net, path, trainer_state=None):
    obj = net.to_json()
    if trainer_state is not None:
        obj["trainer_state"] = trainer_state.to_json()
    atomic_write_text(path, json.dumps(obj) + "\n")


def load_regressor(path):
    """Load a regressor; returns (net, trainer_state_or_None)."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    state = AdamState.from_json(obj["trainer_state"]) if "trainer_state" in obj else None
    return MlpRegressor.from_json(obj), state


def _sample_masks(net, rng):
    """Inverted-dropout masks for the two hidden layers, or None when disabled."""
    if net.dropout_rate == 0.0:
        return None
    keep = 1.0 - net.dropout_rate
    return [
        (rng.random(net.layer_dims[1]) < keep).astype(float) / keep,
        (rng.random(net.layer_dims[2]) < keep).astype(float) / keep,
    ]


def _forward_cached(net, x, masks):
    """Raw forward pass; returns (output vector, per-layer caches for backprop)."""
    h1_pre = net.weights[0] @ x + net.biases[0]
    h1 = np.tanh(h1_pre)
    if masks is not None:
        h1 = h1 * masks[0]
    h2_pre = net.weights[1] @ h1 + net.biases[1]
    h2 = np.tanh(h2_pre)
    if masks is not None:
        h2 = h2 * masks[1]
    out = net.weights[2] @ h2 + net.biases[2]
    return out, (x, h1, h2)


def _matrix_from_upper(values, m):
    mat = np.zeros((m, m))
    iu = np.triu_indices(m, k=1)
    mat[iu] = values
    return mat + mat.T


def keypoint_features(keypoints, width, height):
    """Regressor input vector: per-keypoint (u/width, v/height), flattened.

    Invisible keypoints are zeroed so the layout stays fixed-width.
    """
    scaled = keypoints.uv / np.array([float(width), float(height)])
    scaled = np.where(keypoints.visible[:, None], scaled, 0.0)
    return scaled.ravel()


def mlp_forward(net, keypoints, dropout_active=False, rng=None):
    """Predict a squared-distance matrix from a normalized keypoint vector.

    keypoints is the flat (2k,) vector of [0, 1] coordinates. When
    dropout_active is set, hidden units are dropped with the net's rate using
    rng (a fresh default generator when omitted), so outputs are stochastic.
    """
    x = np.asarray(keypoints, dtype=float).reshape(-1)
    if x.shape[0] != net.layer_dims[0]:
        raise ValueError(f"input has {x.shape[0]} values, regressor expects {net.layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("keypoint inputs must be finite")
    masks = None
    if dropout_active:
        masks = _sample_masks(net, rng if rng is not None else np.random.default_rng())
    raw, _ = _forward_cached(net, x, masks)
    return _matrix_from_upper(raw * raw, net.matrix_size)


def frobenius_loss(net, keypoints, target, masks=None):
    """0.5 * ||predicted - target||_F^2 over the full matrix."""
    x = np.asarray(keypoints, dtype=float).reshape(-1)
    raw, _ = _forward_cached(net, x, masks)
    pred = _matrix_from_upper(raw * raw, net.matrix_size)
    diff = pred - np.asarray(target, dtype=float)
    return 0.5 * float(np.sum(diff * diff))


def _loss_and_gradients(net, keypoints, target, masks=None):
    x = np.asarray(keypoints, dtype=float).reshape(-1)
    target = np.asarray(target, dtype=float)
    m = net.matrix_size
    raw, (x0, h1, h2) = _forward_cached(net, x, masks)
    pred = _matrix_from_upper(raw * raw, m)
    resid = pred - target
    loss = 0.5 * float(np.sum(resid * resid))
    iu = np.triu_indices(m, k=1)
    # Each upper-triangle value appears twice in the symmetric matrix.
    d_raw = 2.0 * (resid[iu] + resid.T[iu]) * raw

    gw = [None, None, None]
    gb = [None, None, None]
    gw[2] = np.outer(d_raw, h2)
    gb[2] = d_raw
    d_h2 = net.weights[2].T @ d_raw
    if masks is not None:
        d_h2 = d_h2 * masks[1]
    d_pre2 = d_h2 * (1.0 - np.tanh(net.weights[1] @ h1 + net.biases[1]) ** 2)
    gw[1] = np.outer(d_pre2, h1)
    gb[1] = d_pre2
    d_h1 = net.weights[1].T @ d_pre2
    if masks is not None:
        d_h1 = d_h1 * masks[0]
    d_pre1 = d_h1 * (1.0 - np.tanh(net.weights[0] @ x0 + net.biases[0]) ** 2)
    gw[0] = np.outer(d_pre1, x0)
    gb[0] = d_pre1
    return loss, gw, gb


def mlp_gradients(net, keypoints, target, masks=None):
    """Analytic gradients of frobenius_loss w.r.t. every weight and bias.

    Returns (grad_weights, grad_biases) lists matching the net's stages. The
    optional masks fix the dropout pattern so the gradient corresponds to the
    same stochastic forward pass.
    """
    _, gw, gb = _loss_and_gradients(net, keypoints, target, masks)
    return gw, gb


@dataclass
class AdamState:
    """First/second moment accumulators plus the number of steps taken."""

    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, net):
        shapes = [w for w in net.weights] + [b for b in net.biases]
        return cls(m=[np.zeros_like(a) for a in shapes], v=[np.zeros_like(a) for a in shapes])

    def to_json(self):
        return {
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
            "step": int(self.step),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            m=[np.asarray(a, dtype=float) for a in obj["m"]],
            v=[np.asarray(a, dtype=float) for a in obj["v"]],
            step=int(obj.get("step", 0)),
        )


@dataclass
class TrainConfig:
    """Optimizer settings; steps counts total optimization steps.

    warmup_steps is absolute (100 = 5% of the default 2000-step run) so the
    learning rate is a function of the global step alone and checkpointed
    runs stay on the schedule of the run they continue.
    """

    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    start_step: int = 0


def train_gim(net, dataset, cfg, adam_state=None):
    """Train the regressor on (keypoint vector, target matrix) pairs with Adam.

    The learning rate ramps linearly over the first warmup_steps optimization
    steps, then stays constant. Batch selection, dropout masks, and the
    learning rate are pure functions of (cfg.seed, global step), so a run
    resumed from start_step with the saved Adam state reproduces the
    uninterrupted run exactly. Returns (net, trace, adam_state) where trace
    rows are (step, batch loss before the update).
    """
    inputs = [np.asarray(kp, dtype=float).reshape(-1) for kp, _ in dataset]
    targets = [np.asarray(tg, dtype=float) for _, tg in dataset]
    if not inputs:
        raise ValueError("training dataset is empty")
    warmup_steps = max(1, int(cfg.warmup_steps))
    state = adam_state if adam_state is not None else AdamState.zeros_like(net)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    work = MlpRegressor(
        layer_dims=list(net.layer_dims),
        weights=weights,
        biases=biases,
        activation=net.activation,
        dropout_rate=net.dropout_rate,
        input_normalization=net.input_normalization,
    )
    trace = []
    n_samples = len(inputs)
    for step in range(cfg.start_step, cfg.steps):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, step)))
        batch = rng.integers(0, n_samples, size=cfg.batch_size)
        loss_acc = 0.0
        gw_acc = [np.zeros_like(w) for w in weights]
        gb_acc = [np.zeros_like(b) for b in biases]
        for si in batch:
            masks = _sample_masks(work, rng)
            loss, gw, gb = _loss_and_gradients(work, inputs[si], targets[si], masks)
            loss_acc += loss
            for li in range(3):
                gw_acc[li] += gw[li]
                gb_acc[li] += gb[li]
        inv = 1.0 / cfg.batch_size
        loss = loss_acc * inv
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        trace.append((step, loss))
        lr = cfg.learning_rate * min(1.0, (step + 1) / warmup_steps)
        t = step + 1
        params = weights + biases
        grads = [g * inv for g in gw_acc] + [g * inv for g in gb_acc]
        for pi, (param, grad) in enumerate(zip(params, grads)):
            state.m[pi] = cfg.beta1 * state.m[pi] + (1.0 - cfg.beta1) * grad
            state.v[pi] = cfg.beta2 * state.v[pi] + (1.0 - cfg.beta2) * grad * grad
            m_hat = state.m[pi] / (1.0 - cfg.beta1**t)
            v_hat = state.v[pi] / (1.0 - cfg.beta2**t)
            param -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        state.step = t
    return work, trace, state
