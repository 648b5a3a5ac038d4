"""Serial-chain kinematics on standard (distal) DH parameters.

A chain is a list of revolute joints. Frame i is reached from frame i-1 by
Rz(theta_i + offset_i) * Tz(d_i) * Tx(a_i) * Rx(alpha_i). The skeleton used by
the distance-geometry stage attaches two points to every frame: the frame
origin p_i and the axis point q_i = p_i + R_i @ (0, 0, 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text

_EYE3 = np.eye(3)


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    wrapped = np.remainder(np.asarray(theta, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


class RigidTransform:
    """An SE(3) element: orthonormal rotation (det +1) plus translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None):
        rot = _EYE3.copy() if rotation is None else np.array(rotation, dtype=float).reshape(3, 3)
        tra = np.zeros(3) if translation is None else np.array(translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tra))):
            raise ValueError("rigid transform entries must be finite")
        if np.max(np.abs(rot.T @ rot - _EYE3)) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant differs from +1 by more than 1e-9")
        rot.flags.writeable = False
        tra.flags.writeable = False
        self.rotation = rot
        self.translation = tra

    @classmethod
    def identity(cls):
        return cls()

    def compose(self, other):
        """Return self applied after other has been applied, i.e. self @ other."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other):
        return self.compose(other)

    def apply(self, points):
        """Transform one point (3,) or a stack of points (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -(rot_inv @ self.translation))

    def as_matrix(self):
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def to_json(self):
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(np.asarray(obj["rotation"], dtype=float).reshape(3, 3), obj["translation"])

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def rotation_geodesic(r_a, r_b):
    """Angle of the relative rotation between two rotation matrices, in radians.

    Uses atan2 of the skew part against the trace, which stays accurate near
    identity where the arccos form loses half the significant digits.
    """
    rel = np.asarray(r_a, dtype=float).T @ np.asarray(r_b, dtype=float)
    skew = 0.5 * np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    cos_term = 0.5 * (np.trace(rel) - 1.0)
    return math.atan2(float(np.linalg.norm(skew)), float(cos_term))


@dataclass(frozen=True)
class JointSpec:
    """One revolute joint: standard DH constants plus joint limits (radians)."""

    a: float
    d: float
    alpha: float
    theta_offset: float = 0.0
    limit_lo: float = -math.pi
    limit_hi: float = math.pi

    def __post_init__(self):
        vals = (self.a, self.d, self.alpha, self.theta_offset, self.limit_lo, self.limit_hi)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("joint parameters must be finite")
        if not self.limit_lo < self.limit_hi:
            raise ValueError(f"joint limits must satisfy lo < hi, got [{self.limit_lo}, {self.limit_hi}]")

    def to_json(self):
        return {
            "a": self.a,
            "d": self.d,
            "alpha": self.alpha,
            "theta_offset": self.theta_offset,
            "limit_lo": self.limit_lo,
            "limit_hi": self.limit_hi,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            a=float(obj["a"]),
            d=float(obj["d"]),
            alpha=float(obj["alpha"]),
            theta_offset=float(obj.get("theta_offset", 0.0)),
            limit_lo=float(obj["limit_lo"]),
            limit_hi=float(obj["limit_hi"]),
        )


@dataclass(frozen=True)
class KinematicChain:
    """A named serial chain: joints, base placement and the DH convention tag."""

    name: str
    joints: tuple
    base_frame: RigidTransform
    convention: str = "dh_standard"
    link_mesh_ids: tuple | None = None

    def __post_init__(self):
        if self.convention != "dh_standard":
            raise ValueError(f"unsupported DH convention: {self.convention!r}")
        if len(self.joints) < 1:
            raise ValueError("a chain needs at least one joint")
        object.__setattr__(self, "joints", tuple(self.joints))
        if self.link_mesh_ids is not None:
            object.__setattr__(self, "link_mesh_ids", tuple(self.link_mesh_ids))

    @property
    def dof(self):
        return len(self.joints)

    def limits(self):
        """Return (lo, hi) arrays of shape (dof,)."""
        lo = np.array([j.limit_lo for j in self.joints])
        hi = np.array([j.limit_hi for j in self.joints])
        return lo, hi

    def to_json(self):
        obj = {
            "name": self.name,
            "convention": self.convention,
            "joints": [j.to_json() for j in self.joints],
            "base_frame": self.base_frame.to_json(),
        }
        if self.link_mesh_ids is not None:
            obj["link_mesh_ids"] = list(self.link_mesh_ids)
        return obj

    @classmethod
    def from_json(cls, obj):
        mesh_ids = obj.get("link_mesh_ids")
        return cls(
            name=str(obj["name"]),
            joints=tuple(JointSpec.from_json(j) for j in obj["joints"]),
            base_frame=RigidTransform.from_json(obj["base_frame"]),
            convention=obj.get("convention", "dh_standard"),
            link_mesh_ids=tuple(mesh_ids) if mesh_ids is not None else None,
        )

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_json(), indent=2) + "\n")


def load_chain(path):
    """Load a chain definition from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        return KinematicChain.from_json(json.load(fh))


def builtin_chain(name):
    """Load one of the chain definitions shipped with the package."""
    from importlib import resources

    ref = resources.files("armpose.data").joinpath(f"{name}.json")
    if not ref.is_file():
        raise ValueError(f"unknown builtin chain {name!r}")
    return KinematicChain.from_json(json.loads(ref.read_text(encoding="utf-8")))


def dh_transform(joint, theta):
    """Frame i-1 to frame i transform for one joint at angle theta (radians).

    Closed form of Rz(theta + offset) * Tz(d) * Tx(a) * Rx(alpha).
    """
    phi = float(theta) + joint.theta_offset
    cp, sp = math.cos(phi), math.sin(phi)
    ca, sa = math.cos(joint.alpha), math.sin(joint.alpha)
    a, d = joint.a, joint.d
    rot = np.array(
        [
            [cp, -sp * ca, sp * sa],
            [sp, cp * ca, -cp * sa],
            [0.0, sa, ca],
        ]
    )
    return RigidTransform(rot, np.array([a * cp, a * sp, d]))


def check_configuration(chain, theta):
    """Validate a configuration vector: shape (dof,), finite entries."""
    arr = np.asarray(theta, dtype=float).reshape(-1)
    if arr.shape[0] != chain.dof:
        raise ValueError(f"configuration has {arr.shape[0]} angles, chain {chain.name!r} has {chain.dof} joints")
    if not np.all(np.isfinite(arr)):
        raise ValueError("configuration angles must be finite")
    return arr


def forward_kinematics(chain, theta):
    """Return one RigidTransform per joint, world <- frame i, i = 1..dof."""
    angles = check_configuration(chain, theta)
    frames = []
    current = chain.base_frame
    for joint, ang in zip(chain.joints, angles):
        current = current @ dh_transform(joint, ang)
        frames.append(current)
    return frames


@dataclass(frozen=True)
class PointSet:
    """Skeleton points: frame origins p (n, 3) and unit axis points q = p + z_i.

    Recovered point clouds from noisy distance matrices need not satisfy the
    unit-axis property; construct those with strict=False.
    """

    p: np.ndarray
    q: np.ndarray
    strict: bool = True

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        q = np.array(self.q, dtype=float)
        if p.ndim != 2 or p.shape[1] != 3 or p.shape != q.shape:
            raise ValueError("point set needs matching (n, 3) arrays")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("point set entries must be finite")
        if self.strict:
            norms = np.linalg.norm(q - p, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError("axis points must sit at unit distance from their origins")
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def stacked(self):
        """All points as one (2n, 3) array, origins first."""
        return np.vstack([self.p, self.q])

    @classmethod
    def from_stacked(cls, points, strict=True):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] % 2 != 0:
            raise ValueError("stacked point set must be (2n, 3)")
        half = pts.shape[0] // 2
        return cls(pts[:half], pts[half:], strict=strict)


def joint_points(chain, theta):
    """Skeleton points of a configuration: p_i = frame origin, q_i = p_i + z_i."""
    frames = forward_kinematics(chain, theta)
    p = np.array([f.translation for f in frames])
    q = p + np.array([f.rotation[:, 2] for f in frames])
    return PointSet(p, q)
