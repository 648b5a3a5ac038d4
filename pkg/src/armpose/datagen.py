"""Synthetic scene generation: configurations, cameras, keypoints, masks.

A dataset directory holds chain.json, camera.json, scenes.jsonl (one JSON
object per line, fixed key order) and silhouettes/scene_%05d.pgm. Every
random draw is keyed by (dataset seed, scene index, purpose), so scenes are
reproducible individually and independent of generation order.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_text
from .kinematics import RigidTransform, forward_kinematics, load_chain
from .poseinit import CameraIntrinsics, Keypoints2D
from .silhouette import (
    RenderSettings,
    default_link_meshes,
    read_pgm,
    render_chain_silhouette,
    write_pgm,
)

MAX_SCENE_ATTEMPTS = 50
MIN_VISIBLE = 4


class SceneGenerationError(RuntimeError):
    """Raised when a scene (or a whole dataset) cannot be sampled."""


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not parse."""


@dataclass(frozen=True)
class SamplerConfig:
    """Camera and noise distribution for synthetic scenes.

    Distances are in chain units, angles in radians. The camera sits on a
    sphere around the skeleton bounding-box center and looks at it with the
    world z axis up. noise_std is the per-axis pixel noise on keypoints.
    """

    distance: tuple = (1.8, 3.0)
    elevation: tuple = (0.05, 0.45)
    azimuth: tuple = (-math.pi, math.pi)
    image_width: int = 224
    image_height: int = 224
    focal: float = 260.0
    noise_std: float = math.sqrt(30.0)

    def __post_init__(self):
        for name in ("distance", "elevation", "azimuth"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name} range is inverted")
        if self.distance[0] <= 0:
            raise ValueError("camera distance must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def intrinsics(self):
        return CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=self.image_width / 2.0,
            cy=self.image_height / 2.0,
            width=self.image_width,
            height=self.image_height,
        )

    def to_json(self):
        return {
            "distance": list(self.distance),
            "elevation": list(self.elevation),
            "azimuth": list(self.azimuth),
            "image_width": self.image_width,
            "image_height": self.image_height,
            "focal": self.focal,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            distance=tuple(obj["distance"]),
            elevation=tuple(obj["elevation"]),
            azimuth=tuple(obj["azimuth"]),
            image_width=int(obj["image_width"]),
            image_height=int(obj["image_height"]),
            focal=float(obj["focal"]),
            noise_std=float(obj["noise_std"]),
        )


@dataclass(frozen=True)
class Scene:
    """One synthetic observation with its ground truth."""

    index: int
    theta: np.ndarray
    pose: RigidTransform
    keypoints: Keypoints2D
    keypoints_true: Keypoints2D
    silhouette: str

    def to_json(self):
        return {
            "index": self.index,
            "theta": np.asarray(self.theta).tolist(),
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "keypoints": self.keypoints.to_json(),
            "keypoints_true": self.keypoints_true.to_json(),
            "silhouette": self.silhouette,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            index=int(obj["index"]),
            theta=np.asarray(obj["theta"], dtype=float),
            pose=RigidTransform(
                np.asarray(obj["rotation"], dtype=float),
                np.asarray(obj["translation"], dtype=float),
            ),
            keypoints=Keypoints2D.from_json(obj["keypoints"]),
            keypoints_true=Keypoints2D.from_json(obj["keypoints_true"]),
            silhouette=str(obj["silhouette"]),
        )


def look_at(camera_pos, target, up=(0.0, 0.0, 1.0)):
    """Camera-from-world transform for a camera at camera_pos facing target."""
    camera_pos = np.asarray(camera_pos, dtype=float)
    target = np.asarray(target, dtype=float)
    z = target - camera_pos
    dist = np.linalg.norm(z)
    if dist < 1e-9:
        raise ValueError("camera sits on its target")
    z = z / dist
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    rot = np.vstack([x, y, z])
    return RigidTransform(rot, -rot @ camera_pos)


def skeleton_keypoints(chain, theta):
    """Base origin followed by each joint-frame origin, (dof + 1, 3)."""
    frames = forward_kinematics(chain, theta)
    return np.vstack([chain.base_frame.translation] + [f.translation for f in frames])


def project_keypoints(points, pose, k):
    """Project base-frame points to pixels with a visibility flag per point.

    A point is visible when it lands in front of the camera and inside the
    image rectangle.
    """
    cam = pose.apply(points)
    z = cam[:, 2]
    safe = np.where(z > 1e-6, z, 1.0)
    u = k.fx * cam[:, 0] / safe + k.cx
    v = k.fy * cam[:, 1] / safe + k.cy
    visible = (
        (z > 1e-6)
        & (u >= 0.0)
        & (u <= k.width - 1.0)
        & (v >= 0.0)
        & (v <= k.height - 1.0)
    )
    return Keypoints2D(np.column_stack([u, v]), visible)


def perturb_keypoints(keypoints, noise_std, seed):
    """Add i.i.d. Gaussian pixel noise; visibility flags are preserved."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    noise = rng.normal(0.0, noise_std, size=keypoints.uv.shape) if noise_std > 0 else 0.0
    return Keypoints2D(keypoints.uv + noise, keypoints.visible)


def sample_scene(chain, cfg, seed, index):
    """Draw one scene: configuration, camera, and true pixel keypoints.

    Retries with a fresh sub-seed until the base keypoint, its neighbor, and
    at least four keypoints overall are visible; gives up after 50 attempts.
    Returns (theta, pose, true keypoints).
    """
    k = cfg.intrinsics()
    lo, hi = chain.limits()
    for attempt in range(MAX_SCENE_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index, 0, attempt)))
        theta = rng.uniform(lo, hi)
        dist = rng.uniform(*cfg.distance)
        el = rng.uniform(*cfg.elevation)
        az = rng.uniform(*cfg.azimuth)
        points = skeleton_keypoints(chain, theta)
        target = 0.5 * (points.min(axis=0) + points.max(axis=0))
        camera_pos = target + dist * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        pose = look_at(camera_pos, target)
        keypoints = project_keypoints(points, pose, k)
        if keypoints.visible[0] and keypoints.visible[1] and keypoints.visible.sum() >= MIN_VISIBLE:
            return theta, pose, keypoints
    raise SceneGenerationError(
        f"scene {index}: no valid view in {MAX_SCENE_ATTEMPTS} attempts"
    )


def build_scene(chain, cfg, seed, index, meshes, render_settings):
    """Sample a scene and render its silhouette. Returns (Scene, mask)."""
    theta, pose, keypoints_true = sample_scene(chain, cfg, seed, index)
    noisy = perturb_keypoints(keypoints_true, cfg.noise_std, (seed, index, 1))
    render_seed = int(np.random.SeedSequence((seed, index, 2)).generate_state(1)[0])
    settings = RenderSettings(
        samples_per_link=render_settings.samples_per_link,
        splat_radius=render_settings.splat_radius,
        seed=render_seed,
    )
    mask = render_chain_silhouette(chain, theta, meshes, pose, cfg.intrinsics(), settings)
    scene = Scene(
        index=index,
        theta=theta,
        pose=pose,
        keypoints=noisy,
        keypoints_true=keypoints_true,
        silhouette=f"silhouettes/scene_{index:05d}.pgm",
    )
    return scene, mask


def generate_dataset(chain, cfg, count, seed, meshes=None, render_settings=None):
    """Build `count` scenes in memory. Scenes that fail to sample are skipped
    with a warning; an empty result raises."""
    if count < 1:
        raise ValueError("need at least one scene")
    meshes = meshes if meshes is not None else default_link_meshes(chain)
    render_settings = render_settings or RenderSettings()
    scenes = []
    masks = []
    for index in range(count):
        try:
            scene, mask = build_scene(chain, cfg, seed, index, meshes, render_settings)
        except SceneGenerationError as exc:
            warnings.warn(str(exc))
            continue
        scenes.append(scene)
        masks.append(mask)
    if not scenes:
        raise SceneGenerationError("every scene failed to sample")
    return scenes, masks


def write_dataset(out_dir, chain, cfg, scenes, masks):
    """Write chain.json, camera.json, sampler.json, scenes.jsonl and masks."""
    sil_dir = os.path.join(out_dir, "silhouettes")
    os.makedirs(sil_dir, exist_ok=True)
    chain.save(os.path.join(out_dir, "chain.json"))
    atomic_write_text(
        os.path.join(out_dir, "camera.json"),
        json.dumps(cfg.intrinsics().to_json(), indent=2) + "\n",
    )
    atomic_write_text(
        os.path.join(out_dir, "sampler.json"), json.dumps(cfg.to_json(), indent=2) + "\n"
    )
    for scene, mask in zip(scenes, masks):
        write_pgm(os.path.join(out_dir, scene.silhouette), mask)
    lines = "".join(json.dumps(scene.to_json()) + "\n" for scene in scenes)
    atomic_write_text(os.path.join(out_dir, "scenes.jsonl"), lines)


def read_dataset(in_dir):
    """Load a dataset directory. Returns (chain, intrinsics, sampler, scenes)."""
    chain = load_chain(os.path.join(in_dir, "chain.json"))
    with open(os.path.join(in_dir, "camera.json"), "r", encoding="utf-8") as fh:
        k = CameraIntrinsics.from_json(json.load(fh))
    with open(os.path.join(in_dir, "sampler.json"), "r", encoding="utf-8") as fh:
        cfg = SamplerConfig.from_json(json.load(fh))
    scenes = []
    path = os.path.join(in_dir, "scenes.jsonl")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(Scene.from_json(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: bad scene record: {exc}") from exc
    if not scenes:
        raise DatasetFormatError(f"{path}: no scenes")
    return chain, k, cfg, scenes


def load_scene_mask(in_dir, scene):
    """Read a scene's silhouette as a boolean mask."""
    return read_pgm(os.path.join(in_dir, scene.silhouette)) >= 128
