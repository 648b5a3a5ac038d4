"""Rasterization-free silhouette rendering and mask I/O.

A silhouette is a boolean (height, width) array. Rendering samples points on
the link surfaces, transforms them through forward kinematics and the camera
pose, projects with a pinhole model, and splats a small disc per sample.
Everything is deterministic given the settings, and sampling is prefix-stable:
the first s samples drawn for a mesh do not depend on the total sample count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .kinematics import forward_kinematics

NEAR_PLANE = 1e-6


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh, or a bare point cloud when triangles is None."""

    vertices: np.ndarray
    triangles: np.ndarray | None = None

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if verts.shape[0] == 0:
            raise ValueError("mesh has no vertices")
        if not np.all(np.isfinite(verts)):
            raise ValueError("mesh vertices must be finite")
        verts.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        if self.triangles is not None:
            tris = np.array(self.triangles, dtype=int).reshape(-1, 3)
            if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
                raise ValueError("triangle indices out of range")
            tris.flags.writeable = False
            object.__setattr__(self, "triangles", tris)


def load_obj(path):
    """Minimal OBJ reader: v records and fan-triangulated f records."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif tag == "f":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: face record needs 3 vertices")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    value = int(head)
                    if value < 0:
                        raise ValueError(f"{path}:{lineno}: negative face indices unsupported")
                    idx.append(value - 1)
                for b, c in zip(idx[1:-1], idx[2:]):
                    faces.append([idx[0], b, c])
            # other record types (vn, vt, o, usemtl, ...) are ignored
    return Mesh(np.array(verts), np.array(faces) if faces else None)


def save_obj(mesh, path):
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    if mesh.triangles is not None:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_pointcloud_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return Mesh(np.asarray(obj["vertices"], dtype=float))


@dataclass(frozen=True)
class RenderSettings:
    """Sampling density, splat size in pixels, and the sampling seed."""

    samples_per_link: int = 600
    splat_radius: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_link < 1:
            raise ValueError("samples_per_link must be at least 1")
        if self.splat_radius < 0:
            raise ValueError("splat_radius must be nonnegative")


def pose_mesh(chain, theta, meshes):
    """Transform per-link meshes into the chain base frame; returns (N, 3).

    meshes has dof+1 entries: the base link mesh first, then one mesh per
    joint frame. Entries may be None for links without geometry.
    """
    if len(meshes) != chain.dof + 1:
        raise ValueError(f"expected {chain.dof + 1} link meshes, got {len(meshes)}")
    frames = [chain.base_frame] + forward_kinematics(chain, theta)
    clouds = []
    for frame, mesh in zip(frames, meshes):
        if mesh is None:
            continue
        clouds.append(frame.apply(mesh.vertices))
    if not clouds:
        raise ValueError("no link has geometry")
    return np.vstack(clouds)


def sample_surface(mesh, count, seed):
    """Draw `count` surface points, area-weighted over triangles.

    Point-cloud meshes (or zero-area triangle sets) fall back to cycling
    through a seed-fixed vertex permutation. The draw for sample i depends
    only on (seed, i), so prefixes agree across different counts.
    """
    if count < 1:
        raise ValueError("sample count must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    verts = mesh.vertices
    if mesh.triangles is not None and mesh.triangles.size:
        tri = verts[mesh.triangles]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )
        total = float(areas.sum())
        if total > 0.0:
            draws = rng.random((count, 3))
            cum = np.cumsum(areas)
            idx = np.minimum(
                np.searchsorted(cum, draws[:, 0] * total, side="right"), len(areas) - 1
            )
            sq = np.sqrt(draws[:, 1])
            w0 = 1.0 - sq
            w1 = sq * (1.0 - draws[:, 2])
            w2 = sq * draws[:, 2]
            chosen = tri[idx]
            return (
                w0[:, None] * chosen[:, 0]
                + w1[:, None] * chosen[:, 1]
                + w2[:, None] * chosen[:, 2]
            )
    perm = rng.permutation(verts.shape[0])
    return verts[perm[np.arange(count) % verts.shape[0]]]


def _splat_offsets(radius):
    span = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(span, span)
    keep = dx * dx + dy * dy <= radius * radius
    return dx[keep], dy[keep]


def render_silhouette(points, pose, k, settings):
    """Project base-frame points through pose and splat into a boolean mask.

    Points behind the near plane (camera z <= 1e-6) are dropped. Pixel centers
    round half-up; each surviving sample sets a disc of settings.splat_radius
    pixels, clipped to the image.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    bits = np.zeros((k.height, k.width), dtype=bool)
    cam = pose.apply(pts)
    front = cam[:, 2] > NEAR_PLANE
    cam = cam[front]
    if cam.shape[0] == 0:
        return bits
    u = k.fx * cam[:, 0] / cam[:, 2] + k.cx
    v = k.fy * cam[:, 1] / cam[:, 2] + k.cy
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    r = settings.splat_radius
    near = (ui >= -r) & (ui < k.width + r) & (vi >= -r) & (vi < k.height + r)
    ui, vi = ui[near], vi[near]
    for dx, dy in zip(*_splat_offsets(r)):
        xs = ui + dx
        ys = vi + dy
        ok = (xs >= 0) & (xs < k.width) & (ys >= 0) & (ys < k.height)
        bits[ys[ok], xs[ok]] = True
    return bits


def render_chain_silhouette(chain, theta, meshes, pose, k, settings):
    """Sample, pose, and render the whole chain in one call."""
    clouds = sample_link_clouds(meshes, settings)
    frames = [chain.base_frame] + forward_kinematics(chain, theta)
    return render_link_clouds(clouds, frames, pose, k, settings)


def sample_link_clouds(meshes, settings):
    """Per-link local-frame surface samples (None entries pass through)."""
    clouds = []
    for li, mesh in enumerate(meshes):
        if mesh is None:
            clouds.append(None)
            continue
        seed = int(np.random.SeedSequence((settings.seed, li)).generate_state(1)[0])
        clouds.append(sample_surface(mesh, settings.samples_per_link, seed))
    return clouds


def render_link_clouds(clouds, frames, pose, k, settings):
    """Render presampled local clouds given their world frames."""
    if len(clouds) != len(frames):
        raise ValueError("need one frame per link cloud")
    world = [frame.apply(cloud) for frame, cloud in zip(frames, clouds) if cloud is not None]
    if not world:
        raise ValueError("no link has geometry")
    return render_silhouette(np.vstack(world), pose, k, settings)


def bresenham_line(p0, p1):
    """Integer pixel run from p0 to p1 inclusive, as an (n, 2) array of (x, y)."""
    x0, y0 = int(p0[0]), int(p0[1])
    x1, y1 = int(p1[0]), int(p1[1])
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    pts = []
    while True:
        pts.append((x0, y0))
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return np.array(pts, dtype=np.int64)


def draw_segment(image, p0, p1, value=255):
    """Rasterize one segment into a 2-D array, clipping to the bounds."""
    pts = bresenham_line(p0, p1)
    h, w = image.shape
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    image[pts[ok, 1], pts[ok, 0]] = value
    return image


def silhouette_iou(a, b):
    """Intersection over union of two equal-shape masks; empty vs empty is 1."""
    ma = np.asarray(a, dtype=bool)
    mb = np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise ValueError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    union = int(np.logical_or(ma, mb).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum()) / union


# ---------------------------------------------------------------------------
# mask files


def write_pgm(path, image):
    """Write a binary (P5, maxval 255) PGM. Boolean masks map to {0, 255}."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr = np.where(arr, 255, 0).astype(np.uint8)
    else:
        arr = arr.astype(np.uint8)
    if arr.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + arr.tobytes())


def read_pgm(path):
    """Read a binary PGM into a uint8 (height, width) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos : pos + width * height]
    if len(raw) != width * height:
        raise ValueError(f"{path}: pixel payload truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width)


def segment_reference(image, k=None):
    """Binarize an observed mask: values at or above 128 are foreground.

    image is a path or a 2-D array. When intrinsics are given the mask
    dimensions must match them.
    """
    arr = read_pgm(image) if isinstance(image, (str, bytes)) or hasattr(image, "__fspath__") else np.asarray(image)
    if arr.ndim != 2:
        raise ValueError("reference mask must be 2-D")
    if k is not None and arr.shape != (k.height, k.width):
        raise ValueError(f"mask is {arr.shape}, camera expects {(k.height, k.width)}")
    return arr >= 128


# ---------------------------------------------------------------------------
# built-in link geometry


def _box_between(start, end, half_width):
    """Rectangular prism around the segment from start to end, 12 triangles."""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    axis = end - start
    length = np.linalg.norm(axis)
    if length < 1e-9:
        return _cube_at(end, half_width * 1.5)
    axis = axis / length
    pick = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    b1 = np.cross(axis, pick)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    corners = []
    for anchor in (start, end):
        for s1 in (-1.0, 1.0):
            for s2 in (-1.0, 1.0):
                corners.append(anchor + half_width * (s1 * b1 + s2 * b2))
    tris = [
        (0, 1, 3), (0, 3, 2),
        (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1),
        (1, 5, 7), (1, 7, 3),
        (3, 7, 6), (3, 6, 2),
        (2, 6, 4), (2, 4, 0),
    ]
    return Mesh(np.array(corners), np.array(tris))


def _cube_at(center, half_width):
    center = np.asarray(center, dtype=float)
    return _box_between(center - [0, 0, half_width * 0.999], center + [0, 0, half_width * 0.999], half_width)


def default_link_meshes(chain, half_width=0.035):
    """Simple box geometry for each link, in that link's own frame.

    Link i spans from the previous frame origin, which sits at the constant
    point -(a, d sin(alpha), d cos(alpha)) in frame i, to frame i's origin.
    The base link is a small cube at the base origin.
    """
    meshes = [_cube_at(np.zeros(3), half_width * 1.4)]
    for joint in chain.joints:
        proximal = -np.array(
            [joint.a, joint.d * math.sin(joint.alpha), joint.d * math.cos(joint.alpha)]
        )
        meshes.append(_box_between(proximal, np.zeros(3), half_width))
    return meshes
