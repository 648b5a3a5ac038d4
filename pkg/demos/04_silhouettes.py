# Rendering binary silhouettes by surface splatting.
#
# Each link mesh is sampled uniformly by triangle area, the samples are
# transformed by FK and the camera pose, and every projected point marks a
# small pixel disc. The result is a deterministic binary mask, compared
# against other masks with intersection-over-union.

import os
import tempfile

import numpy as np

from armpose import (
    RenderSettings,
    SamplerConfig,
    builtin_chain,
    default_link_meshes,
    look_at,
    render_chain_silhouette,
    sample_surface,
    silhouette_iou,
    skeleton_keypoints,
    write_pgm,
)

chain = builtin_chain("panda7")
meshes = default_link_meshes(chain)
k = SamplerConfig().intrinsics()
settings = RenderSettings(samples_per_link=600, splat_radius=2, seed=0)

total = sum(len(m.vertices) for m in meshes)
print(f"{len(meshes)} link meshes, {total} vertices in total")

pts = sample_surface(meshes[2], 5, seed=1)
print("five surface samples of link 2:")
for p in pts:
    print(f"  ({p[0]:+.3f}, {p[1]:+.3f}, {p[2]:+.3f})")

theta = np.zeros(chain.dof)
pose = look_at(np.array([2.0, 1.2, 0.8]), skeleton_keypoints(chain, theta).mean(axis=0))
mask = render_chain_silhouette(chain, theta, meshes, pose, k, settings)
print(f"\nrendered {mask.shape[1]}x{mask.shape[0]} mask, {int(mask.sum())} pixels on")

again = render_chain_silhouette(chain, theta, meshes, pose, k, settings)
print(f"repeat render identical: {bool(np.array_equal(mask, again))}")

# IoU falls off as the configuration moves away
print("\nIoU against renders of perturbed configurations:")
for step in [0.0, 0.05, 0.1, 0.2, 0.4]:
    other = theta + step
    shifted = render_chain_silhouette(chain, other, meshes, pose, k, settings)
    print(f"  all joints +{step:.2f} rad: IoU {silhouette_iou(mask, shifted):.3f}")

out = os.path.join(tempfile.mkdtemp(prefix="armpose_demo_"), "silhouette.pgm")
write_pgm(out, mask.astype(np.uint8) * 255)
print(f"\nwrote {out}")
