# Forward kinematics of the built-in 7-DoF arm.
#
# The chain is a list of DH rows; a configuration is one angle per joint.
# forward_kinematics returns the base-frame pose of every joint, and
# skeleton_keypoints stacks the base with the joint origins, which is the
# point set every other stage of the pipeline works on.

import numpy as np

from armpose import builtin_chain, forward_kinematics, skeleton_keypoints

chain = builtin_chain("panda7")
print(f"chain {chain.name!r}: {chain.dof} joints")
lo, hi = chain.limits()
for j, (a, b) in enumerate(zip(lo, hi)):
    print(f"  joint {j}: limits [{a:+.3f}, {b:+.3f}] rad")

# the zero configuration stands the arm straight up
theta = np.zeros(chain.dof)
frames = forward_kinematics(chain, theta)
print("\njoint origins at the zero configuration:")
for j, frame in enumerate(frames):
    x, y, z = frame.translation
    print(f"  joint {j}: ({x:+.3f}, {y:+.3f}, {z:+.3f})")

# bending a single joint moves every origin after it and none before it
bent = theta.copy()
bent[3] = 1.2
moved = forward_kinematics(chain, bent)
print("\ndisplacement of each origin after bending joint 3 by 1.2 rad:")
for j, (a, b) in enumerate(zip(frames, moved)):
    print(f"  joint {j}: {np.linalg.norm(a.translation - b.translation):.4f} m")

pts = skeleton_keypoints(chain, bent)
reach = np.linalg.norm(pts[-1] - pts[0])
print(f"\nskeleton has {len(pts)} points; base-to-tip distance {reach:.3f} m")
