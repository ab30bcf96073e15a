"""A short walk through the geometric objects behind the attention layer.

Run with ``python demos/01_geometry_tour.py``.
"""

import numpy as np

from riemannformer import geometry as G
from riemannformer.positional import apply_tangent_alignment

rng = np.random.default_rng(0)
D = 8

# A scalar metric M_m = s^m I with a bounded scale base, and the rotation
# transform T_m that is compatible with it.
metric = G.Metric("scalar", D, w=1.5, mode="bounded")
t = G.TangentTransform("rotation", metric, theta=G.default_angles(D))
print(f"scale base s = {float(metric.s):.6f}")

# Parallel transport keeps the metric norm of a vector.
v = rng.normal(size=D)
moved = G.parallel_transport(t, 2, 9, v)
print("norm at position 2:", G.metric_inner(metric, 2, v, v))
print("norm at position 9:", G.metric_inner(metric, 9, moved, moved))

# Compatibility: T_m^T M_m T_m is the same matrix for every m.
print("compatibility residual:", G.compatibility_residual(metric, t, 0, 17))

# Two reflections make a rotation by twice the angle difference.
a, b = 0.3, 1.1
print("R^(a) R^(b) - R(2(a-b)):",
      np.abs(G.reflection_block(a) @ G.reflection_block(b) - G.rotation_block(2 * (a - b))).max())

# Aligning queries and keys into the reference space gives logits that only
# depend on the offset when s = 1.
flat = G.TangentTransform("rotation", G.Metric("scalar", D, w=0.0, mode="free"), theta=G.default_angles(D))
q, k = rng.normal(size=(2, 6, D))
pos = np.arange(6)
scores = apply_tangent_alignment(q, pos, flat).data @ apply_tangent_alignment(k, pos, flat).data.T
shifted = apply_tangent_alignment(q, pos + 40, flat).data @ apply_tangent_alignment(k, pos + 40, flat).data.T
print("shift invariance gap at s = 1:", np.abs(scores - shifted).max())

# With s != 1 a shift by c rescales every logit by s^c.
aligned = apply_tangent_alignment(q, pos, t).data @ apply_tangent_alignment(k, pos, t).data.T
moved = apply_tangent_alignment(q, pos + 3, t).data @ apply_tangent_alignment(k, pos + 3, t).data.T
print("ratio after a shift of 3:", (moved / aligned).mean(), "vs s^3 =", float(metric.s) ** 3)
