"""Locality focusing on a 4x4 patch grid: Omega, and what it does to one row of attention.

Run with ``python demos/02_locality_focusing.py``.
"""

import numpy as np

from riemannformer.attention import attention_scores, attenuation_matrix, inverse_softplus, lf_attention
from riemannformer.positional import Layout

layout = Layout.image(4, 4)
coords = layout.coords()

for sigma in (0.5, 1.0, 2.0, 8.0):
    omega = attenuation_matrix(coords, inverse_softplus(sigma)).data
    print(f"sigma {sigma:>4}: neighbour {omega[5, 6]:.4f}, diagonal neighbour {omega[5, 10]:.4f}, "
          f"far corner {omega[0, 15]:.2e}")

rng = np.random.default_rng(1)
q, k, v = rng.normal(size=(3, 16, 8))
scores = attention_scores(q, k).data
omega = attenuation_matrix(coords, inverse_softplus(1.0)).data

print("\nquery at (1, 1): softmax row, then the same row after attenuation")
print(np.round(scores[5].reshape(4, 4), 3))
print(np.round((scores * omega)[5].reshape(4, 4), 3))
print("row mass kept:", (scores * omega)[5].sum())

plain = lf_attention(scores, omega, v).data
renorm = lf_attention(scores, omega, v, renormalize=True).data
print("output norm, plain vs renormalized:", np.linalg.norm(plain[5]), np.linalg.norm(renorm[5]))
