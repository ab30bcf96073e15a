"""Independent reference implementations written as plain loops.

None of these call into the package, so agreement with them is evidence
rather than a tautology.
"""

import math

import numpy as np


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    z = sum(e)
    return [v / z for v in e]


def loop_scores(q, k):
    """softmax(q k^T / sqrt(d)) for 2-D q, k with explicit loops."""
    n, d = q.shape
    out = np.zeros((n, k.shape[0]))
    for i in range(n):
        logits = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        out[i] = softmax_row(logits)
    return out


def loop_attention(q, k, v):
    s = loop_scores(q, k)
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        for j in range(k.shape[0]):
            out[i] += s[i, j] * v[j]
    return out


def loop_lf(scores, omega, v, renormalize=False):
    n = scores.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        weights = [scores[i, j] * omega[i, j] for j in range(n)]
        if renormalize:
            z = sum(weights)
            weights = [w / z for w in weights]
        for j in range(n):
            out[i] += weights[j] * v[j]
    return out


def loop_omega(coords, sigma):
    """Scalar Gaussian of squared Euclidean distance; sigma may be per row."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d2 = sum((coords[i, c] - coords[j, c]) ** 2 for c in range(coords.shape[1]))
            out[i, j] = math.exp(-d2 / (2 * sig[i] ** 2))
    return out


def rope_vector(x, m, freqs):
    """Conventional rotary embedding of one vector: pair j rotated by +m*freq_j."""
    out = np.empty_like(x)
    for j, f in enumerate(freqs):
        c, s = math.cos(m * f), math.sin(m * f)
        a, b = x[2 * j], x[2 * j + 1]
        out[2 * j] = c * a - s * b
        out[2 * j + 1] = s * a + c * b
    return out


def rope_score_matrix(q, k, positions, freqs):
    rq = [rope_vector(q[i], positions[i], freqs) for i in range(len(q))]
    rk = [rope_vector(k[i], positions[i], freqs) for i in range(len(k))]
    return np.array([[float(a @ b) for b in rk] for a in rq])
