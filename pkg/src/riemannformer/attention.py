"""Multi-head self-attention with pluggable positions and locality focusing (LF).

LF multiplies the post-softmax score matrix elementwise by a Gaussian of the
grid distance between tokens, Omega[m, n] = exp(-|p_m - p_n|_A^2 / (2 sigma_m^2)),
and aggregates values with (S * Omega) V.  Rows are not renormalized unless
asked to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .positional import HeadPositional, Layout, MechanismConfig
from .tensor import Parameter, Tensor, as_tensor

A_EPS = 1e-6
SIGMA_INIT = 2.0


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"attention: incompatible shapes q{q.shape} k{k.shape} v{v.shape}")
    return attention_scores(q, k) @ v


def attention_scores(q, k) -> Tensor:
    q, k = as_tensor(q), as_tensor(k)
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.softmax_lastdim(T.scale(q @ kt, 1.0 / math.sqrt(q.shape[-1])))


def lf_attention(scores, omega, v, renormalize=False) -> Tensor:
    """(S * Omega) V, optionally dividing each row of S * Omega by its sum first."""
    scores, omega, v = as_tensor(scores), as_tensor(omega), as_tensor(v)
    if scores.shape[-1] != omega.shape[-1] or scores.shape[-2] != omega.shape[-2]:
        raise T.ShapeError(f"lf_attention: scores {scores.shape} vs omega {omega.shape}")
    if scores.shape[-1] != v.shape[-2]:
        raise T.ShapeError(f"lf_attention: scores {scores.shape} vs values {v.shape}")
    weights = scores * omega
    if renormalize:
        weights = weights / weights.sum(axis=-1, keepdims=True)
    return weights @ v


@dataclass
class AttenuationParams:
    """sigma_mode: 'shared' (one sigma per head) or 'per-position' (one per query).

    a_mode: 'identity' or 'learnable' (A = L L^T + eps I with L lower triangular).
    """

    sigma_mode: str = "shared"
    a_mode: str = "identity"
    sigma_init: float = SIGMA_INIT
    renormalize: bool = False

    def __post_init__(self):
        if self.sigma_mode not in ("shared", "per-position"):
            raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")
        if self.a_mode not in ("identity", "learnable"):
            raise ValueError(f"unknown A mode {self.a_mode!r}")

    def to_dict(self):
        return dict(self.__dict__)


def _tril_basis(k: int) -> np.ndarray:
    il = np.tril_indices(k)
    basis = np.zeros((len(il[0]), k * k))
    for n, (i, j) in enumerate(zip(*il)):
        basis[n, i * k + j] = 1.0
    return basis


def spd_from_factor(factor, k: int) -> Tensor:
    """A = L L^T + eps I from the packed lower triangle of L, shape (..., k(k+1)/2)."""
    factor = as_tensor(factor)
    flat = factor.reshape((-1, factor.shape[-1]))
    lower = (flat @ _tril_basis(k)).reshape(factor.shape[:-1] + (k, k))
    lt = T.transpose(lower, tuple(range(lower.ndim - 2)) + (lower.ndim - 1, lower.ndim - 2))
    return lower @ lt + A_EPS * np.eye(k)


def identity_factor(k: int) -> np.ndarray:
    il = np.tril_indices(k)
    return (il[0] == il[1]).astype(np.float64)


def attenuation_matrix(coords, sigma_raw, a_factor=None, per_position=False) -> Tensor:
    """Omega with entries exp(-(p_m - p_n)^T A (p_m - p_n) / (2 sigma_m^2)).

    ``coords`` is (L, k).  ``sigma_raw`` has shape (...,) for a shared sigma, or
    (..., L) with ``per_position`` set for one sigma per query row;
    sigma = softplus(sigma_raw).  ``a_factor`` is None for A = I, otherwise the
    packed lower-triangular factor of shape (..., k(k+1)/2).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[:, None]
    n, k = coords.shape
    diff = coords[:, None, :] - coords[None, :, :]
    if a_factor is None:
        dist2 = Tensor((diff * diff).sum(-1))
    else:
        a = spd_from_factor(a_factor, k)
        flat = diff.reshape(n * n, k)
        dist2 = ((flat @ a) * flat).sum(axis=-1)
        dist2 = dist2.reshape(dist2.shape[:-1] + (n, n))
    sigma = T.softplus(sigma_raw)
    if per_position:
        if sigma.shape[-1:] != (n,):
            raise T.ShapeError(f"per-position sigma needs {n} entries, got {sigma.shape}")
        sigma = sigma.reshape(sigma.shape + (1,))
    else:
        sigma = sigma.reshape(sigma.shape + (1, 1))
    return T.exp(-dist2 / (2.0 * sigma * sigma))


@dataclass
class AttentionConfig:
    heads: int
    d_model: int
    mechanism: MechanismConfig = field(default_factory=MechanismConfig)
    lf: AttenuationParams = None

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by {self.heads} heads")

    @property
    def d_k(self):
        return self.d_model // self.heads


class MultiHeadSelfAttention:
    """Projections, position mechanism, softmax, optional LF and output projection."""

    def __init__(self, config: AttentionConfig, layout: Layout, rng: np.random.Generator, prefix="attn"):
        self.config = config
        self.layout = layout
        d, h = config.d_model, config.heads
        self.prefix = prefix
        self.wq = Parameter(_trunc_normal(rng, (d, d)), f"{prefix}.wq")
        self.wk = Parameter(_trunc_normal(rng, (d, d)), f"{prefix}.wk")
        self.wv = Parameter(_trunc_normal(rng, (d, d)), f"{prefix}.wv")
        self.wo = Parameter(_trunc_normal(rng, (d, d)), f"{prefix}.wo")
        self.bq = Parameter(np.zeros(d), f"{prefix}.bq")
        self.bk = Parameter(np.zeros(d), f"{prefix}.bk")
        self.bv = Parameter(np.zeros(d), f"{prefix}.bv")
        self.bo = Parameter(np.zeros(d), f"{prefix}.bo")
        self._params = [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
        self.positional = HeadPositional(config.mechanism, h, config.d_k, layout)
        self._params += self.positional.make_params(prefix)
        self.sigma_raw = self.a_factor = None
        lf = config.lf
        if lf is not None:
            shape = (h,) if lf.sigma_mode == "shared" else (h, layout.length)
            self.sigma_raw = Parameter(np.full(shape, inverse_softplus(lf.sigma_init)), f"{prefix}.sigma")
            self._params.append(self.sigma_raw)
            if lf.a_mode == "learnable":
                k = layout.coords().shape[1]
                self.a_factor = Parameter(np.tile(identity_factor(k), (h, 1)), f"{prefix}.a_factor")
                self._params.append(self.a_factor)

    def parameters(self):
        return list(self._params)

    def omega(self) -> Tensor:
        lf = self.config.lf
        return attenuation_matrix(self.layout.coords(), self.sigma_raw, self.a_factor,
                                  per_position=lf.sigma_mode == "per-position")

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self.config.heads
        return T.transpose(x.reshape(b, n, h, self.config.d_k), (0, 2, 1, 3))

    def __call__(self, x, record=None) -> Tensor:
        """``x`` is (B, L, d_model); per-head matrices are appended to ``record`` if given."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[-1] != self.config.d_model or x.shape[1] != self.layout.length:
            raise T.ShapeError(f"attention input {x.shape} does not match "
                               f"(B, {self.layout.length}, {self.config.d_model})")
        q = self.positional(self._split(x @ self.wq + self.bq))
        k = self.positional(self._split(x @ self.wk + self.bk))
        v = self._split(x @ self.wv + self.bv)
        scores = attention_scores(q, k)
        if self.config.lf is not None:
            omega = self.omega()
            out = lf_attention(scores, omega, v, self.config.lf.renormalize)
        else:
            omega = None
            out = scores @ v
        if record is not None:
            entry = {"scores": scores.data, "omega": None if omega is None else omega.data}
            entry["product"] = scores.data if omega is None else scores.data * omega.data
            record.append(entry)
        b, _, n, _ = out.shape
        merged = T.transpose(out, (0, 2, 1, 3)).reshape(b, n, self.config.d_model)
        return merged @ self.wo + self.bo


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def write_matrix_csv(matrix, path):
    """Row-major CSV with 17 significant digits, so values round-trip exactly."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w") as fh:
        for row in matrix:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])


def write_matrix_pgm(matrix, path):
    """Binary 8-bit PGM, min-max normalized; a constant matrix maps to 0."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lo, hi = matrix.min(), matrix.max()
    span = hi - lo
    scaled = np.zeros_like(matrix) if span == 0 else (matrix - lo) / span
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
