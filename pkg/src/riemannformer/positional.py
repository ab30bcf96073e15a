"""Position mechanisms applied to queries and keys.

The production RiemannFormer path is the two-sided form: every query and key
is mapped back into the shared reference space with T_m^{-1} before an
ordinary dot product.  Rotation and reflection blocks act on channel pairs
(2j, 2j+1), so the map costs O(L*D) and never builds a D x D matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from . import tensor as T
from .tensor import Tensor, as_tensor

MECHANISMS = ("nopos", "sinusoidal", "rope", "riemann")


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got {dim}")
    pos = np.arange(length)[:, None]
    freq = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


@dataclass
class Layout:
    """Token coordinates: ``xs`` always, ``ys`` only for image grids."""

    xs: np.ndarray
    ys: np.ndarray = None
    grid: tuple = None

    @classmethod
    def sequence(cls, length: int):
        return cls(np.arange(length, dtype=np.float64), None, (1, length))

    @classmethod
    def image(cls, h: int, w: int):
        xs, ys = axial_positions_2d(h, w)
        return cls(xs, ys, (h, w))

    @property
    def length(self):
        return len(self.xs)

    @property
    def is_2d(self):
        return self.ys is not None

    def coords(self) -> np.ndarray:
        """(L, k) coordinates used for distances: (row, col) or (index,)."""
        if self.is_2d:
            return np.stack([self.ys, self.xs], axis=1)
        return self.xs[:, None].copy()

    def pair_positions(self, n_pairs: int) -> np.ndarray:
        """Position driving each channel pair: x for the first half, y for the rest in 2-D."""
        if not self.is_2d:
            return np.repeat(self.xs[:, None], n_pairs, axis=1)
        if n_pairs % 2:
            raise ValueError("axial layout needs an even number of channel pairs (D divisible by 4)")
        half = n_pairs // 2
        return np.concatenate([np.repeat(self.xs[:, None], half, axis=1),
                               np.repeat(self.ys[:, None], half, axis=1)], axis=1)


def axial_positions_2d(h: int, w: int):
    """Row-major token order: token r*W + c sits at x = c, y = r."""
    idx = np.arange(h * w)
    return (idx % w).astype(np.float64), (idx // w).astype(np.float64)


def _interleave(a: Tensor, b: Tensor) -> Tensor:
    out = T.stack([a, b], axis=-1)
    return out.reshape(out.shape[:-2] + (out.shape[-2] * 2,))


def align_pairs(x, pair_pos, theta, reflect=None, log_s=None, pair_exp=None) -> Tensor:
    """Apply T^{-1} block-wise to the last axis of ``x`` (shape (..., L, D)).

    ``pair_pos``/``pair_exp`` are (L, D/2) arrays of positions and scale
    exponents, ``theta`` has shape (..., D/2) (a leading head axis is allowed)
    and ``log_s`` holds ln s per head.  Rotation pairs get R(-m theta), reflection
    pairs R^(m theta); the whole row is scaled by s^(e(m)/2), formed in log space.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ValueError(f"alignment needs an even channel count, got {d}")
    n_pairs = d // 2
    pair_pos = np.asarray(pair_pos, dtype=np.float64)
    if pair_pos.shape != (x.shape[-2], n_pairs):
        raise ValueError(f"positions {pair_pos.shape} do not match input {x.shape}")
    theta = as_tensor(theta)
    th = theta.reshape(theta.shape[:-1] + (1, n_pairs))
    mult = np.ones(n_pairs) if reflect is None else np.where(reflect, 2.0, 1.0)
    flip = np.ones(n_pairs) if reflect is None else np.where(reflect, -1.0, 1.0)
    psi = th * (pair_pos * mult)
    c, s = T.cos(psi), T.sin(psi)
    xe, xo = x[..., 0::2], x[..., 1::2]
    oe = c * xe + s * xo
    oo = (c * xo - s * xe) * flip
    if log_s is not None:
        ls = as_tensor(log_s)
        ls = ls.reshape(ls.shape + (1, 1))
        factor = T.exp(ls * (0.5 * np.asarray(pair_exp, dtype=np.float64)))
        oe, oo = oe * factor, oo * factor
    return _interleave(oe, oo)


def rope_rotate(x, pair_pos, freqs) -> Tensor:
    """Conventional rotary embedding: pair j at position m is rotated by +m*freq_j."""
    x = as_tensor(x)
    ang = np.asarray(pair_pos, dtype=np.float64) * np.asarray(freqs, dtype=np.float64)
    cos, sin = np.cos(ang), np.sin(ang)
    xe, xo = x[..., 0::2], x[..., 1::2]
    return _interleave(xe * cos - xo * sin, xe * sin + xo * cos)


def matrix_exp(a) -> Tensor:
    """Differentiable exp of a batch of square matrices (..., D, D).

    The adjoint uses the block identity exp([[A^T, G], [0, A^T]])[:D, D:] for
    the Frechet derivative of exp at A in direction G.
    """
    a = as_tensor(a)
    d = a.shape[-1]
    flat = a.data.reshape(-1, d, d)
    out = np.stack([geometry.expm(m) for m in flat]).reshape(a.shape)

    def bw(g):
        gf = g.reshape(-1, d, d)
        res = np.empty_like(gf)
        for i, (m, gi) in enumerate(zip(flat, gf)):
            big = np.zeros((2 * d, 2 * d))
            big[:d, :d] = m.T
            big[d:, d:] = m.T
            big[:d, d:] = gi
            res[i] = geometry.expm(big)[:d, d:]
        return (res.reshape(a.shape),)
    return T._make(out, (a,), "matrix_exp", bw)


def _skew_basis(dim: int) -> np.ndarray:
    iu = np.triu_indices(dim, k=1)
    n = len(iu[0])
    basis = np.zeros((n, dim * dim))
    for k, (i, j) in enumerate(zip(*iu)):
        basis[k, i * dim + j] = 1.0
        basis[k, j * dim + i] = -1.0
    return basis


def align_dense(x, pos, upper, log_s=None, exps=None) -> Tensor:
    """T^{-1} for the dense generator: s^(e(m)/2) exp(-m X) applied to each row.

    ``upper`` holds the strict upper triangle of X, shape (..., D(D-1)/2);
    positions must be non-negative integers.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    upper = as_tensor(upper)
    pos = np.asarray(pos).astype(np.int64)
    gen = (upper @ _skew_basis(d)) if upper.ndim == 2 else (upper.reshape((1, -1)) @ _skew_basis(d))
    gen = gen.reshape(upper.shape[:-1] + (d, d))
    step = matrix_exp(-gen)
    powers = [Tensor(np.broadcast_to(np.eye(d), step.shape).copy())]
    for _ in range(int(pos.max()) if pos.size else 0):
        powers.append(powers[-1] @ step)
    stacked = T.stack(powers, axis=-3)
    per_token = stacked[..., pos, :, :]
    out = (per_token @ x.reshape(x.shape + (1,))).reshape(x.shape)
    if log_s is not None:
        ls = as_tensor(log_s)
        ls = ls.reshape(ls.shape + (1, 1))
        out = out * T.exp(ls * (0.5 * np.asarray(exps, dtype=np.float64)[:, None]))
    return out


def apply_tangent_alignment(q_or_k, positions, t: geometry.TangentTransform, side="query") -> Tensor:
    """Map rows of (L, D) ``q_or_k`` into the reference space with T_{p_m}^{-1}.

    Queries and keys receive the same map in the two-sided form, so ``side``
    only documents intent.
    """
    if side not in ("query", "key"):
        raise ValueError(f"side must be 'query' or 'key', got {side!r}")
    x = as_tensor(q_or_k)
    if x.shape[-1] != t.dim:
        raise ValueError(f"input has {x.shape[-1]} channels, transform has {t.dim}")
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) != x.shape[-2]:
        raise ValueError("need one position per row")
    metric = t.metric
    exps = metric.schedule.exponents(positions)
    n_pairs = t.dim // 2
    pair_pos = np.repeat(positions[:, None], n_pairs, axis=1)
    pair_exp = np.repeat(exps[:, None], n_pairs, axis=1)
    if t.kind == "dense":
        return align_dense(x, positions, t.x_upper, metric.log_s, exps)
    if t.kind == "general2d":
        # S^(e/2) R(m theta): rotate with negated angles, then per-channel scaling
        rotated = align_pairs(x, pair_pos, -metric.theta)
        ls = metric.log_s.reshape(-1)
        return rotated * np.exp(0.5 * np.repeat(exps[:, None], 2 * n_pairs, axis=1) * ls[None, :])
    return align_pairs(x, pair_pos, t.theta, t.pair_is_reflection(), metric.log_s, pair_exp)


def apply_axial_2d(q_or_k, grid, tx: geometry.TangentTransform, ty: geometry.TangentTransform) -> Tensor:
    """First D/2 channels follow the x-axis transform, last D/2 the y-axis one."""
    x = as_tensor(q_or_k)
    d = x.shape[-1]
    if d % 4:
        raise ValueError(f"axial alignment needs D divisible by 4, got {d}")
    h, w = grid
    xs, ys = axial_positions_2d(h, w)
    half = d // 2
    left = apply_tangent_alignment(x[..., :half], xs, tx)
    right = apply_tangent_alignment(x[..., half:], ys, ty)
    return T.concatenate([left, right], axis=-1)


@dataclass
class MechanismConfig:
    """Which position mechanism attention heads use, and how it is parameterized."""

    kind: str = "riemann"
    transform: str = "rotation"
    scale_mode: str = "bounded"
    alpha: float = geometry.ALPHA_DEFAULT
    schedule: str = "linear"
    beta: float = 2.0
    learn_theta: bool = True
    theta_base: float = 10000.0
    w_init: float = 0.0
    fixed_scale: bool = False

    def __post_init__(self):
        if self.kind not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.kind!r}; expected one of {MECHANISMS}")
        if self.transform not in ("rotation", "reflection", "mixed", "dense"):
            raise ValueError(f"unknown transform {self.transform!r}")

    @classmethod
    def from_name(cls, name: str, **kw):
        """Parse CLI names: nopos, sinusoidal, rope, riemann, riemann-reflection, ..."""
        if name.startswith("riemann"):
            _, _, variant = name.partition("-")
            return cls(kind="riemann", transform=variant or "rotation", **kw)
        return cls(kind=name, **kw)

    @property
    def name(self):
        if self.kind == "riemann" and self.transform != "rotation":
            return f"riemann-{self.transform}"
        return self.kind

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class HeadPositional:
    """Per-attention-module position state for ``heads`` heads of width ``d_k``."""

    config: MechanismConfig
    heads: int
    d_k: int
    layout: Layout
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        if cfg.kind in ("rope", "riemann") and self.d_k % 2:
            raise ValueError("rotary mechanisms need an even head width")
        if self.layout.is_2d and cfg.kind in ("rope", "riemann") and self.d_k % 4:
            raise ValueError("axial 2-D alignment needs a head width divisible by 4")
        if cfg.kind == "riemann" and cfg.transform == "mixed":
            width = self.d_k // 2 if self.layout.is_2d else self.d_k
            if width % 4:
                raise ValueError("mixed 4x4 blocks need each axis width divisible by 4")
        self._schedule = geometry.ScaleSchedule(cfg.schedule, cfg.beta)

    @property
    def n_pairs(self):
        return self.d_k // 2

    def axis_width(self):
        return self.d_k // 2 if self.layout.is_2d else self.d_k

    def initial_theta(self) -> np.ndarray:
        per_axis = geometry.default_angles(self.axis_width(), self.config.theta_base)
        reps = 2 if self.layout.is_2d else 1
        return np.tile(per_axis, reps)

    def reflect_mask(self) -> np.ndarray:
        if self.config.transform == "reflection":
            return np.ones(self.n_pairs, dtype=bool)
        if self.config.transform == "mixed":
            per_axis = self.axis_width() // 2
            return (np.arange(self.n_pairs) % per_axis) % 2 == 1
        return np.zeros(self.n_pairs, dtype=bool)

    def make_params(self, prefix: str):
        """Create learnable angles, generators and scale weights; returns the new Parameters."""
        from .tensor import Parameter
        cfg = self.config
        new = []
        if cfg.kind != "riemann":
            return new
        if cfg.transform == "dense":
            width = self.axis_width()
            n = width * (width - 1) // 2
            axes = ("x", "y") if self.layout.is_2d else ("x",)
            for ax in axes:
                p = Parameter(np.zeros((self.heads, n)), f"{prefix}.gen_{ax}")
                self.params[f"gen_{ax}"] = p
                new.append(p)
        else:
            th = np.tile(self.initial_theta(), (self.heads, 1))
            if cfg.learn_theta:
                p = Parameter(th, f"{prefix}.theta")
                self.params["theta"] = p
                new.append(p)
            else:
                self.params["theta"] = th
        if not cfg.fixed_scale:
            p = Parameter(np.full(self.heads, cfg.w_init), f"{prefix}.w")
            self.params["w"] = p
            new.append(p)
        return new

    def log_scale(self):
        cfg = self.config
        if cfg.fixed_scale:
            return None
        w = self.params["w"]
        if cfg.scale_mode == "free":
            return w
        if cfg.scale_mode != "bounded":
            raise ValueError(f"unknown scale mode {cfg.scale_mode!r}")
        # ln(e^w / (e^w + alpha)) = -softplus(ln(alpha) - w)
        return -T.softplus(np.log(cfg.alpha) - w)

    def __call__(self, x: Tensor) -> Tensor:
        """Align a (..., heads, L, d_k) query or key tensor."""
        cfg = self.config
        if cfg.kind in ("nopos", "sinusoidal"):
            return x
        pair_pos = self.layout.pair_positions(self.n_pairs)
        if cfg.kind == "rope":
            return rope_rotate(x, pair_pos, self.initial_theta())
        log_s = self.log_scale()
        if cfg.transform == "dense":
            return self._dense(x, log_s)
        pair_exp = self._schedule.exponents(pair_pos)
        return align_pairs(x, pair_pos, self.params["theta"], self.reflect_mask(), log_s, pair_exp)

    def _dense(self, x, log_s):
        if not self.layout.is_2d:
            exps = self._schedule.exponents(self.layout.xs)
            return align_dense(x, self.layout.xs, self.params["gen_x"], log_s, exps)
        half = self.d_k // 2
        parts = []
        for sl, ax, pos in ((slice(None, half), "x", self.layout.xs), (slice(half, None), "y", self.layout.ys)):
            parts.append(align_dense(x[..., sl], pos, self.params[f"gen_{ax}"], log_s,
                                     self._schedule.exponents(pos)))
        return T.concatenate(parts, axis=-1)
