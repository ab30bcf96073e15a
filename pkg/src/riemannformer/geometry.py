"""Metrics, tangent transforms and parallel transport between token positions.

Everything here is plain numpy and exists to state the geometric objects
exactly; the differentiable versions used inside the network live in
:mod:`riemannformer.positional`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_DEFAULT = 0.1

METRIC_KINDS = ("scalar", "diagonal", "general2d")
TRANSFORM_KINDS = ("rotation", "reflection", "mixed", "dense", "general2d")


def rotation_block(theta: float) -> np.ndarray:
    """Counterclockwise rotation of the plane by ``theta``."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def reflection_block(theta: float) -> np.ndarray:
    """Mirror about the line through the origin with direction (cos theta, sin theta)."""
    c, s = math.cos(2 * theta), math.sin(2 * theta)
    return np.array([[c, s], [s, -c]])


def block_diag(blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a Taylor series.

    The matrix is halved until its 1-norm is below 0.5, the series is summed
    until terms stop contributing, and the result is squared back.
    """
    a = np.asarray(a, dtype=np.float64)
    norm = np.abs(a).sum(axis=0).max() if a.size else 0.0
    squarings = 0
    if norm > 0.5:
        squarings = int(math.ceil(math.log2(norm / 0.5)))
    a = a / (2.0 ** squarings)
    result = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    for k in range(1, 40):
        term = term @ a / k
        result = result + term
        if np.abs(term).max() <= 1e-17 * max(1.0, np.abs(result).max()):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def skew_exp(x: np.ndarray) -> np.ndarray:
    """exp of a skew-symmetric matrix; the result is orthogonal."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"skew_exp expects a square matrix, got {x.shape}")
    if x.shape[0] > 64:
        raise ValueError("skew_exp supports D <= 64")
    if not np.allclose(x, -x.T, atol=1e-12):
        raise ValueError("skew_exp: matrix is not skew-symmetric")
    return expm(x)


def skew_from_upper(upper: np.ndarray, dim: int) -> np.ndarray:
    """Build a skew-symmetric matrix from its strict upper triangle (row-major)."""
    x = np.zeros((dim, dim))
    iu = np.triu_indices(dim, k=1)
    x[iu] = upper
    return x - x.T


@dataclass
class ScaleSchedule:
    """Exponent applied to the scale base at position ``m``.

    ``linear`` uses m itself; ``log`` uses log_beta(m) to slow the growth of
    s**m on long sequences.  Position 0 maps to 0 in both modes.
    """

    mode: str = "linear"
    beta: float = 2.0

    def __post_init__(self):
        if self.mode not in ("linear", "log"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "log" and not self.beta > 1:
            raise ValueError("log schedule needs beta > 1")

    def exponent(self, m):
        if self.mode == "linear":
            return float(m)
        if m < 0:
            raise ValueError("positions must be non-negative")
        if m == 0:
            return 0.0
        e = math.log(m) / math.log(self.beta)
        k = round(e)
        if abs(e - k) < 1e-9 and self.beta ** k == m:
            return float(k)
        return e

    def exponents(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.float64)
        if self.mode == "linear":
            return positions.copy()
        return np.array([self.exponent(p) for p in positions.reshape(-1)]).reshape(positions.shape)


def log_scale_from_w(w, alpha=ALPHA_DEFAULT, mode="bounded"):
    """ln s for s = e^w / (e^w + alpha) (bounded) or s = e^w (free)."""
    w = np.asarray(w, dtype=np.float64)
    if mode == "free":
        return w
    if mode != "bounded":
        raise ValueError(f"unknown scale mode {mode!r}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    # -softplus(ln alpha - w) avoids the cancellation in w - ln(e^w + alpha)
    return -np.logaddexp(0.0, math.log(alpha) - w)


@dataclass
class Metric:
    """Inner-product structure M_m at each position.

    ``scalar``: M_m = s^e(m) I with one w.  ``diagonal``: one w per dimension.
    ``general2d``: per 2-D block (w1, w2, theta), M_m = R(-m theta) S^m R(m theta).
    """

    kind: str
    dim: int
    w: np.ndarray = None
    alpha: float = ALPHA_DEFAULT
    mode: str = "bounded"
    schedule: ScaleSchedule = field(default_factory=ScaleSchedule)
    theta: np.ndarray = None

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "scalar":
            self.w = np.zeros(()) if self.w is None else np.asarray(self.w, dtype=np.float64).reshape(())
        elif self.kind == "diagonal":
            self.w = np.zeros(self.dim) if self.w is None else np.asarray(self.w, dtype=np.float64)
            if self.w.shape != (self.dim,):
                raise ValueError("diagonal metric needs one w per dimension")
        else:
            if self.dim % 2:
                raise ValueError("general2d metric needs an even dimension")
            nb = self.dim // 2
            self.w = np.zeros((nb, 2)) if self.w is None else np.asarray(self.w, dtype=np.float64)
            self.theta = np.zeros(nb) if self.theta is None else np.asarray(self.theta, dtype=np.float64)
            if self.w.shape != (nb, 2) or self.theta.shape != (nb,):
                raise ValueError("general2d metric needs (D/2, 2) w values and D/2 angles")

    @property
    def log_s(self) -> np.ndarray:
        return log_scale_from_w(self.w, self.alpha, self.mode)

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)


@dataclass
class TangentTransform:
    """Per-position map T_m from the shared reference space to the tangent space.

    ``rotation``/``reflection``: one angle per 2x2 block.  ``mixed``: 4x4
    blocks of a rotation (theta[2b]) followed by a reflection (theta[2b+1]).
    ``dense``: exp(m X) with X stored as its strict upper triangle.
    ``general2d``: R(-m theta) S^(-m/2) per block, sharing theta and S with a
    general2d metric.
    """

    kind: str
    metric: Metric
    theta: np.ndarray = None
    x_upper: np.ndarray = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        d = self.metric.dim
        if d % 2:
            raise ValueError("transform dimension must be even")
        if self.kind == "general2d":
            if self.metric.kind != "general2d":
                raise ValueError("general2d transform must be paired with a general2d metric")
            return
        if self.metric.kind != "scalar":
            raise ValueError(f"{self.kind} transform takes its scale from a scalar metric")
        if self.kind == "mixed" and d % 4:
            raise ValueError("mixed 4x4 blocks need D divisible by 4")
        if self.kind == "dense":
            n = d * (d - 1) // 2
            self.x_upper = np.zeros(n) if self.x_upper is None else np.asarray(self.x_upper, dtype=np.float64)
            if self.x_upper.shape != (n,):
                raise ValueError(f"dense transform needs {n} generator entries")
        else:
            self.theta = (default_angles(d) if self.theta is None
                          else np.asarray(self.theta, dtype=np.float64))
            if self.theta.shape != (d // 2,):
                raise ValueError(f"{self.kind} transform needs {d // 2} angles")

    @property
    def dim(self):
        return self.metric.dim

    @property
    def generator(self) -> np.ndarray:
        return skew_from_upper(self.x_upper, self.dim)

    def pair_is_reflection(self) -> np.ndarray:
        nb = self.dim // 2
        if self.kind == "reflection":
            return np.ones(nb, dtype=bool)
        if self.kind == "mixed":
            return np.arange(nb) % 2 == 1
        return np.zeros(nb, dtype=bool)


def default_angles(dim: int, base: float = 10000.0) -> np.ndarray:
    """Geometric angle ladder base^(-2j/D), j = 0 .. D/2-1."""
    return base ** (-2.0 * np.arange(dim // 2) / dim)


def _scale_power(metric: Metric, e: float) -> float:
    return float(np.exp(e * metric.log_s))


def metric_matrix(metric: Metric, m) -> np.ndarray:
    e = metric.schedule.exponent(m)
    if metric.kind == "scalar":
        return _scale_power(metric, e) * np.eye(metric.dim)
    if metric.kind == "diagonal":
        return np.diag(np.exp(e * metric.log_s))
    blocks = []
    for (ls1, ls2), th in zip(metric.log_s, metric.theta):
        r = rotation_block(m * th)
        blocks.append(r.T @ np.diag([math.exp(e * ls1), math.exp(e * ls2)]) @ r)
    return block_diag(blocks)


def _blocks(t: TangentTransform, m, inverse=False):
    sign = -1.0 if inverse else 1.0
    refl = t.pair_is_reflection()
    out = []
    for th, is_refl in zip(t.theta, refl):
        if is_refl:
            out.append(reflection_block(m * th))
        else:
            out.append(rotation_block(sign * m * th))
    return out


def transform_matrix(t: TangentTransform, m) -> np.ndarray:
    metric = t.metric
    e = metric.schedule.exponent(m)
    if t.kind == "general2d":
        blocks = [rotation_block(-m * th) @ np.diag([math.exp(-e * ls1 / 2), math.exp(-e * ls2 / 2)])
                  for (ls1, ls2), th in zip(metric.log_s, metric.theta)]
        return block_diag(blocks)
    c = _scale_power(metric, -e / 2)
    if t.kind == "dense":
        return c * expm(m * t.generator)
    return c * block_diag(_blocks(t, m))


def inverse_transform_matrix(t: TangentTransform, m) -> np.ndarray:
    """Closed-form T_m^{-1}: angles negated, scale exponent flipped, reflections kept."""
    metric = t.metric
    e = metric.schedule.exponent(m)
    if t.kind == "general2d":
        blocks = [np.diag([math.exp(e * ls1 / 2), math.exp(e * ls2 / 2)]) @ rotation_block(m * th)
                  for (ls1, ls2), th in zip(metric.log_s, metric.theta)]
        return block_diag(blocks)
    c = _scale_power(metric, e / 2)
    if t.kind == "dense":
        return c * expm(-m * t.generator)
    return c * block_diag(_blocks(t, m, inverse=True))


def relative_transform(t: TangentTransform, m, n) -> np.ndarray:
    """Closed form of T_m T_n^{-1}, the map carrying position n to position m."""
    metric = t.metric
    em, en = metric.schedule.exponent(m), metric.schedule.exponent(n)
    if t.kind == "general2d":
        blocks = [rotation_block(-m * th)
                  @ np.diag([math.exp((en - em) * ls1 / 2), math.exp((en - em) * ls2 / 2)])
                  @ rotation_block(n * th)
                  for (ls1, ls2), th in zip(metric.log_s, metric.theta)]
        return block_diag(blocks)
    c = _scale_power(metric, (en - em) / 2)
    if t.kind == "dense":
        return c * expm((m - n) * t.generator)
    refl = t.pair_is_reflection()
    # two reflections compose to a rotation by twice the angle difference
    blocks = [rotation_block((2 if r else 1) * (m - n) * th) for th, r in zip(t.theta, refl)]
    return c * block_diag(blocks)


def _check_vec(v, dim, what="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise ValueError(f"{what} has shape {v.shape}, expected ({dim},)")
    return v


def parallel_transport(t: TangentTransform, n, m, v) -> np.ndarray:
    """Carry ``v`` from the tangent space at position ``n`` to position ``m``."""
    v = _check_vec(v, t.dim)
    return relative_transform(t, m, n) @ v


def metric_inner(metric: Metric, m, a, b) -> float:
    a = _check_vec(a, metric.dim, "a")
    b = _check_vec(b, metric.dim, "b")
    return float(a @ metric_matrix(metric, m) @ b)


def compatibility_residual(metric: Metric, t: TangentTransform, m, n) -> float:
    """Frobenius norm of T_m^T M_m T_m - T_n^T M_n T_n."""
    if metric.dim != t.dim:
        raise ValueError("metric and transform dimensions differ")
    if m == n:
        return 0.0
    tm, tn = transform_matrix(t, m), transform_matrix(t, n)
    diff = tm.T @ metric_matrix(metric, m) @ tm - tn.T @ metric_matrix(metric, n) @ tn
    return float(np.linalg.norm(diff))
