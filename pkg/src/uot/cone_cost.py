"""Pointwise transport/growth costs on pairs (location, mass).

Three families are provided, each jointly positively 1-homogeneous and
convex in the two mass arguments:

``wf``
    2 delta^2 (m0 + m1 - 2 sqrt(m0 m1) cosbar(|x0-x1| / (2 delta))) with
    cosbar(z) = cos(min(|z|, pi/2)).  Its square root is a metric on the
    mass cone over the domain.

``partial``
    min(|x1-x0|^p / p, 2 delta) * min(m0, m1) + delta |m1 - m0|; transport
    up to a cutoff plus linear creation/destruction.  Its p-th root is a
    metric.

``classical``
    The degenerate equal-mass case: m0 * |x1-x0|^p / p when m0 == m1 and
    +inf otherwise (the delta -> inf limit of ``partial``).  Solvers treat
    the +inf off-diagonal as a hard constraint m0 == m1.

Each family carries an exact description of the convex dual set Q(x, y)
(the set of slopes (a, b) with a m0 + b m1 <= c for all masses) together
with membership tests and Euclidean projections.  For ``wf`` the dual
variables are stored pre-scaled by 1/(2 delta^2), which makes the Q-set
delta-free: a <= 1, b <= 1, (1-a)(1-b) >= cosbar^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NegativeMass, NoConvergence

__all__ = [
    "CostFunction",
    "DualSetPoint",
    "truncated_cos",
    "wf_cost",
    "wf_path_cost",
    "partial_ot_cost",
    "cone_distance",
    "in_Q",
    "project_Q",
    "two_chunk_regularize",
]

_KINDS = ("wf", "partial", "classical")


def truncated_cos(z):
    """cos(min(|z|, pi/2)); the spatial attenuation factor of the wf cost."""
    return np.cos(np.minimum(np.abs(z), np.pi / 2.0))


def _check_masses(*ms):
    for m in ms:
        if np.any(np.asarray(m) < 0):
            raise NegativeMass("masses must be nonnegative")


def wf_cost(x0, m0, x1, m1, delta=1.0):
    """Transport-growth cost between (x0, m0) and (x1, m1), length scale delta.

    Vectorized over all arguments; ``x0``/``x1`` may be scalars (1D) or
    arrays whose last axis is the space dimension.
    """
    _check_masses(m0, m1)
    dist = _point_distance(x0, x1)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    val = 2.0 * delta**2 * (
        m0 + m1 - 2.0 * np.sqrt(m0 * m1) * truncated_cos(dist / (2.0 * delta))
    )
    return val if val.ndim else float(np.maximum(val, 0.0))


def wf_path_cost(x0, m0, x1, m1, delta=1.0):
    """Action of the best single unsplit particle path (cutoff pi, not pi/2).

    Equals ``2 delta^2 * cone_distance(...)**2`` with base distance
    |x0-x1|/(2 delta); upper-bounds :func:`wf_cost`, with equality iff
    |x0-x1| <= pi*delta.
    """
    _check_masses(m0, m1)
    dist = _point_distance(x0, x1)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    z = np.minimum(dist / (2.0 * delta), np.pi)
    val = 2.0 * delta**2 * (m0 + m1 - 2.0 * np.sqrt(m0 * m1) * np.cos(z))
    return val if val.ndim else float(np.maximum(val, 0.0))


def partial_ot_cost(x0, m0, x1, m1, delta=1.0, p=2):
    """Partial-transport cost: capped movement of the common mass plus
    linear cost delta per unit of created/destroyed mass."""
    _check_masses(m0, m1)
    if p < 1:
        raise ValueError("p must be >= 1")
    dist = _point_distance(x0, x1)
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    move = np.minimum(dist**p / p, 2.0 * delta)
    val = move * np.minimum(m0, m1) + delta * np.abs(m1 - m0)
    return val if val.ndim else float(val)


def cone_distance(x0, m0, x1, m1, base_distance=None):
    """Geodesic distance on the mass cone: sqrt(m0 + m1 - 2 sqrt(m0 m1) cos(d ^ pi)).

    ``base_distance`` may be a precomputed nonnegative distance d(x0, x1)
    (then ``x0``/``x1`` are ignored), a callable d(x0, x1), or None for
    the Euclidean distance between the points.
    """
    _check_masses(m0, m1)
    if base_distance is None:
        d = _point_distance(x0, x1)
    elif callable(base_distance):
        d = np.asarray(base_distance(x0, x1), dtype=float)
    else:
        d = np.asarray(base_distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("base distance must be nonnegative")
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    sq = m0 + m1 - 2.0 * np.sqrt(m0 * m1) * np.cos(np.minimum(d, np.pi))
    sq = np.maximum(sq, 0.0)
    out = np.sqrt(sq)
    return out if out.ndim else float(out)


def _point_distance(x0, x1):
    """|x1 - x0|; 1-D array inputs are batches of scalar positions, a single
    d-dimensional point must be passed with shape (1, d)."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    diff = x1 - x0
    if diff.ndim == 0:
        return float(np.abs(diff))
    if diff.ndim == 1:
        return np.abs(diff)
    return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(frozen=True)
class CostFunction:
    """One cost family with its parameters.

    ``p_metric`` is the homogeneity order of the metric root:
    cost**(1/p_metric) satisfies the triangle inequality (2 for ``wf``,
    p for ``partial`` and ``classical``).
    """

    kind: str
    delta: float = 1.0
    p: int = 2

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}, got {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.p < 1 or int(self.p) != self.p:
            raise ValueError("p must be an integer >= 1")
        object.__setattr__(self, "p", int(self.p))

    @property
    def p_metric(self) -> float:
        return 2.0 if self.kind == "wf" else float(self.p)

    @property
    def destruction_rate(self) -> float:
        """c(x, m, ., 0) = rate * m: linear cost of removing mass."""
        if self.kind == "wf":
            return 2.0 * self.delta**2
        if self.kind == "partial":
            return self.delta
        return math.inf

    def evaluate_at_distance(self, dist, m0, m1):
        """Vectorized cost given precomputed pair distances."""
        dist = np.asarray(dist, dtype=float)
        m0 = np.asarray(m0, dtype=float)
        m1 = np.asarray(m1, dtype=float)
        if self.kind == "wf":
            return 2.0 * self.delta**2 * (
                m0 + m1
                - 2.0 * np.sqrt(m0 * m1) * truncated_cos(dist / (2.0 * self.delta))
            )
        if self.kind == "partial":
            move = np.minimum(dist**self.p / self.p, 2.0 * self.delta)
            return move * np.minimum(m0, m1) + self.delta * np.abs(m1 - m0)
        # classical: hard equal-mass constraint, +inf sentinel off-diagonal
        equal = m0 == m1
        base = m0 * dist**self.p / self.p
        return np.where(equal, base, np.inf)

    def evaluate(self, x0, m0, x1, m1):
        """Cost between (x0, m0) and (x1, m1)."""
        _check_masses(m0, m1)
        val = self.evaluate_at_distance(_point_distance(x0, x1), m0, m1)
        return val if np.ndim(val) else float(val)

    def q_parameter(self, dist):
        """Scalar pair parameter describing Q(x, y) for this family.

        wf: cosbar(dist / (2 delta)); partial: min(dist^p/p, 2 delta);
        classical: dist^p / p.
        """
        dist = np.asarray(dist, dtype=float)
        if self.kind == "wf":
            return truncated_cos(dist / (2.0 * self.delta))
        if self.kind == "partial":
            return np.minimum(dist**self.p / self.p, 2.0 * self.delta)
        return dist**self.p / self.p

    def to_json(self) -> dict:
        return {"kind": self.kind, "delta": self.delta, "p": self.p}

    @staticmethod
    def from_json(obj: dict) -> "CostFunction":
        return CostFunction(
            kind=obj.get("kind", "wf"),
            delta=float(obj.get("delta", 1.0)),
            p=int(obj.get("p", 2)),
        )


@dataclass(frozen=True)
class DualSetPoint:
    """Candidate dual slope pair (a, b) = (phi(x), psi(y))."""

    a: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b])


# ---------------------------------------------------------------------------
# Dual sets Q(x, y): membership and exact Euclidean projection.
# ---------------------------------------------------------------------------


def in_Q(cost: CostFunction, x0, x1, a, b, slack: float = 0.0):
    """Exact membership (a, b) in Q(x0, x1), with optional additive slack.

    For ``wf`` the pair (a, b) is understood pre-scaled by 1/(2 delta^2).
    Vectorized; returns a bool or a boolean array.
    """
    dist = _point_distance(x0, x1)
    out = in_Q_at_distance(cost, dist, a, b, slack)
    return out if np.ndim(out) else bool(out)


def in_Q_at_distance(cost: CostFunction, dist, a, b, slack: float = 0.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    par = cost.q_parameter(dist)
    if cost.kind == "wf":
        return (
            (a <= 1.0 + slack)
            & (b <= 1.0 + slack)
            & ((1.0 - a) * (1.0 - b) >= par**2 - slack)
        )
    if cost.kind == "partial":
        d = cost.delta
        return (a <= d + slack) & (b <= d + slack) & (a + b <= par + slack)
    return a + b <= par + slack


def project_Q(cost: CostFunction, x0, x1, a, b) -> DualSetPoint:
    """Euclidean-nearest point of Q(x0, x1) to (a, b)."""
    dist = _point_distance(x0, x1)
    pa, pb = project_Q_at_distance(
        cost, np.asarray(dist, dtype=float), np.asarray(a, float), np.asarray(b, float)
    )
    return DualSetPoint(float(pa), float(pb))


def project_Q_at_distance(cost: CostFunction, dist, a, b):
    """Vectorized projection onto Q given pair distances; returns (a*, b*)."""
    a = np.asarray(a, dtype=float).copy()
    b = np.asarray(b, dtype=float).copy()
    par = np.broadcast_to(np.asarray(cost.q_parameter(dist), dtype=float), a.shape).copy()
    if cost.kind == "wf":
        return _project_wf(a, b, par)
    if cost.kind == "partial":
        return _project_halfplane_box(a, b, par, cost.delta)
    # classical: halfplane a + b <= par
    t = np.maximum(a + b - par, 0.0) / 2.0
    return a - t, b - t


def _project_halfplane_box(a, b, cap, delta):
    """Project onto {a <= delta, b <= delta, a + b <= cap} (cap <= 2 delta)."""
    pa = np.minimum(a, delta)
    pb = np.minimum(b, delta)
    ok = pa + pb <= cap
    # halfplane is active: move to the line a + b = cap, then clip to the
    # vertices (delta, cap - delta) / (cap - delta, delta) if needed
    t = (a + b - cap) / 2.0
    qa = a - t
    qb = b - t
    va = np.where(qa > delta, delta, np.where(qb > delta, cap - delta, qa))
    vb = np.where(qa > delta, cap - delta, np.where(qb > delta, delta, qb))
    pa = np.where(ok, pa, va)
    pb = np.where(ok, pb, vb)
    return pa, pb


def _project_wf(a, b, cosbar, newton_iters: int = 100):
    """Project onto {a <= 1, b <= 1, (1-a)(1-b) >= cosbar^2}.

    Work in u = 1 - a >= 0, v = 1 - b: for cosbar > 0 the boundary is the
    hyperbola branch u v = cosbar^2, u > 0, and the projection solves
    u^4 - ub u^3 + C^2 vb u - C^4 = 0 (unique positive root; bisection
    bracket then Newton polish).
    """
    scalar = np.ndim(a) == 0
    u = np.atleast_1d(1.0 - a).astype(float)
    v = np.atleast_1d(1.0 - b).astype(float)
    C = np.atleast_1d(np.broadcast_to(cosbar, u.shape)).astype(float)

    out_u = np.maximum(u, 0.0)
    out_v = np.maximum(v, 0.0)

    curved = C > 0.0
    inside = curved & (u > 0.0) & (u * v >= C**2)
    solve = curved & ~inside
    if np.any(solve):
        ub = u[solve]
        vb = v[solve]
        Cs2 = C[solve] ** 2
        Cs4 = Cs2 * Cs2
        cv = Cs2 * vb

        def g(r):
            return r * r * (r * (r - ub)) + cv * r - Cs4

        lo = np.zeros_like(ub)
        hi = np.maximum(ub, 0.0) + np.sqrt(Cs2) + 1.0 + np.maximum(-vb, 0.0)
        # bisection bracket (g(0) = -C^4 < 0 and there is a single positive
        # root), then bracket-safeguarded Newton
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            neg = g(mid) < 0.0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        r = 0.5 * (lo + hi)
        for _ in range(max(newton_iters // 10, 8)):
            gr = g(r)
            neg = gr < 0.0
            lo = np.where(neg, r, lo)
            hi = np.where(neg, hi, r)
            dgr = r * r * (4.0 * r - 3.0 * ub) + cv
            with np.errstate(divide="ignore", invalid="ignore"):
                r_new = r - gr / dgr
            take = np.isfinite(r_new) & (r_new > lo) & (r_new < hi)
            r = np.where(take, r_new, 0.5 * (lo + hi))
        if np.any(~np.isfinite(r)) or np.any(r <= 0.0):
            raise NoConvergence("wf dual-set projection failed to bracket a root")
        out_u[solve] = r
        out_v[solve] = Cs2 / r
    if np.any(inside):
        out_u[inside] = u[inside]
        out_v[inside] = v[inside]

    pa = 1.0 - out_u
    pb = 1.0 - out_v
    if scalar:
        return float(pa[0]), float(pb[0])
    return pa, pb


# ---------------------------------------------------------------------------
# Two-chunk convex regularization of a single-path cost.
# ---------------------------------------------------------------------------


def two_chunk_regularize(path_cost_oracle, x0, m0, x1, m1, resolution: int = 64):
    """Best split of the endpoint masses into two chunks, each paying the
    single-path cost.

    Minimizes oracle(x0, s*m0, x1, t*m1) + oracle(x0, (1-s)*m0, x1, (1-t)*m1)
    over split fractions (s, t) on a (resolution+1)^2 grid, refined by
    golden-section polish.  The oracle must be 1-homogeneous in the masses
    and vectorized over them.
    """
    _check_masses(m0, m1)
    m0 = float(m0)
    m1 = float(m1)
    fractions = np.linspace(0.0, 1.0, resolution + 1)
    S, T = np.meshgrid(fractions, fractions, indexing="ij")

    def split_value(s, t):
        return path_cost_oracle(x0, s * m0, x1, t * m1) + path_cost_oracle(
            x0, (1.0 - s) * m0, x1, (1.0 - t) * m1
        )

    values = np.asarray(split_value(S, T), dtype=float)
    flat = int(np.argmin(values))
    i, j = np.unravel_index(flat, values.shape)
    best = float(values[i, j])

    # golden-section polish, alternating coordinates inside the bracketing cells
    h = 1.0 / resolution
    s_lo, s_hi = max(fractions[i] - h, 0.0), min(fractions[i] + h, 1.0)
    t_lo, t_hi = max(fractions[j] - h, 0.0), min(fractions[j] + h, 1.0)
    s_cur, t_cur = float(fractions[i]), float(fractions[j])
    for _ in range(3):
        s_cur = _golden(lambda s: split_value(s, t_cur), s_lo, s_hi)
        t_cur = _golden(lambda t: split_value(s_cur, t), t_lo, t_hi)
    best = min(best, float(split_value(s_cur, t_cur)))
    return best


def _golden(fun, lo, hi, iters: int = 60):
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)
