"""Semi-coupling solver for unbalanced transport between discrete measures.

The program: over pairs of nonnegative matrices (m0, m1) on the product of
the atom supports, with the first marginal of m0 pinned to rho0 and the
second marginal of m1 pinned to rho1, minimize sum_ij c(x_i, m0_ij, y_j,
m1_ij).  Mass destruction/creation lives inside the product support (a pair
may carry m0 > 0 with m1 = 0 and vice versa); a virtual apex column/row in
the returned plan covers the degenerate case of an empty marginal.

Solvers:

* ``wf``: primal-dual hybrid gradient.  The cost term is the support
  function of the pair sets Q(x_i, y_j), handled through the Moreau
  identity with the exact projections of :mod:`uot.cone_cost`; marginal
  constraints enter through diagonally rescaled linear maps.  Certificates
  are produced at checkpoints by repairing the iterates: multiplicative
  rescaling on the primal side, coordinate-wise transforms (tightest
  feasible partner potentials) on the dual side, plus a complementary-
  slackness NNLS polish that rebuilds a primal plan from near-optimal
  potentials.
* ``partial`` and ``classical``: direct LP (piecewise-linear objective
  assembled with auxiliary variables for the min/absolute-value terms),
  solved by scipy's bundled HiGHS simplex/interior-point code; marginal
  duals seed the same certificate repair.

A brute-force oracle (dense sampling plus Nelder-Mead polish, trustworthy
by convexity) is provided for instances with at most 3 atoms per side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from .cone_cost import (
    CostFunction,
    _golden,
    project_Q_at_distance,
    truncated_cos,
)
from .errors import DomainMismatch, NotConverged, TooLarge
from .measures import DiscreteMeasure, new_discrete_measure

__all__ = [
    "SemiCouplingPlan",
    "DualCertificate",
    "SolverConfig",
    "solve_static",
    "brute_force_CK",
    "check_triangle",
    "check_weakstar_continuity",
    "WeakstarReport",
    "gamma_functional",
    "gamma_limit_functional",
    "sqrt_measure",
    "partial_lagrangian_value",
    "pair_distances",
    "plan_objective",
]


def pair_distances(rho0: DiscreteMeasure, rho1: DiscreteMeasure) -> np.ndarray:
    """(n0, n1) matrix of Euclidean distances between atom locations."""
    if len(rho0) == 0 or len(rho1) == 0:
        return np.zeros((len(rho0), len(rho1)))
    diff = rho0.points[:, None, :] - rho1.points[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(frozen=True)
class SemiCouplingPlan:
    """Pair of mass matrices on the product support plus one apex column/row.

    ``m0`` and ``m1`` have shape (n0 + 1, n1 + 1).  Entry (i, j) with
    i < n0, j < n1 refers to the atom pair (x_i, y_j); column n1 of ``m0``
    holds mass of rho0 destroyed outright (used when rho1 is empty), row n0
    of ``m1`` holds mass of rho1 created outright.  The remaining apex
    entries are zero.  Ordinary destruction/creation needs no apex: a
    regular pair simply carries m1 = 0 (resp. m0 = 0).
    """

    m0: np.ndarray
    m1: np.ndarray

    def __post_init__(self):
        m0 = np.ascontiguousarray(self.m0, dtype=float)
        m1 = np.ascontiguousarray(self.m1, dtype=float)
        if m0.shape != m1.shape or m0.ndim != 2:
            raise ValueError("m0 and m1 must share a 2-d shape")
        m0.setflags(write=False)
        m1.setflags(write=False)
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "m1", m1)

    @property
    def n0(self) -> int:
        return self.m0.shape[0] - 1

    @property
    def n1(self) -> int:
        return self.m0.shape[1] - 1

    def first_marginal(self) -> np.ndarray:
        """Row sums of m0 over real rows (includes destroyed mass)."""
        return self.m0[: self.n0, :].sum(axis=1)

    def second_marginal(self) -> np.ndarray:
        """Column sums of m1 over real columns (includes created mass)."""
        return self.m1[:, : self.n1].sum(axis=0)

    def transposed(self) -> "SemiCouplingPlan":
        return SemiCouplingPlan(self.m1.T, self.m0.T)


def plan_objective(plan: SemiCouplingPlan, cost: CostFunction, dist: np.ndarray) -> float:
    """sum_ij c(x_i, m0_ij, y_j, m1_ij) for a plan, given pair distances."""
    n0, n1 = plan.n0, plan.n1
    core = cost.evaluate_at_distance(dist, plan.m0[:n0, :n1], plan.m1[:n0, :n1])
    value = float(np.sum(core))
    killed = float(plan.m0[:n0, n1].sum() + plan.m0[n0, :].sum())
    born = float(plan.m1[n0, :n1].sum() + plan.m1[:, n1].sum())
    for extra in (killed, born):
        if extra > 0.0:
            value += cost.destruction_rate * extra
    return value


@dataclass(frozen=True)
class DualCertificate:
    """Feasible dual potentials with primal/dual objective values.

    For the ``wf`` family ``phi``/``psi`` are stored pre-scaled by
    1/(2 delta^2), matching :func:`uot.cone_cost.in_Q`; ``primal``,
    ``dual`` and ``gap`` are always in plain cost units.
    """

    phi: np.ndarray
    psi: np.ndarray
    primal: float
    dual: float
    gap: float
    iterations: int
    converged: bool

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.primal), abs(self.dual), 1e-30)
        return self.gap / scale


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls for the primal-dual solver.

    ``theta`` balances primal/dual step sizes: tau = theta / L and
    sigma = 1 / (theta L) with L the operator norm estimated by power
    iteration, so tau * sigma * L**2 <= 1 holds by construction.  The
    default (None) picks 1/sqrt(max(n0, n1)), matching the relative
    magnitudes of the normalized plan entries and the potentials.
    """

    max_iter: int = 200_000
    tol: float = 1e-7
    check_every: int = 50
    restart_every: int = 500
    theta: float | None = None
    power_iters: int = 50


_DEFAULT_CONFIG = SolverConfig()


# ---------------------------------------------------------------------------
# Public entry point
# ---------------------------------------------------------------------------


def solve_static(
    rho0: DiscreteMeasure,
    rho1: DiscreteMeasure,
    cost: CostFunction,
    config: SolverConfig | None = None,
) -> tuple[SemiCouplingPlan, DualCertificate]:
    """Solve the semi-coupling program between two discrete measures.

    Returns a marginal-feasible plan and a certificate whose dual
    potentials are exactly feasible; ``certificate.converged`` is False
    when the iteration budget ran out (the best iterate is still
    returned, with its achieved gap).
    """
    cfg = config or _DEFAULT_CONFIG
    if rho0.domain != rho1.domain:
        raise DomainMismatch("marginals live on different domain boxes")

    # canonical orientation: solving (rho1, rho0) runs the bitwise-identical
    # mirrored computation, making C(rho0, rho1) == C(rho1, rho0) exactly
    if _measure_key(rho1) < _measure_key(rho0):
        plan, cert = solve_static(rho1, rho0, cost, cfg)
        return plan.transposed(), replace(cert, phi=cert.psi, psi=cert.phi)

    n0, n1 = len(rho0), len(rho1)
    a = rho0.masses.astype(float)
    b = rho1.masses.astype(float)

    if n0 == 0 or n1 == 0:
        return _solve_no_atoms(a, b, cost)
    if rho0 == rho1:
        m0 = np.zeros((n0 + 1, n1 + 1))
        m0[:n0, :n1] = np.diag(a)
        plan = SemiCouplingPlan(m0, m0.copy())
        cert = DualCertificate(np.zeros(n0), np.zeros(n1), 0.0, 0.0, 0.0, 0, True)
        return plan, cert

    dist = pair_distances(rho0, rho1)
    if cost.kind == "wf":
        return _solve_wf_pdhg(a, b, dist, cost, cfg)
    if cost.kind == "partial":
        return _solve_partial_lp(a, b, dist, cost, cfg)
    return _solve_classical_lp(a, b, dist, cost, cfg)


def _measure_key(m: DiscreteMeasure):
    return (len(m), m.points.tobytes(), m.masses.tobytes())


def _solve_no_atoms(a, b, cost):
    """At least one marginal has no atoms: pure destruction + creation."""
    n0, n1 = len(a), len(b)
    m0 = np.zeros((n0 + 1, n1 + 1))
    m1 = np.zeros((n0 + 1, n1 + 1))
    m0[:n0, n1] = a
    m1[n0, :n1] = b
    total = a.sum() + b.sum()
    value = cost.destruction_rate * total if total > 0 else 0.0
    if cost.kind == "classical":
        phi = np.zeros(n0)
        psi = np.zeros(n1)
        dual = value
    else:
        unit = 1.0 if cost.kind == "wf" else cost.destruction_rate
        phi = np.full(n0, unit)
        psi = np.full(n1, unit)
        dual = value
    return (
        SemiCouplingPlan(m0, m1),
        DualCertificate(phi, psi, value, dual, 0.0, 0, True),
    )


# ---------------------------------------------------------------------------
# Certificate repair helpers (shared by both solver paths)
# ---------------------------------------------------------------------------

_FEAS_MARGIN = 1e-13  # subtracted after dual transforms: strict feasibility


def _dual_transform_psi(cost_kind, phi, par, cap):
    """Largest psi feasible against phi: the partner-potential transform.

    ``par`` is the (n_phi, n_psi) pair parameter matrix.  Returns the new
    psi and the (possibly shrunk) phi actually used.
    """
    if cost_kind == "wf":
        guard = 1e-12
        phi = np.minimum(phi, 1.0)
        has_pos = (par > 0).any(axis=1)
        phi = np.where(has_pos, np.minimum(phi, 1.0 - guard), phi)
        denom = np.maximum(1.0 - phi, guard)[:, None]
        bound = np.where(par > 0, 1.0 - par**2 / denom, 1.0)
        psi = np.minimum(bound.min(axis=0), 1.0)
        return psi, phi
    phi = np.minimum(phi, cap)
    psi = np.minimum(cap, (par - phi[:, None]).min(axis=0))
    return psi, phi


def _repair_duals(cost, phi, par):
    """Three alternating transforms; returns an exactly feasible (phi, psi)."""
    cap = cost.delta if cost.kind == "partial" else math.inf
    psi, phi = _dual_transform_psi(cost.kind, phi, par, cap)
    phi, psi = _dual_transform_psi(cost.kind, psi, par.T, cap)
    psi, phi = _dual_transform_psi(cost.kind, phi, par, cap)
    return phi - _FEAS_MARGIN, psi - _FEAS_MARGIN


def _repair_primal(M0, M1, a, b, attract):
    """Clip to >= 0 and rescale rows/cols multiplicatively to exact marginals.

    Mass of an empty row/column is deposited on the most attractive partner
    (largest ``attract`` entry).
    """
    M0 = np.maximum(M0, 0.0)
    M1 = np.maximum(M1, 0.0)
    rows = M0.sum(axis=1)
    cols = M1.sum(axis=0)
    f0 = np.divide(a, rows, out=np.zeros_like(a), where=rows > 0)
    f1 = np.divide(b, cols, out=np.zeros_like(b), where=cols > 0)
    M0 = M0 * f0[:, None]
    M1 = M1 * f1[None, :]
    best_j = np.argmax(attract, axis=1)
    best_i = np.argmax(attract, axis=0)
    for i in np.flatnonzero((rows <= 0) & (a > 0)):
        M0[i, best_j[i]] = a[i]
    for j in np.flatnonzero((cols <= 0) & (b > 0)):
        M1[best_i[j], j] = b[j]
    return M0, M1


def _wf_primal_value(M0, M1, C):
    return float(np.sum(M0 + M1 - 2.0 * np.sqrt(M0 * M1) * C))


def _wf_dual_from_plan(M0, M1, C, support_tol):
    """Candidate potentials from the cost subgradient on the plan support.

    On a supported pair the partial slope in m0 is 1 - C sqrt(m1/m0)
    (1 when the pair destroys mass); taking the row minimum keeps the
    candidate on the feasible side before the exact repair.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(M0 > support_tol, np.sqrt(M1 / np.maximum(M0, 1e-300)), 0.0)
    slope = np.where(M0 > support_tol, 1.0 - C * ratio, np.inf)
    phi = np.min(slope, axis=1)
    return np.where(np.isfinite(phi), np.minimum(phi, 1.0), 1.0)


def _wf_nnls_plan(phi, psi, C, a, b, act_tol):
    """Rebuild a primal plan from near-optimal potentials.

    On pairs where the hyperbola constraint is (nearly) active the optimal
    mass direction is the outward normal (1 - psi_j, 1 - phi_i); destroyed
    and created mass corresponds to the box faces phi = 1 / psi = 1.  The
    nonnegative multipliers solve a small least-squares system against the
    marginals; None is returned when the fit fails.
    """
    n0, n1 = len(a), len(b)
    u = 1.0 - phi
    v = 1.0 - psi
    act = (C > 0) & (np.outer(u, v) <= C**2 + act_tol)
    kill = u <= act_tol
    birth = v <= act_tol
    pairs = np.argwhere(act)
    kidx = np.flatnonzero(kill)
    bidx = np.flatnonzero(birth)
    ncols = len(pairs) + len(kidx) + len(bidx)
    if ncols == 0 or ncols > 4000:
        return None
    A = np.zeros((n0 + n1, ncols))
    for k, (i, j) in enumerate(pairs):
        A[i, k] = v[j]
        A[n0 + j, k] = u[i]
    off = len(pairs)
    for k, i in enumerate(kidx):
        A[i, off + k] = 1.0
    off += len(kidx)
    for k, j in enumerate(bidx):
        A[n0 + j, off + k] = 1.0
    rhs = np.concatenate([a, b])
    try:
        x, res = scipy.optimize.nnls(A, rhs)
    except RuntimeError:
        return None
    if res > 1e-9 * max(rhs.sum(), 1.0):
        return None
    M0 = np.zeros((n0, n1))
    M1 = np.zeros((n0, n1))
    for k, (i, j) in enumerate(pairs):
        M0[i, j] += x[k] * v[j]
        M1[i, j] += x[k] * u[i]
    off = len(pairs)
    for k, i in enumerate(kidx):
        M0[i, np.argmax(C[i])] += x[off + k]
    off += len(kidx)
    for k, j in enumerate(bidx):
        M1[np.argmax(C[:, j]), j] += x[off + k]
    return M0, M1


# ---------------------------------------------------------------------------
# wf solver: primal-dual hybrid gradient
# ---------------------------------------------------------------------------


def _operator_norm(n0, n1, iters, rng):
    """Estimate ||K|| for the rescaled marginal operator by power iteration.

    With row scaling 1/sqrt(n1), 1/sqrt(n0) the exact norm is 1; the
    estimate feeds the step sizes so tau sigma ||K||^2 <= 1 regardless.
    """
    r0 = 1.0 / math.sqrt(n1)
    r1 = 1.0 / math.sqrt(n0)
    z0 = rng.standard_normal((n0, n1))
    z1 = rng.standard_normal((n0, n1))
    nrm = math.sqrt(float(np.sum(z0**2) + np.sum(z1**2)))
    z0 /= nrm
    z1 /= nrm
    lam = 1.0
    for _ in range(iters):
        y0 = z0.sum(axis=1) * r0
        y1 = z1.sum(axis=0) * r1
        z0 = np.broadcast_to((y0 * r0)[:, None], (n0, n1)).copy()
        z1 = np.broadcast_to((y1 * r1)[None, :], (n0, n1)).copy()
        lam = math.sqrt(float(np.sum(z0**2) + np.sum(z1**2)))
        if lam <= 1e-300:
            return 1.0
        z0 /= lam
        z1 /= lam
    return math.sqrt(lam)


def _solve_wf_pdhg(a, b, dist, cost, cfg):
    delta = cost.delta
    n0, n1 = len(a), len(b)
    C = truncated_cos(dist / (2.0 * delta))
    scale = a.sum() + b.sum()
    an = a / scale
    bn = b / scale
    unit = 2.0 * delta**2 * scale  # scaled value -> cost units

    r0 = 1.0 / math.sqrt(n1)
    r1 = 1.0 / math.sqrt(n0)
    rng = np.random.default_rng(1234)
    L = max(_operator_norm(n0, n1, cfg.power_iters, rng), 1e-12)
    theta = cfg.theta if cfg.theta is not None else 0.5 / math.sqrt(max(n0, n1))
    tau = theta / L
    sigma = 1.0 / (theta * L)

    M0 = np.outer(an, bn) / bn.sum()
    M1 = np.outer(an, bn) / an.sum()
    Mb0, Mb1 = M0.copy(), M1.copy()
    yphi = np.zeros(n0)
    ypsi = np.zeros(n1)

    best = None  # (rel_gap, primal, dual, phi, psi, M0, M1)
    rel_at_restart = math.inf

    def checkpoint():
        nonlocal best
        R0, R1 = _repair_primal(M0.copy(), M1.copy(), an, bn, C)
        primal = _wf_primal_value(R0, R1, C)
        dual = -math.inf
        ph = ps = None
        for phi_hat in (-yphi * r0, _wf_dual_from_plan(R0, R1, C, 1e-14)):
            cand = _repair_duals(cost, phi_hat, C)
            val = float(cand[0] @ an + cand[1] @ bn)
            if val > dual:
                dual, (ph, ps) = val, cand
        for tol_act in (1e-9, 1e-6, 1e-4):
            built = _wf_nnls_plan(ph, ps, C, an, bn, tol_act)
            if built is not None:
                P0, P1 = _repair_primal(built[0], built[1], an, bn, C)
                val = _wf_primal_value(P0, P1, C)
                if val < primal:
                    primal, R0, R1 = val, P0, P1
        gap = primal - dual
        rel = gap / max(abs(primal), abs(dual), 1e-15)
        if best is None or rel < best[0]:
            best = (rel, primal, dual, ph, ps, R0, R1)
        return rel, gap

    it = 0
    for it in range(1, cfg.max_iter + 1):
        yphi += sigma * (Mb0.sum(axis=1) - an) * r0
        ypsi += sigma * (Mb1.sum(axis=0) - bn) * r1
        w0 = M0 - tau * (yphi * r0)[:, None]
        w1 = M1 - tau * (ypsi * r1)[None, :]
        p0, p1 = project_Q_at_distance(cost, dist, w0 / tau, w1 / tau)
        z0 = w0 - tau * p0
        z1 = w1 - tau * p1
        Mb0 = 2.0 * z0 - M0
        Mb1 = 2.0 * z1 - M1
        M0, M1 = z0, z1

        if it in (5, 15) or it % cfg.check_every == 0 or it == cfg.max_iter:
            rel, gap = checkpoint()
            if rel <= cfg.tol or gap <= 1e-13:
                break
            if it % cfg.restart_every == 0:
                if best[0] > 0.9 * rel_at_restart:
                    # momentum reset + re-anchor the dual at the repaired point
                    Mb0, Mb1 = M0.copy(), M1.copy()
                    yphi = -best[3] / r0
                    ypsi = -best[4] / r1
                rel_at_restart = best[0]

    rel, primal, dual, ph, ps, R0, R1 = best
    m0 = np.zeros((n0 + 1, n1 + 1))
    m1 = np.zeros((n0 + 1, n1 + 1))
    m0[:n0, :n1] = R0 * scale
    m1[:n0, :n1] = R1 * scale
    cert = DualCertificate(
        phi=ph,
        psi=ps,
        primal=primal * unit,
        dual=dual * unit,
        gap=(primal - dual) * unit,
        iterations=it,
        converged=rel <= cfg.tol or (primal - dual) <= 1e-13,
    )
    return SemiCouplingPlan(m0, m1), cert


# ---------------------------------------------------------------------------
# partial / classical solvers: direct LP via HiGHS
# ---------------------------------------------------------------------------


def _marginal_eq_system(n0, n1, nvars, m0_off, m1_off):
    """Sparse equality system: rows of M0 sum to a, columns of M1 sum to b."""
    i_idx = np.repeat(np.arange(n0), n1)
    j_idx = np.tile(np.arange(n1), n0)
    flat = np.arange(n0 * n1)
    rows = np.concatenate([i_idx, n0 + j_idx])
    cols = np.concatenate([m0_off + flat, m1_off + flat])
    vals = np.ones(2 * n0 * n1)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n0 + n1, nvars))


# 1e-10 is the tightest feasibility tolerance HiGHS accepts
_LP_OPTIONS = {
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def _solve_partial_lp(a, b, dist, cost, cfg):
    n0, n1 = len(a), len(b)
    m = n0 * n1
    delta = cost.delta
    K = np.minimum(dist**cost.p / cost.p, 2.0 * delta)  # capped move cost
    # c = (K/2)(m0 + m1) + (delta - K/2) s  with  s >= |m1 - m0|
    obj = np.concatenate([(K / 2).ravel(), (K / 2).ravel(), (delta - K / 2).ravel()])
    A_eq = _marginal_eq_system(n0, n1, 3 * m, 0, m)
    b_eq = np.concatenate([a, b])
    I = sp.identity(m, format="csr")
    A_ub = sp.bmat([[-I, I, -I], [I, -I, -I]], format="csr")
    b_ub = np.zeros(2 * m)
    res = scipy.optimize.linprog(
        obj,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options=_LP_OPTIONS,
    )
    if not res.success:
        raise NotConverged(f"partial-transport LP failed: {res.message}")
    M0 = res.x[:m].reshape(n0, n1)
    M1 = res.x[m : 2 * m].reshape(n0, n1)
    phi, psi = _repair_duals(cost, np.asarray(res.eqlin.marginals[:n0]), K)
    dual = float(phi @ a + psi @ b)
    M0, M1 = _repair_primal(M0, M1, a, b, -dist)
    primal = float(np.sum(cost.evaluate_at_distance(dist, M0, M1)))
    gap = primal - dual
    rel = gap / max(abs(primal), abs(dual), 1e-15)
    m0 = np.zeros((n0 + 1, n1 + 1))
    m1 = np.zeros((n0 + 1, n1 + 1))
    m0[:n0, :n1] = M0
    m1[:n0, :n1] = M1
    cert = DualCertificate(
        phi, psi, primal, dual, gap, int(res.nit), rel <= max(cfg.tol, 1e-7)
    )
    return SemiCouplingPlan(m0, m1), cert


def _solve_classical_lp(a, b, dist, cost, cfg):
    n0, n1 = len(a), len(b)
    mass0, mass1 = a.sum(), b.sum()
    if abs(mass0 - mass1) > 1e-12 * max(mass0, mass1):
        # hard equal-mass constraint unsatisfiable: the value is +inf
        m0 = np.zeros((n0 + 1, n1 + 1))
        m1 = np.zeros((n0 + 1, n1 + 1))
        m0[:n0, n1] = a
        m1[n0, :n1] = b
        cert = DualCertificate(
            np.zeros(n0), np.zeros(n1), math.inf, math.inf, 0.0, 0, True
        )
        return SemiCouplingPlan(m0, m1), cert
    m = n0 * n1
    par = dist**cost.p / cost.p
    A_eq = _marginal_eq_system(n0, n1, m, 0, 0)
    b_eq = np.concatenate([a, b])
    res = scipy.optimize.linprog(
        par.ravel(),
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=(0, None),
        method="highs",
        options=_LP_OPTIONS,
    )
    if not res.success:
        raise NotConverged(f"transport LP failed: {res.message}")
    G = np.maximum(res.x.reshape(n0, n1), 0.0)
    phi, psi = _repair_duals(cost, np.asarray(res.eqlin.marginals[:n0]), par)
    primal = float(np.sum(G * par))
    dual = float(phi @ a + psi @ b)
    gap = primal - dual
    m0 = np.zeros((n0 + 1, n1 + 1))
    m0[:n0, :n1] = G
    plan = SemiCouplingPlan(m0, m0.copy())
    rel = gap / max(abs(primal), abs(dual), 1e-15)
    cert = DualCertificate(
        phi, psi, primal, dual, gap, int(res.nit), rel <= max(cfg.tol, 1e-7)
    )
    return plan, cert


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------


def brute_force_CK(
    rho0: DiscreteMeasure,
    rho1: DiscreteMeasure,
    cost: CostFunction,
    grid_resolution: int = 200,
) -> float:
    """Direct minimization of the semi-coupling objective (tiny instances).

    Independent of :func:`solve_static`: dense feasible sampling over the
    mass-allocation polytope, a full per-variable grid when at most two
    mass variables are free, then descent of progressively less smoothed
    convex surrogates (the exact cost has min/|.|/sqrt kinks) and a final
    exact Nelder-Mead polish.  Convexity makes the local descent
    trustworthy; the returned value is always the exact objective at a
    feasible point.
    """
    n0, n1 = len(rho0), len(rho1)
    if n0 > 3 or n1 > 3:
        raise TooLarge("brute force limited to <= 3 atoms per side")
    a = rho0.masses.astype(float)
    b = rho1.masses.astype(float)
    if n0 == 0 or n1 == 0:
        total = a.sum() + b.sum()
        return cost.destruction_rate * total if total > 0 else 0.0
    dist = pair_distances(rho0, rho1)
    if cost.kind == "classical":
        return _brute_classical(a, b, dist, cost)
    if cost.kind == "wf":
        return _brute_wf_reduced(a, b, dist, cost, grid_resolution)

    def objective(M0, M1):
        return np.sum(cost.evaluate_at_distance(dist, M0, M1), axis=(-2, -1))

    free0 = n0 * (n1 - 1)
    free1 = n1 * (n0 - 1)
    if free0 + free1 == 0:
        return float(objective(a.reshape(n0, n1), b.reshape(n0, n1)))

    def unpack(x):
        M0 = np.empty((n0, n1))
        if n1 > 1:
            M0[:, :-1] = x[:free0].reshape(n0, n1 - 1)
        M0[:, -1] = a - M0[:, :-1].sum(axis=1) if n1 > 1 else a
        M1 = np.empty((n0, n1))
        if n0 > 1:
            M1[:-1, :] = x[free0:].reshape(n0 - 1, n1)
        M1[-1, :] = b - M1[:-1, :].sum(axis=0) if n0 > 1 else b
        return M0, M1

    def pack(M0, M1):
        parts = []
        if n1 > 1:
            parts.append(M0[:, :-1].ravel())
        if n0 > 1:
            parts.append(M1[:-1, :].ravel())
        return np.concatenate(parts)

    mass_scale = a.sum() + b.sum()

    def exact(x):
        M0, M1 = unpack(x)
        viol = -min(M0.min(), M1.min(), 0.0)
        if viol > 0:
            return 1e6 * mass_scale * (1.0 + viol)
        return float(objective(M0, M1))

    smoothed = _smoothed_cost_grad(cost, dist) if cost.kind == "partial" else None
    penalty_w = 1e8 / max(mass_scale, 1e-12)

    def surrogate(x, eps):
        M0, M1 = unpack(x)
        val, g0, g1 = smoothed(M0, M1, eps)
        # smooth hinge keeps the dependent column/row nonnegative
        neg0 = np.minimum(M0, 0.0)
        neg1 = np.minimum(M1, 0.0)
        val += 0.5 * penalty_w * float(np.sum(neg0**2) + np.sum(neg1**2))
        g0 = g0 + penalty_w * neg0
        g1 = g1 + penalty_w * neg1
        # chain rule through the dependent last column of M0 / last row of M1
        grad = np.empty_like(x)
        if n1 > 1:
            grad[:free0] = (g0[:, :-1] - g0[:, -1:]).ravel()
        if n0 > 1:
            grad[free0:] = (g1[:-1, :] - g1[-1:, :]).ravel()
        return val, grad

    # sampling: rows of M0 from scaled Dirichlet draws/corners, same for M1
    rng = np.random.default_rng(0)
    nsamp = int(min(max(grid_resolution**2, 400), 40_000))
    S0 = _sample_row_simplex(a, n1, nsamp, rng)
    S1 = np.swapaxes(_sample_row_simplex(b, n0, nsamp, rng), 1, 2)
    vals = objective(S0, S1)
    order = np.argsort(vals)
    best = float(vals[order[0]])

    starts = [(S0[k], S1[k]) for k in order[:3]]
    starts.append((np.outer(a, b) / b.sum(), np.outer(a, b) / a.sum()))

    his = []
    if n1 > 1:
        his.extend(np.repeat(a, n1 - 1))
    if n0 > 1:
        his.extend(np.tile(b, n0 - 1))
    if free0 + free1 <= 2:
        best = min(best, _dense_grid_min(exact, his, grid_resolution))

    bounds = [(0.0, h) for h in his]
    nm_opts = {
        "maxiter": 5_000,
        "fatol": 1e-13 * max(mass_scale, 1.0),
        "xatol": 1e-10 * max(mass_scale, 1.0),
        "adaptive": True,
    }
    # The wf objective is smooth away from the axis-aligned m = 0 kinks,
    # which Nelder-Mead negotiates fine.  The partial objective has
    # non-axis-aligned |m1 - m0| kinks that stall simplex methods, so those
    # starts first descend the smoothed convex surrogate with L-BFGS.
    for M0s, M1s in starts:
        x = pack(M0s, M1s)
        if cost.kind == "partial":
            for eps in (1e-2, 1e-4, 1e-6, 1e-8):
                res = scipy.optimize.minimize(
                    surrogate,
                    x,
                    args=(eps * mass_scale,),
                    jac=True,
                    method="L-BFGS-B",
                    bounds=bounds,
                    options={"maxiter": 3_000, "ftol": 1e-13, "gtol": 1e-11, "maxls": 60},
                )
                x = res.x
            best = min(best, exact(x))
        for _ in range(2):  # restart once: simplex re-expansion at the optimum
            res = scipy.optimize.minimize(exact, x, method="Nelder-Mead", options=nm_opts)
            x = res.x
        best = min(best, float(res.fun))
    return best


def _smoothed_cost_grad(cost, dist):
    """Value + gradients of the eps-smoothed partial cost.

    K min(m0,m1) + delta |m1-m0| = K (m0+m1)/2 + (delta - K/2) |m1-m0|;
    replacing |.| by sqrt(.^2 + eps^2) keeps the sum convex (the weight
    delta - K/2 is nonnegative) and within delta*eps of the true cost.
    """
    K = np.minimum(dist**cost.p / cost.p, 2.0 * cost.delta)
    w = cost.delta - K / 2.0

    def smoothed(M0, M1, eps):
        root = np.sqrt((M1 - M0) ** 2 + eps**2)
        val = float(np.sum(K * (M0 + M1) / 2.0 + w * root))
        slope = w * (M1 - M0) / root
        return val, K / 2.0 - slope, K / 2.0 + slope

    return smoothed


def _project_rows_simplex(M, row_sums):
    """Project each row of M onto {m >= 0, sum m = row_sum} (water-filling)."""
    n, w = M.shape
    out = np.empty_like(M)
    for i in range(n):
        v = M[i]
        srt = np.sort(v)[::-1]
        cums = np.cumsum(srt) - row_sums[i]
        ks = np.arange(1, w + 1)
        valid = srt - cums / ks > 0
        k = int(np.max(np.flatnonzero(valid))) + 1 if np.any(valid) else 1
        theta = cums[k - 1] / k
        out[i] = np.maximum(v - theta, 0.0)
    return out


def _brute_wf_reduced(a, b, dist, cost, grid_resolution):
    """Direct wf minimization after eliminating m1 in closed form.

    For fixed m0 the best column allocation of m1 solves a one-multiplier
    Lagrange system: m1_ij = b_j C_ij^2 m0_ij / S_j with
    S_j = sum_i C_ij^2 m0_ij, leaving the smooth convex reduced objective
    2 delta^2 (mass0 + mass1 - 2 sum_j sqrt(b_j S_j)) over the row-simplex
    polytope of m0 alone.  Accelerated projected gradient descent with
    backtracking does the polish; Nelder-Mead (on the free-variable
    parametrization) mops up the boundary kinks.
    """
    n0, n1 = len(a), len(b)
    C2 = truncated_cos(dist / (2.0 * cost.delta)) ** 2
    lam = 2.0 * cost.delta**2
    mass_scale = a.sum() + b.sum()
    free0 = n0 * (n1 - 1)

    def reduced(M0):
        # M0 may carry a leading sample axis
        S = np.sum(C2 * M0, axis=-2)
        return lam * (
            np.sum(M0, axis=(-2, -1)) + b.sum() - 2.0 * np.sqrt(b * S).sum(axis=-1)
        )

    if free0 == 0:
        return float(reduced(a.reshape(n0, n1)))

    def grad(M0, eps):
        S = np.sum(C2 * M0, axis=0)
        return lam * (1.0 - C2 * np.sqrt(b / np.maximum(S, eps))[None, :])

    def fista(M0, eps, iters):
        step = mass_scale / max(lam, 1e-300)
        Y = M0.copy()
        Mp = M0.copy()
        t = 1.0
        fbest = float(reduced(M0))
        Mbest = M0.copy()
        for _ in range(iters):
            g = grad(Y, eps)
            while step > 1e-18 * mass_scale:
                Mn = _project_rows_simplex(Y - step * g, a)
                fn = float(reduced(Mn))
                # sufficient-decrease test against the quadratic model
                if fn <= float(reduced(Y)) + float(np.sum(g * (Mn - Y))) + float(
                    np.sum((Mn - Y) ** 2)
                ) / (2 * step) + 1e-15 * mass_scale:
                    break
                step *= 0.5
            tn = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
            Y = Mn + ((t - 1.0) / tn) * (Mn - Mp)
            Mp, t = Mn, tn
            if fn < fbest:
                fbest, Mbest = fn, Mn.copy()
            step *= 1.3
        return fbest, Mbest

    rng = np.random.default_rng(0)
    nsamp = int(min(max(grid_resolution**2, 400), 40_000))
    S0 = _sample_row_simplex(a, n1, nsamp, rng)
    vals = reduced(S0)
    order = np.argsort(vals)
    best = float(vals[order[0]])
    starts = [S0[k] for k in order[:3]]
    starts.append(np.outer(a, b) / b.sum())

    def exact_packed(x):
        M0 = np.empty((n0, n1))
        M0[:, :-1] = x.reshape(n0, n1 - 1)
        M0[:, -1] = a - M0[:, :-1].sum(axis=1)
        if M0.min() < 0:
            return 1e6 * mass_scale * (1.0 - M0.min())
        return float(reduced(M0))

    if free0 <= 2:
        best = min(best, _dense_grid_min(exact_packed, np.repeat(a, n1 - 1), grid_resolution))

    nm_opts = {
        "maxiter": 5_000,
        "fatol": 1e-14 * max(mass_scale, 1.0),
        "xatol": 1e-11 * max(mass_scale, 1.0),
        "adaptive": True,
    }
    for M0s in starts:
        M0 = M0s.copy()
        for eps in (1e-6 * mass_scale, 1e-14 * mass_scale):
            fval, M0 = fista(M0, eps, 600)
        best = min(best, fval)
        res = scipy.optimize.minimize(
            exact_packed, M0[:, :-1].ravel(), method="Nelder-Mead", options=nm_opts
        )
        best = min(best, float(res.fun))
    return best


def _brute_classical(a, b, dist, cost):
    """Equal-mass case: single coupling with both marginals pinned."""
    if abs(a.sum() - b.sum()) > 1e-12 * max(a.sum(), b.sum()):
        return math.inf
    n0, n1 = len(a), len(b)
    par = dist**cost.p / cost.p
    if n0 == 1 or n1 == 1:
        G = np.outer(a, b) / b.sum()
        return float(np.sum(G * par))
    free = (n0 - 1) * (n1 - 1)
    scale = a.sum()

    def unpack(x):
        G = np.empty((n0, n1))
        G[:-1, :-1] = x.reshape(n0 - 1, n1 - 1)
        G[:-1, -1] = a[:-1] - G[:-1, :-1].sum(axis=1)
        G[-1, :] = b - G[:-1, :].sum(axis=0)
        return G

    def objective(x):
        G = unpack(x)
        viol = -min(G.min(), 0.0)
        if viol > 0:
            return 1e6 * scale * (1.0 + viol)
        return float(np.sum(G * par))

    x0 = (np.outer(a, b) / b.sum())[:-1, :-1].ravel()
    best = objective(x0)
    rng = np.random.default_rng(0)
    for _ in range(4):
        res = scipy.optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={"maxiter": 20_000, "fatol": 1e-14 * scale, "adaptive": True},
        )
        best = min(best, float(res.fun))
        x0 = res.x + rng.uniform(-0.01, 0.01, size=free) * scale
    return best


def _sample_row_simplex(masses, width, nsamp, rng):
    """Random matrices whose row i sums to masses[i]; first rows hit corners."""
    n = len(masses)
    out = np.empty((nsamp, n, width))
    for i, mass in enumerate(masses):
        w = rng.gamma(0.35, size=(nsamp, width))
        w /= np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
        out[:, i, :] = mass * w
    for k in range(min(width, nsamp)):
        out[k] = 0.0
        out[k, :, k % width] = masses
    return out


def _dense_grid_min(penalized, his, resolution):
    """Dense scan over <= 2 free mass variables, then golden polish."""
    axes = [np.linspace(0.0, h, resolution + 1) for h in his]
    if len(axes) == 1:
        vals = np.array([penalized(np.array([t])) for t in axes[0]])
        k = int(np.argmin(vals))
        lo, up = axes[0][max(k - 1, 0)], axes[0][min(k + 1, resolution)]
        t = _golden(lambda s: penalized(np.array([s])), lo, up)
        return min(float(vals[k]), float(penalized(np.array([t]))))
    X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
    vals = np.array(
        [penalized(np.array([x, y])) for x, y in zip(X.ravel(), Y.ravel())]
    ).reshape(X.shape)
    k0, k1 = np.unravel_index(int(np.argmin(vals)), vals.shape)
    x_cur, y_cur = axes[0][k0], axes[1][k1]
    lo0, up0 = axes[0][max(k0 - 1, 0)], axes[0][min(k0 + 1, resolution)]
    lo1, up1 = axes[1][max(k1 - 1, 0)], axes[1][min(k1 + 1, resolution)]
    for _ in range(3):
        x_cur = _golden(lambda s: penalized(np.array([s, y_cur])), lo0, up0)
        y_cur = _golden(lambda s: penalized(np.array([x_cur, s])), lo1, up1)
    return min(float(vals[k0, k1]), float(penalized(np.array([x_cur, y_cur]))))


# ---------------------------------------------------------------------------
# Metric / continuity / limit-functional checks
# ---------------------------------------------------------------------------


def check_triangle(
    rho0: DiscreteMeasure,
    rho1: DiscreteMeasure,
    rho2: DiscreteMeasure,
    cost: CostFunction,
    p_metric: float | None = None,
    config: SolverConfig | None = None,
) -> float:
    """Triangle-inequality slack d(0,1) + d(1,2) - d(0,2), d = value^(1/p)."""
    p = p_metric or cost.p_metric
    legs = []
    for lhs, rhs in ((rho0, rho1), (rho1, rho2), (rho0, rho2)):
        _, cert = solve_static(lhs, rhs, cost, config)
        if not cert.converged:
            raise NotConverged("triangle check: a leg did not converge", gap=cert.gap)
        legs.append(max(cert.primal, 0.0) ** (1.0 / p))
    return legs[0] + legs[1] - legs[2]


@dataclass(frozen=True)
class WeakstarReport:
    """Values C(rho_n, rho) along a refinement family plus the pass verdict."""

    values: tuple[float, ...]
    passed: bool


def check_weakstar_continuity(
    rho: DiscreteMeasure,
    refinement_levels,
    cost: CostFunction,
    mode: str = "quantize",
    seed: int = 0,
    config: SolverConfig | None = None,
) -> WeakstarReport:
    """Solve C(rho_n, rho) for approximations rho_n -> rho.

    Modes: ``quantize`` snaps atoms to an n-cell grid, ``rescale`` uses
    (1 + 1/n) rho, ``jitter`` moves every atom by ~1/n.  Passes when the
    last value is below the first by 10x or below 1e-4 absolute.
    """
    rng = np.random.default_rng(seed)
    values = []
    for level in refinement_levels:
        approx = _approximate(rho, int(level), mode, rng)
        _, cert = solve_static(approx, rho, cost, config)
        values.append(cert.primal)
    first, last = values[0], values[-1]
    passed = last <= 1e-4 or last <= first / 10.0
    return WeakstarReport(tuple(values), passed)


def _approximate(rho, n, mode, rng):
    dom = rho.domain
    if mode == "rescale":
        return rho.scaled(1.0 + 1.0 / n)
    if mode == "jitter":
        width = np.min(dom.widths) / max(n, 2)
        shift = rng.uniform(-width, width, size=rho.points.shape)
        pts = np.clip(rho.points + shift, dom.lower, dom.upper)
        return new_discrete_measure(pts, rho.masses, dom)
    if mode == "quantize":
        h = dom.widths / n
        idx = np.clip(np.floor((rho.points - np.asarray(dom.lower)) / h), 0, n - 1)
        pts = np.asarray(dom.lower) + (idx + 0.5) * h
        return new_discrete_measure(pts, rho.masses, dom)
    raise ValueError(f"unknown approximation mode {mode!r}")


def gamma_functional(gamma0, gamma1, dists, delta: float) -> float:
    """Mass-drift-compensated transport functional at scale delta.

    sum_ij c_delta(x_i, g0_ij, y_j, g1_ij) minus the diverging term
    2 delta^2 (sqrt(total g0) - sqrt(total g1))^2.  Finite for all inputs.
    """
    g0 = np.asarray(gamma0, dtype=float)
    g1 = np.asarray(gamma1, dtype=float)
    d = np.asarray(dists, dtype=float)
    core = 2.0 * delta**2 * (
        g0 + g1 - 2.0 * np.sqrt(g0 * g1) * truncated_cos(d / (2.0 * delta))
    )
    drift = 2.0 * delta**2 * (math.sqrt(g0.sum()) - math.sqrt(g1.sum())) ** 2
    return float(core.sum() - drift)


def gamma_limit_functional(gamma0, gamma1, dists) -> float:
    """Quadratic-transport limit: 0 if a plan is zero; sqrt(alpha)/2 times
    sum |x-y|^2 g0 when g1 = alpha g0; +inf otherwise."""
    g0 = np.asarray(gamma0, dtype=float)
    g1 = np.asarray(gamma1, dtype=float)
    d = np.asarray(dists, dtype=float)
    t0, t1 = g0.sum(), g1.sum()
    if t0 == 0.0 or t1 == 0.0:
        return 0.0
    alpha = t1 / t0
    if np.max(np.abs(g1 - alpha * g0)) > 1e-12 * max(t0, t1):
        return math.inf
    return float(math.sqrt(alpha) / 2.0 * np.sum(d**2 * g0))


def sqrt_measure(gamma0, gamma1) -> float:
    """sum_ij sqrt(g0_ij * g1_ij) on a shared support.

    Bounded by sqrt(total g0) * sqrt(total g1), with equality iff the
    plans are proportional or one vanishes.
    """
    g0 = np.asarray(gamma0, dtype=float)
    g1 = np.asarray(gamma1, dtype=float)
    if g0.shape != g1.shape:
        raise ValueError("plans must share a support (equal shapes)")
    return float(np.sum(np.sqrt(g0 * g1)))


def partial_lagrangian_value(
    rho0: DiscreteMeasure,
    rho1: DiscreteMeasure,
    delta: float,
    p: int = 2,
) -> float:
    """LP over sub-couplings: min sum (|x-y|^p / p - 2 delta) gamma with
    both marginals dominated; equals C_partial - delta (mass0 + mass1)."""
    n0, n1 = len(rho0), len(rho1)
    if n0 == 0 or n1 == 0:
        return 0.0
    dist = pair_distances(rho0, rho1)
    obj = (dist**p / p - 2.0 * delta).ravel()
    i_idx = np.repeat(np.arange(n0), n1)
    j_idx = np.tile(np.arange(n1), n0)
    flat = np.arange(n0 * n1)
    A_ub = sp.csr_matrix(
        (
            np.ones(2 * n0 * n1),
            (np.concatenate([i_idx, n0 + j_idx]), np.concatenate([flat, flat])),
        ),
        shape=(n0 + n1, n0 * n1),
    )
    b_ub = np.concatenate([rho0.masses, rho1.masses])
    res = scipy.optimize.linprog(
        obj,
        A_ub=A_ub,
        b_ub=b_ub,
        bounds=(0, None),
        method="highs",
        options=_LP_OPTIONS,
    )
    if not res.success:
        raise NotConverged(f"sub-coupling LP failed: {res.message}")
    return float(res.fun)
