"""Dynamic transport-with-source solver on a staggered space-time grid.

The continuity equation with source, d_t rho + div omega = zeta with
homogeneous Neumann boundary (zero-flux faces), is discretized with rho on
T+1 time layers (cell-centered), omega on spatial faces (time-slot
centered) and zeta at cell/time centers.  The action functional is the
integral of a convex, positively 1-homogeneous infinitesimal cost
f(rho, omega, zeta), evaluated on a collocated copy of the staggered
variables (midpoint averaging in time for rho, across faces for omega).

Minimization is Douglas-Rachford splitting between (i) the cell-wise prox
of f on the collocated copy (direct scalar solves; f is the support
function of its polar set, so the Moreau identity against the polar
projection is a built-in consistency check) and (ii) projection onto the
affine set {continuity + boundary layers + collocation consistency},
a single sparse factorization reused across iterations.

Two costs are built in: ``wf`` with f = (|omega|^2 + delta^2 zeta^2) /
(2 rho), and ``partial_dyn`` (p = 2) with f = |omega|^2 / (2 rho) +
delta |zeta|.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .errors import NoConvergence
from .measures import DiscreteMeasure, DomainBox, GridDensity, rasterize

__all__ = [
    "InfinitesimalCost",
    "SpaceTimeField",
    "FlowState",
    "DynamicConfig",
    "DynamicReport",
    "prox_f",
    "project_polar",
    "solve_dynamic",
    "continuity_residual",
    "dynamic_dual_residual",
    "DualFeasibilityReport",
    "integrate_flow",
]


@dataclass(frozen=True)
class InfinitesimalCost:
    """Convex 1-homogeneous integrand on (rho, omega, zeta) triples.

    ``wf``: (|omega|^2 + delta^2 zeta^2) / (2 rho); ``partial_dyn``:
    |omega|^2 / (2 rho) + delta |zeta| (p = 2 only).  Both vanish iff
    (omega, zeta) = 0 with rho >= 0 and are +inf for rho < 0.
    """

    kind: str
    delta: float = 1.0
    p: int = 2

    def __post_init__(self):
        if self.kind not in ("wf", "partial_dyn"):
            raise ValueError(f"unknown dynamic cost kind {self.kind!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.kind == "partial_dyn" and self.p != 2:
            raise ValueError("partial_dyn is implemented for p = 2 only")

    def evaluate(self, rho, omega, zeta):
        """Pointwise cost; ``omega`` is a vector (tuple/stack of components).

        Vectorized; returns +inf where rho < 0 or where rho = 0 carries
        nonzero momentum (or nonzero source, for the wf kind).
        """
        rho = np.asarray(rho, dtype=float)
        w2 = _sqnorm(omega)
        zeta = np.asarray(zeta, dtype=float)
        pos = rho > 0
        safe = np.where(pos, rho, 1.0)
        if self.kind == "wf":
            core = (w2 + self.delta**2 * zeta**2) / (2.0 * safe)
            rest = np.where((w2 == 0) & (zeta == 0) & (rho == 0), 0.0, np.inf)
        else:
            core = w2 / (2.0 * safe) + self.delta * np.abs(zeta)
            rest = np.where((w2 == 0) & (rho == 0), self.delta * np.abs(zeta), np.inf)
        out = np.where(pos, core, rest)
        return out if out.ndim else float(out)


def _sqnorm(omega):
    if isinstance(omega, (tuple, list)):
        return sum(np.asarray(c, dtype=float) ** 2 for c in omega)
    return np.asarray(omega, dtype=float) ** 2


def _as_components(omega):
    if isinstance(omega, (tuple, list)):
        return [np.asarray(c, dtype=float) for c in omega]
    return [np.asarray(omega, dtype=float)]


def _scalar_root(h, dh, lo, hi, bisections=50, newtons=10):
    """Vectorized root of an increasing function on [lo, hi]."""
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        neg = h(mid) < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    r = 0.5 * (lo + hi)
    for _ in range(newtons):
        val = h(r)
        neg = val < 0.0
        lo = np.where(neg, r, lo)
        hi = np.where(neg, hi, r)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = val / dh(r)
        r_new = r - step
        take = np.isfinite(r_new) & (r_new > lo) & (r_new < hi)
        r = np.where(take, r_new, 0.5 * (lo + hi))
    if np.any(~np.isfinite(r)):
        raise NoConvergence("prox scalar solve produced non-finite root")
    return r


def prox_f(cost: InfinitesimalCost, tau: float, z):
    """prox of tau*f at z = (rho, omega, zeta); omega may be a component tuple.

    Solved directly from the stationarity system (a monotone scalar root
    per point); satisfies the Moreau identity
    prox(z) + tau * project_polar(z / tau) = z.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rho, omega, zeta = z
    rho = np.asarray(rho, dtype=float)
    comps = _as_components(omega)
    zeta = np.asarray(zeta, dtype=float)
    shape = np.broadcast_shapes(rho.shape, comps[0].shape, zeta.shape)
    rho = np.broadcast_to(rho, shape).astype(float)
    comps = [np.broadcast_to(c, shape).astype(float) for c in comps]
    zeta = np.broadcast_to(zeta, shape).astype(float)
    d = cost.delta

    if cost.kind == "partial_dyn":
        zeta_out = np.sign(zeta) * np.maximum(np.abs(zeta) - tau * d, 0.0)
        rho_out, comps_out = _prox_perspective(rho, comps, None, tau, 1.0)
        return rho_out, _restore(comps_out, omega), zeta_out

    rho_out, comps_out, zeta_out = _prox_perspective(rho, comps, zeta, tau, d)
    return rho_out, _restore(comps_out, omega), zeta_out


def _restore(comps, omega_in):
    if isinstance(omega_in, (tuple, list)):
        return tuple(comps)
    return comps[0]


def _prox_perspective(rho, comps, zeta, tau, delta):
    """prox of tau * (|w|^2 + delta^2 z^2) / (2 rho), zeta optional."""
    b2 = sum(c**2 for c in comps)
    c2 = zeta**2 if zeta is not None else 0.0
    # zero iff the scaled point lies in the polar set
    inside = rho + (b2 + c2 / delta**2) / (2.0 * tau) <= 0.0
    hi = np.maximum(rho, 0.0) + (b2 + c2 / delta**2) / (2.0 * tau) + 1e-30

    def h(r):
        val = (r - rho) / tau - 0.5 * b2 / (r + tau) ** 2
        if zeta is not None:
            val = val - 0.5 * delta**2 * c2 / (r + tau * delta**2) ** 2
        return val

    def dh(r):
        val = 1.0 / tau + b2 / (r + tau) ** 3
        if zeta is not None:
            val = val + delta**2 * c2 / (r + tau * delta**2) ** 3
        return val

    r = _scalar_root(h, dh, np.zeros_like(hi), hi)
    r = np.where(inside, 0.0, r)
    scale_w = np.where(inside, 0.0, r / (r + tau))
    comps_out = [c * scale_w for c in comps]
    if zeta is None:
        return np.where(inside, 0.0, r), comps_out
    scale_z = np.where(inside, 0.0, r / (r + tau * delta**2))
    return np.where(inside, 0.0, r), comps_out, zeta * scale_z


def project_polar(cost: InfinitesimalCost, point):
    """Euclidean projection onto the polar set B of f.

    wf: B = {(a, b, c): a + (|b|^2 + c^2/delta^2)/2 <= 0}; partial_dyn:
    the paraboloid in (a, b) times the clamp |c| <= delta.
    """
    a, b, c = point
    a = np.asarray(a, dtype=float)
    comps = _as_components(b)
    c = np.asarray(c, dtype=float)
    shape = np.broadcast_shapes(a.shape, comps[0].shape, c.shape)
    a = np.broadcast_to(a, shape).astype(float)
    comps = [np.broadcast_to(x, shape).astype(float) for x in comps]
    c = np.broadcast_to(c, shape).astype(float)
    d = cost.delta

    if cost.kind == "partial_dyn":
        a_out, comps_out = _project_paraboloid(a, comps, None, 1.0)
        return a_out, _restore(comps_out, b), np.clip(c, -d, d)
    a_out, comps_out, c_out = _project_paraboloid(a, comps, c, d)
    return a_out, _restore(comps_out, b), c_out


def _project_paraboloid(a, comps, c, delta):
    """Project onto {a + (|b|^2 + c^2/delta^2)/2 <= 0} (c optional)."""
    b2 = sum(x**2 for x in comps)
    c2 = c**2 if c is not None else 0.0
    val = a + 0.5 * (b2 + c2 / delta**2)
    inside = val <= 0.0
    hi = np.maximum(val, 0.0) + 1.0

    def g(mu):
        out = a - mu + 0.5 * b2 / (1.0 + mu) ** 2
        if c is not None:
            out = out + 0.5 * (c2 / delta**2) / (1.0 + mu / delta**2) ** 2
        return out

    def dg(mu):
        out = -1.0 - b2 / (1.0 + mu) ** 3
        if c is not None:
            out = out - (c2 / delta**4) / (1.0 + mu / delta**2) ** 3
        return out

    mu = _scalar_root(lambda m: -g(m), lambda m: -dg(m), np.zeros_like(hi), hi)
    mu = np.where(inside, 0.0, mu)
    a_out = np.where(inside, a, a - mu)
    comps_out = [x / (1.0 + mu) for x in comps]
    if c is None:
        return a_out, comps_out
    return a_out, comps_out, c / (1.0 + mu / delta**2)


# ---------------------------------------------------------------------------
# Staggered grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpaceTimeField:
    """Staggered discretization of a mass path on [0, 1] x domain.

    ``rho``: (T+1, *cells) cell masses per time layer; ``omega``: tuple of
    per-axis face flux arrays, axis a shaped (T, ..., N_a + 1, ...) in
    mass/time with zero entries on boundary faces; ``zeta``: (T, *cells)
    mass rate per cell.  The time horizon is fixed to [0, 1].
    """

    domain: DomainBox
    T: int
    cells: tuple[int, ...]
    rho: np.ndarray
    omega: tuple[np.ndarray, ...]
    zeta: np.ndarray

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def spacings(self) -> np.ndarray:
        return self.domain.widths / np.asarray(self.cells)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    def mass_per_layer(self) -> np.ndarray:
        return self.rho.reshape(self.T + 1, -1).sum(axis=1)

    def initial_layer(self) -> GridDensity:
        return GridDensity(self.domain, self.cells, np.maximum(self.rho[0], 0.0))

    def final_layer(self) -> GridDensity:
        return GridDensity(self.domain, self.cells, np.maximum(self.rho[-1], 0.0))

    def collocated(self):
        """Midpoint-averaged (rho, omega, zeta) per-volume densities at
        cell/time centers; the triple the action integrand sees."""
        vol = self.cell_volume
        h = self.spacings
        rho_c = 0.5 * (self.rho[:-1] + self.rho[1:]) / vol
        omega_c = []
        for ax, w in enumerate(self.omega):
            sl_lo = [slice(None)] * w.ndim
            sl_hi = [slice(None)] * w.ndim
            sl_lo[1 + ax] = slice(0, -1)
            sl_hi[1 + ax] = slice(1, None)
            mean_flux = 0.5 * (w[tuple(sl_lo)] + w[tuple(sl_hi)])
            area = vol / h[ax]
            omega_c.append(mean_flux / area)
        zeta_c = self.zeta / vol
        return rho_c, tuple(omega_c), zeta_c

    def velocity_fields(self, floor: float = 1e-10):
        """(v components, alpha) at cell/time centers from the collocated
        triple, with velocities zeroed where rho is below ``floor``."""
        rho_c, omega_c, zeta_c = self.collocated()
        ref = floor * max(float(rho_c.max()), 1e-300)
        ok = rho_c > ref
        safe = np.where(ok, rho_c, 1.0)
        v = tuple(np.where(ok, w / safe, 0.0) for w in omega_c)
        alpha = np.where(ok, zeta_c / safe, 0.0)
        return v, alpha

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "N": list(self.cells),
            "domain": self.domain.to_json(),
            "rho": self.rho.ravel().tolist(),
            "omega": [w.ravel().tolist() for w in self.omega],
            "zeta": self.zeta.ravel().tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "SpaceTimeField":
        domain = DomainBox.from_json(obj["domain"])
        T = int(obj["T"])
        cells = tuple(int(n) for n in obj["N"])
        rho = np.asarray(obj["rho"], dtype=float).reshape((T + 1, *cells))
        omega = []
        for ax in range(len(cells)):
            shp = list(cells)
            shp[ax] += 1
            omega.append(
                np.asarray(obj["omega"][ax], dtype=float).reshape((T, *shp))
            )
        zeta = np.asarray(obj["zeta"], dtype=float).reshape((T, *cells))
        return SpaceTimeField(domain, T, cells, rho, tuple(omega), zeta)


def continuity_residual(field: SpaceTimeField) -> float:
    """l2 norm of the discrete continuity rows (mass units / time)."""
    T = field.T
    dt = field.dt
    res = (field.rho[1:] - field.rho[:-1]) / dt - field.zeta
    for ax, w in enumerate(field.omega):
        sl_hi = [slice(None)] * w.ndim
        sl_lo = [slice(None)] * w.ndim
        sl_hi[1 + ax] = slice(1, None)
        sl_lo[1 + ax] = slice(0, -1)
        res = res + (w[tuple(sl_hi)] - w[tuple(sl_lo)])
    return float(np.sqrt(np.sum(res**2)))


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicConfig:
    max_iter: int = 4000
    tol: float = 1e-7
    check_every: int = 25
    gamma: float = 0.02  # Douglas-Rachford step, scaled by mean density
    relax: float = 1.8


@dataclass(frozen=True)
class DynamicReport:
    value: float
    residual: float
    iterations: int
    converged: bool
    dual_potential: np.ndarray | None = field(default=None, repr=False)
    dual_value: float | None = None


class _Discretization:
    """Sparse operators for one (T, cells) staggered grid."""

    def __init__(self, domain: DomainBox, T: int, cells: tuple[int, ...]):
        self.domain = domain
        self.T = T
        self.cells = cells
        self.d = len(cells)
        self.nc = int(np.prod(cells))
        self.h = domain.widths / np.asarray(cells)
        self.vol = float(np.prod(self.h))
        self.dt = 1.0 / T

        self.face_shapes = []
        self.face_counts = []
        for ax in range(self.d):
            shp = list(cells)
            shp[ax] -= 1  # interior faces only
            self.face_shapes.append(tuple(shp))
            self.face_counts.append(int(np.prod(shp)))

        nrho = (T + 1) * self.nc
        self.off_rho = 0
        off = nrho
        self.off_w = []
        for ax in range(self.d):
            self.off_w.append(off)
            off += T * self.face_counts[ax]
        self.off_zeta = off
        self.nu = off + T * self.nc
        self.nv = (2 + self.d) * T * self.nc

        self._build_operators()

    # -- index helpers ------------------------------------------------
    def rho_idx(self, t, cell_flat):
        return self.off_rho + t * self.nc + cell_flat

    def w_idx(self, ax, t, face_flat):
        return self.off_w[ax] + t * self.face_counts[ax] + face_flat

    def zeta_idx(self, t, cell_flat):
        return self.off_zeta + t * self.nc + cell_flat

    def _build_operators(self):
        T, nc, d = self.T, self.nc, self.d
        cells = self.cells
        cell_ids = np.arange(nc).reshape(cells)

        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(np.asarray(r).ravel())
            cols.append(np.asarray(c).ravel())
            vals.append(np.broadcast_to(v, np.asarray(r).shape).ravel().astype(float))

        # continuity rows: one per (t, cell)
        t_grid = np.repeat(np.arange(T), nc)
        k_grid = np.tile(np.arange(nc), T)
        row_ct = t_grid * nc + k_grid
        add(row_ct, self.rho_idx(t_grid + 1, k_grid), 1.0 / self.dt)
        add(row_ct, self.rho_idx(t_grid, k_grid), -1.0 / self.dt)
        add(row_ct, self.zeta_idx(t_grid, k_grid), -1.0)
        for ax in range(d):
            face_ids = np.arange(self.face_counts[ax]).reshape(self.face_shapes[ax])
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(0, -1)  # cells owning a right interior face
            hi[ax] = slice(1, None)  # cells owning a left interior face
            cell_right = cell_ids[tuple(lo)].ravel()
            cell_left = cell_ids[tuple(hi)].ravel()
            for t in range(T):
                r_right = t * nc + cell_right
                r_left = t * nc + cell_left
                f = self.w_idx(ax, t, face_ids.ravel())
                add(r_right, f, 1.0 / self.h[ax])
                add(r_left, f, -1.0 / self.h[ax])
        # boundary rows: rho(0) and rho(T)
        base = T * nc
        k = np.arange(nc)
        add(base + k, self.rho_idx(0, k), 1.0)
        add(base + nc + k, self.rho_idx(T, k), 1.0)
        self.nb = T * nc + 2 * nc
        self.B = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.nb, self.nu),
        )

        # collocation operator: V = (rho_c, omega_c per axis, zeta_c)
        rows, cols, vals = [], [], []
        off_v = 0
        add(off_v + np.arange(T * nc), self.rho_idx(t_grid, k_grid), 0.5)
        add(off_v + np.arange(T * nc), self.rho_idx(t_grid + 1, k_grid), 0.5)
        off_v += T * nc
        for ax in range(d):
            face_ids = np.arange(self.face_counts[ax]).reshape(self.face_shapes[ax])
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            cell_right = cell_ids[tuple(lo)].ravel()  # cell left of the face
            cell_left = cell_ids[tuple(hi)].ravel()  # cell right of the face
            for t in range(T):
                f = self.w_idx(ax, t, face_ids.ravel())
                add(off_v + t * nc + cell_right, f, 0.5)
                add(off_v + t * nc + cell_left, f, 0.5)
            off_v += T * nc
        add(off_v + np.arange(T * nc), self.zeta_idx(t_grid, k_grid), 1.0)
        self.I = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.nv, self.nu),
        )

        M = sp.identity(self.nu, format="csr") + self.I.T @ self.I
        kkt = sp.bmat([[M, self.B.T], [self.B, None]], format="csc")
        self._kkt = spl.splu(kkt)

    def project(self, U0, V0, bvec):
        rhs = np.concatenate([U0 + self.I.T @ V0, bvec])
        sol = self._kkt.solve(rhs)
        U = sol[: self.nu]
        nu = sol[self.nu :]
        return U, self.I @ U, nu

    # -- V layout helpers ----------------------------------------------
    def split_v(self, V):
        T, nc, d = self.T, self.nc, self.d
        rho_c = V[: T * nc].reshape(T, nc)
        comps = [
            V[(1 + ax) * T * nc : (2 + ax) * T * nc].reshape(T, nc)
            for ax in range(d)
        ]
        zeta_c = V[(1 + d) * T * nc :].reshape(T, nc)
        return rho_c, comps, zeta_c

    def join_v(self, rho_c, comps, zeta_c):
        return np.concatenate(
            [rho_c.ravel()] + [c.ravel() for c in comps] + [zeta_c.ravel()]
        )

    def field_from_u(self, U):
        T, nc = self.T, self.nc
        rho = U[self.off_rho : self.off_rho + (T + 1) * nc].reshape(
            (T + 1, *self.cells)
        ) * self.vol
        omega = []
        for ax in range(self.d):
            shp = list(self.cells)
            shp[ax] += 1
            full = np.zeros((T, *shp))
            inner = [slice(None)] * (1 + self.d)
            inner[1 + ax] = slice(1, -1)
            area = self.vol / self.h[ax]
            full[tuple(inner)] = U[
                self.off_w[ax] : self.off_w[ax] + T * self.face_counts[ax]
            ].reshape((T, *self.face_shapes[ax])) * area
            omega.append(full)
        zeta = U[self.off_zeta :].reshape((T, *self.cells)) * self.vol
        return SpaceTimeField(
            self.domain, T, self.cells, rho, tuple(omega), zeta
        )


def _as_grid(marginal, domain, cells) -> GridDensity:
    if isinstance(marginal, GridDensity):
        if marginal.cells != tuple(cells):
            raise ValueError("grid marginal resolution does not match N")
        return marginal
    if isinstance(marginal, DiscreteMeasure):
        return rasterize(marginal, cells)
    raise TypeError("marginal must be a DiscreteMeasure or GridDensity")


def _guarded_action(cost, rho_c, comps, zeta_c, weight, floor):
    """Action with an evaluation floor for cells that carry stray momentum
    over (numerically) empty density."""
    w2 = sum(c**2 for c in comps)
    z2 = zeta_c**2
    safe = np.maximum(rho_c, floor)
    if cost.kind == "wf":
        val = (w2 + cost.delta**2 * z2) / (2.0 * safe)
    else:
        val = w2 / (2.0 * safe) + cost.delta * np.abs(zeta_c)
    return float(val.sum() * weight)


def solve_dynamic(
    rho0,
    rho1,
    kind: InfinitesimalCost | str,
    T: int,
    N,
    config: DynamicConfig | None = None,
    delta: float = 1.0,
) -> tuple[SpaceTimeField, DynamicReport]:
    """Minimize the action over discrete solutions of the continuity
    equation between two marginals.

    ``rho0``/``rho1`` are measures (rasterized onto the grid) or
    GridDensity layers; ``N`` is the cell count per axis.  Returns the
    staggered field and a report carrying the action value, the discrete
    continuity residual, and the dual potential extracted from the
    projection multipliers.
    """
    cfg = config or DynamicConfig()
    cost = InfinitesimalCost(kind, delta=delta) if isinstance(kind, str) else kind
    if T < 2:
        raise ValueError("need at least 2 time steps")
    domain = rho0.domain
    cells = tuple(int(n) for n in np.atleast_1d(N))
    if len(cells) == 1 and domain.dim == 2:
        cells = cells * 2
    if any(n < 2 for n in cells):
        raise ValueError("need at least 2 cells per axis")
    g0 = _as_grid(rho0, domain, cells)
    g1 = _as_grid(rho1, domain, cells)

    disc = _Discretization(domain, T, cells)
    scale = max(g0.total_mass, g1.total_mass, 1e-30)
    r0 = (g0.values / scale / disc.vol).ravel()
    r1 = (g1.values / scale / disc.vol).ravel()
    bvec = np.concatenate([np.zeros(T * disc.nc), r0, r1])

    # feasible start: linear interpolation with a constant source
    U = np.zeros(disc.nu)
    ts = np.linspace(0.0, 1.0, T + 1)[:, None]
    U[: (T + 1) * disc.nc] = ((1 - ts) * r0[None, :] + ts * r1[None, :]).ravel()
    U[disc.off_zeta :] = np.tile(r1 - r0, T)
    V = disc.I @ U
    sU, sV = U.copy(), V.copy()

    weight = disc.dt * disc.vol
    gamma = cfg.gamma * max(float(np.mean(r0) + np.mean(r1)), 1e-12)
    tauw = gamma * weight
    floor = 1e-12 * max(float(r0.max()), float(r1.max()), 1e-300)

    def prox_v(Vv):
        rho_c, comps, zeta_c = disc.split_v(Vv)
        r, w, z = prox_f(cost, tauw, (rho_c, comps, zeta_c))
        return disc.join_v(r, list(w), z)

    last_val = math.inf
    converged = False
    it = 0
    xU, xV = sU, prox_v(sV)
    for it in range(1, cfg.max_iter + 1):
        xU = sU
        xV = prox_v(sV)
        yU, yV, nu = disc.project(2.0 * xU - sU, 2.0 * xV - sV, bvec)
        sU = sU + cfg.relax * (yU - xU)
        sV = sV + cfg.relax * (yV - xV)
        if it % cfg.check_every == 0 or it == cfg.max_iter:
            rc, cc, zc = disc.split_v(disc.I @ yU)
            val = _guarded_action(cost, rc, cc, zc, weight, floor)
            # masses are normalized, so 1e-9 is an absolute zero floor
            drift = abs(val - last_val) / max(abs(val), 1e-9)
            split_gap = float(np.linalg.norm(yV - xV)) / max(
                float(np.linalg.norm(xV)), 1e-15
            )
            last_val = val
            if drift < cfg.tol and split_gap < math.sqrt(cfg.tol):
                converged = True
                break

    Ufin, Vfin, _ = disc.project(xU, xV, bvec)
    rc, cc, zc = disc.split_v(Vfin)
    value = _guarded_action(cost, rc, cc, zc, weight, floor) * scale
    field = disc.field_from_u(Ufin)
    field = SpaceTimeField(
        field.domain,
        field.T,
        field.cells,
        field.rho * scale,
        tuple(w * scale for w in field.omega),
        field.zeta * scale,
    )
    residual = continuity_residual(field)

    # dual potential: at the fixpoint (sV - xV)/gamma lies in the
    # subdifferential of the action, whose zeta slot is the potential
    eta = (sV - xV) / gamma
    _, _, phi_slot = disc.split_v(eta)
    phi_cells = (phi_slot / weight).reshape(T, *cells) * 1.0
    phi_nodes = np.empty((T + 1, *cells))
    phi_nodes[1:-1] = 0.5 * (phi_cells[:-1] + phi_cells[1:])
    phi_nodes[0] = 1.5 * phi_cells[0] - 0.5 * phi_cells[1]
    phi_nodes[-1] = 1.5 * phi_cells[-1] - 0.5 * phi_cells[-2]
    dual_value = float(
        np.sum(phi_nodes[-1] * g1.values) - np.sum(phi_nodes[0] * g0.values)
    )

    report = DynamicReport(
        value=value,
        residual=residual,
        iterations=it,
        converged=converged,
        dual_potential=phi_nodes,
        dual_value=dual_value,
    )
    return field, report


# ---------------------------------------------------------------------------
# Dual feasibility check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DualFeasibilityReport:
    """Signed worst constraint value (<= 0 means feasible) and the dual
    objective when marginals are supplied."""

    violation: float
    objective: float | None = None


def dynamic_dual_residual(
    phi: np.ndarray,
    kind: InfinitesimalCost | str,
    domain: DomainBox,
    rho0_cells: np.ndarray | None = None,
    rho1_cells: np.ndarray | None = None,
    delta: float = 1.0,
) -> DualFeasibilityReport:
    """Check (d_t phi, grad phi, phi) against the polar set of f on a grid.

    ``phi`` has shape (T+1, *cells).  For the wf kind the constraint is
    d_t phi + (|grad phi|^2 + phi^2/delta^2)/2 <= 0 at every cell/time
    center; for partial_dyn it is d_t phi + |grad phi|^2/2 <= 0 together
    with |phi| <= delta.
    """
    cost = InfinitesimalCost(kind, delta=delta) if isinstance(kind, str) else kind
    phi = np.asarray(phi, dtype=float)
    T = phi.shape[0] - 1
    cells = phi.shape[1:]
    h = domain.widths / np.asarray(cells)
    dt = 1.0 / T
    a = (phi[1:] - phi[:-1]) / dt
    mid = 0.5 * (phi[:-1] + phi[1:])
    grad2 = np.zeros_like(mid)
    for ax in range(len(cells)):
        sl_hi = [slice(None)] * mid.ndim
        sl_lo = [slice(None)] * mid.ndim
        sl_hi[1 + ax] = slice(1, None)
        sl_lo[1 + ax] = slice(0, -1)
        face = (mid[tuple(sl_hi)] - mid[tuple(sl_lo)]) / h[ax]
        cent = np.zeros_like(mid)
        pad_lo = [slice(None)] * mid.ndim
        pad_hi = [slice(None)] * mid.ndim
        pad_lo[1 + ax] = slice(0, -1)
        pad_hi[1 + ax] = slice(1, None)
        cent[tuple(pad_lo)] += 0.5 * face
        cent[tuple(pad_hi)] += 0.5 * face
        grad2 = grad2 + cent**2
    dlt = cost.delta
    if cost.kind == "wf":
        violation = float(np.max(a + 0.5 * (grad2 + mid**2 / dlt**2)))
    else:
        violation = max(
            float(np.max(a + 0.5 * grad2)),
            float(np.max(np.abs(phi))) - dlt,
        )
    objective = None
    if rho0_cells is not None and rho1_cells is not None:
        objective = float(
            np.sum(phi[-1] * np.asarray(rho1_cells))
            - np.sum(phi[0] * np.asarray(rho0_cells))
        )
    return DualFeasibilityReport(violation=violation, objective=objective)


# ---------------------------------------------------------------------------
# Lagrangian flow integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowState:
    """Particle positions/masses after a number of integration steps."""

    positions: np.ndarray
    masses: np.ndarray
    step: int


def integrate_flow(
    v_field,
    alpha_field,
    particles,
    steps: int,
    domain: DomainBox,
) -> list[FlowState]:
    """Midpoint (RK2) integration of the particle transport/growth system.

    ``v_field``: tuple of per-axis velocity arrays (T, *cells) at
    cell/time centers (bilinear in space, linear in time); ``alpha_field``:
    growth rate (T, *cells).  ``particles``: (positions (k, d), masses
    (k,)).  Positions are clamped to the domain box; masses evolve by
    m <- m * exp(alpha dt), so they stay positive.
    """
    v_field = _as_components(v_field) if not isinstance(v_field, tuple) else list(v_field)
    alpha_field = np.asarray(alpha_field, dtype=float)
    pos0, m0 = particles
    pos = np.atleast_2d(np.asarray(pos0, dtype=float)).copy()
    if pos.shape[1] != domain.dim:
        pos = pos.reshape(-1, domain.dim)
    mass = np.asarray(m0, dtype=float).copy()
    T = alpha_field.shape[0]
    cells = alpha_field.shape[1:]
    dt = 1.0 / steps
    out = [FlowState(pos.copy(), mass.copy(), 0)]
    for s in range(steps):
        t = s * dt
        v_now = _sample_fields(v_field, t, pos, domain, cells, T)
        mid = pos + 0.5 * dt * _stack(v_now)
        mid = np.clip(mid, domain.lower, domain.upper)
        v_mid = _sample_fields(v_field, t + 0.5 * dt, mid, domain, cells, T)
        a_mid = _sample_fields([alpha_field], t + 0.5 * dt, mid, domain, cells, T)[0]
        pos = np.clip(pos + dt * _stack(v_mid), domain.lower, domain.upper)
        mass = mass * np.exp(dt * a_mid)
        out.append(FlowState(pos.copy(), mass.copy(), s + 1))
    return out


def _stack(comps):
    return np.stack(comps, axis=-1)


def _sample_fields(fields, t, pos, domain, cells, T):
    """Linear-in-time, multilinear-in-space sampling at particle positions."""
    # time slots are centered at (j + 1/2)/T
    s = t * T - 0.5
    j0 = int(np.clip(math.floor(s), 0, T - 1))
    j1 = min(j0 + 1, T - 1)
    wt = float(np.clip(s - j0, 0.0, 1.0))
    out = []
    for f in fields:
        f0 = _sample_space(f[j0], pos, domain, cells)
        f1 = _sample_space(f[j1], pos, domain, cells)
        out.append((1.0 - wt) * f0 + wt * f1)
    return out


def _sample_space(grid, pos, domain, cells):
    h = domain.widths / np.asarray(cells)
    rel = (pos - np.asarray(domain.lower)) / h - 0.5
    out = np.zeros(pos.shape[0])
    idx0 = np.floor(rel).astype(int)
    frac = rel - idx0
    d = len(cells)
    for corner in range(1 << d):
        w = np.ones(pos.shape[0])
        ids = []
        for ax in range(d):
            bit = (corner >> ax) & 1
            i = np.clip(idx0[:, ax] + bit, 0, cells[ax] - 1)
            w = w * (frac[:, ax] if bit else (1.0 - frac[:, ax]))
            ids.append(i)
        out += w * grid[tuple(ids)]
    return out
