"""Node-chain assembly: total Lagrangian, momenta, energy, mass matrix,
force vector, residuals, pairings and velocity projections.

The chain couples N+1 nodes through a two-node Lagrangian on every adjacent
pair.  Two boundary treatments exist: FixedEnds prescribes the end-node
paths as curves of t (interior nodes are the dynamical ones), FreeEnds
makes every node dynamical.  All operations are pure functions of an
immutable ChainSystem and a ChainState.

Sign convention: el_residual = dL~/dy - d/dt dL~/dydot, and the mass matrix
/ force vector are defined so the equations of motion read M @ yddot = F.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .errors import (
    GridMismatch, InconsistentForce, NewtonDivergence, NotVelocityAffine,
    SingularLegendre,
)
from .pairlag import PairLagrangian

__all__ = [
    "TOL_RANK_FACTOR", "TimeCurve", "FixedEnds", "FreeEnds", "ChainSystem",
    "ChainState", "PairCurve", "make_state", "assemble_total_lagrangian",
    "momenta", "position_gradient", "energy", "mass_matrix",
    "full_velocity_hessian", "position_hessian", "cross_hessian",
    "force_vector", "el_residual", "solve_accelerations", "noether_momentum",
    "legendre_transform", "inverse_legendre", "theta_pairing",
    "spatial_conservation_check", "boundary_residuals_modeA",
    "project_initial_velocities",
]

# Singular values below this fraction of the largest are treated as zero;
# separates exact kernels from grid-scale small eigenvalues.
TOL_RANK_FACTOR = 1e-10

_trapz = getattr(np, "trapezoid", None) or np.trapz


class TimeCurve:
    """Prescribed node path: one expression in "t" per field component,
    with symbolic first and second time derivatives."""

    def __init__(self, components):
        self.components = tuple(components)
        for c in self.components:
            extra = ex.variables(c) - {"t"}
            if extra:
                raise ValueError(f"boundary curve may only use 't', got {sorted(extra)}")
        self._d1 = tuple(ex.differentiate(c, "t") for c in self.components)
        self._d2 = tuple(ex.differentiate(c, "t") for c in self._d1)

    @classmethod
    def from_strings(cls, texts) -> "TimeCurve":
        if isinstance(texts, str):
            texts = [texts]
        return cls([ex.parse_expression(s) for s in texts])

    @property
    def m(self) -> int:
        return len(self.components)

    def _eval(self, exprs, t: float) -> np.ndarray:
        return np.array([ex.evaluate(e, {"t": t}) for e in exprs])

    def value(self, t: float) -> np.ndarray:
        return self._eval(self.components, t)

    def velocity(self, t: float) -> np.ndarray:
        return self._eval(self._d1, t)

    def acceleration(self, t: float) -> np.ndarray:
        return self._eval(self._d2, t)


@dataclass(frozen=True)
class FixedEnds:
    left: TimeCurve
    right: TimeCurve


@dataclass(frozen=True)
class FreeEnds:
    pass


class ChainSystem:
    """Immutable description of the chain: pair Lagrangian, cell count N
    (N+1 nodes), boundary mode, field dimension m."""

    def __init__(self, pair: PairLagrangian, n_cells: int, mode):
        if n_cells < 2:
            raise ValueError("need at least 2 cells (3 nodes)")
        if isinstance(mode, FixedEnds):
            if mode.left.m != pair.m or mode.right.m != pair.m:
                raise ValueError("boundary curve dimension must match the field")
        elif not isinstance(mode, FreeEnds):
            raise TypeError("mode must be FixedEnds or FreeEnds")
        self.pair = pair
        self.n_cells = n_cells
        self.mode = mode
        self.m = pair.m
        # structure flags drive fast paths; they are exact (symbolic)
        self.cross_blocks_zero = all(
            pair.hessian_block_is_zero(i, j)
            for i in (2, 4) for j in (1, 3))
        self.velocity_hessian_constant = all(
            pair.hessian_block_is_constant(i, j)
            for i in (2, 4) for j in (2, 4))
        self.position_hessian_constant = all(
            pair.hessian_block_is_constant(i, j)
            for i in (1, 3) for j in (1, 3))
        self._const_vv = None
        self._const_yy = None

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def is_fixed(self) -> bool:
        return isinstance(self.mode, FixedEnds)

    def dynamical_nodes(self) -> np.ndarray:
        if self.is_fixed:
            return np.arange(1, self.n_cells)
        return np.arange(self.n_nodes)

    def dynamical_dofs(self) -> np.ndarray:
        nodes = self.dynamical_nodes()
        return (nodes[:, None] * self.m + np.arange(self.m)[None, :]).ravel()

    def boundary_values(self, t: float):
        return self.mode.left.value(t), self.mode.right.value(t)

    def boundary_velocities(self, t: float):
        return self.mode.left.velocity(t), self.mode.right.velocity(t)

    def boundary_accelerations(self, t: float):
        return self.mode.left.acceleration(t), self.mode.right.acceleration(t)


@dataclass
class ChainState:
    """Time plus position/velocity arrays over all nodes, shape (N+1, m).
    In FixedEnds mode the end rows hold the curve values at t."""

    t: float
    y: np.ndarray
    ydot: np.ndarray


def make_state(sys: ChainSystem, t: float, y, ydot) -> ChainState:
    """Normalize arrays to (N+1, m) and stamp fixed-end rows from the
    boundary curves; the returned state owns copies of its arrays."""
    y = np.array(y, dtype=float).reshape(sys.n_nodes, sys.m)
    ydot = np.array(ydot, dtype=float).reshape(sys.n_nodes, sys.m)
    if sys.is_fixed:
        y[0], y[-1] = sys.boundary_values(t)
        ydot[0], ydot[-1] = sys.boundary_velocities(t)
    return ChainState(t=float(t), y=y, ydot=ydot)


def _pair_args(state: ChainState):
    y, v = state.y, state.ydot
    return y[:-1], v[:-1], y[1:], v[1:]


def _grad(sys: ChainSystem, state: ChainState, slot: int) -> np.ndarray:
    return sys.pair.eval_gradient_block(slot, *_pair_args(state))


def assemble_total_lagrangian(sys: ChainSystem, state: ChainState) -> float:
    """L~ = sum over pairs k of L(y_k, ydot_k, y_{k+1}, ydot_{k+1})."""
    return float(np.sum(sys.pair.eval_lagrangian(*_pair_args(state))))


def momenta(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """Fiber part of the Legendre transformation, shape (N+1, m):
    p_0 = D2 of pair 0, p_k = D4 of pair k-1 + D2 of pair k, p_N = D4 of
    pair N-1.  Equals the gradient of L~ in the velocities."""
    p = np.zeros((sys.n_nodes, sys.m))
    p[:-1] += _grad(sys, state, 2)
    p[1:] += _grad(sys, state, 4)
    return p


def position_gradient(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """dL~/dy over all nodes, shape (N+1, m)."""
    g = np.zeros((sys.n_nodes, sys.m))
    g[:-1] += _grad(sys, state, 1)
    g[1:] += _grad(sys, state, 3)
    return g


def energy(sys: ChainSystem, state: ChainState) -> float:
    """E = sum_k p_k . ydot_k - L~."""
    p = momenta(sys, state)
    return float(np.sum(p * state.ydot)) - assemble_total_lagrangian(sys, state)


# ---------------------------------------------------------------------------
# second-derivative assembly

def _assemble_full(sys: ChainSystem, state: ChainState, row_slots, col_slots):
    """Full (N+1)m x (N+1)m matrix of d^2 L~ blocks, where the row (col)
    derivative runs over the node variables named by row_slots (col_slots):
    (1, 3) for positions, (2, 4) for velocities."""
    N, m = sys.n_cells, sys.m
    args = _pair_args(state)
    blocks = {}
    for r in (0, 1):
        for c in (0, 1):
            i, j = row_slots[r], col_slots[c]
            if sys.pair.hessian_block_is_zero(i, j):
                continue
            blocks[(r, c)] = sys.pair.eval_hessian_block(i, j, *args)
    n = (N + 1) * m
    A = np.zeros((n, n))
    if m == 1:
        diag = np.zeros(N + 1)
        if (0, 0) in blocks:
            diag[:-1] += blocks[(0, 0)][:, 0, 0]
        if (1, 1) in blocks:
            diag[1:] += blocks[(1, 1)][:, 0, 0]
        A[np.arange(N + 1), np.arange(N + 1)] = diag
        if (0, 1) in blocks:
            A[np.arange(N), np.arange(1, N + 1)] = blocks[(0, 1)][:, 0, 0]
        if (1, 0) in blocks:
            A[np.arange(1, N + 1), np.arange(N)] = blocks[(1, 0)][:, 0, 0]
        return A
    for k in range(N):
        for (r, c), B in blocks.items():
            i0, j0 = (k + r) * m, (k + c) * m
            A[i0:i0 + m, j0:j0 + m] += B[k]
    return A


def full_velocity_hessian(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """d^2 L~ / dydot dydot over all nodes (cached when state-independent)."""
    if sys.velocity_hessian_constant:
        if sys._const_vv is None:
            sys._const_vv = _assemble_full(sys, state, (2, 4), (2, 4))
        return sys._const_vv
    return _assemble_full(sys, state, (2, 4), (2, 4))


def mass_matrix(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """Velocity Hessian of L~ over the dynamical nodes (block tridiagonal);
    in FixedEnds mode the end rows/columns are removed."""
    full = full_velocity_hessian(sys, state)
    dofs = sys.dynamical_dofs()
    return full[np.ix_(dofs, dofs)]


def position_hessian(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """d^2 L~ / dy dy over the dynamical nodes."""
    if sys.position_hessian_constant:
        if sys._const_yy is None:
            sys._const_yy = _assemble_full(sys, state, (1, 3), (1, 3))
        full = sys._const_yy
    else:
        full = _assemble_full(sys, state, (1, 3), (1, 3))
    dofs = sys.dynamical_dofs()
    return full[np.ix_(dofs, dofs)]


def cross_hessian(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """d^2 L~ / dy dydot over the dynamical nodes (rows: positions)."""
    full = _assemble_full(sys, state, (1, 3), (2, 4))
    dofs = sys.dynamical_dofs()
    return full[np.ix_(dofs, dofs)]


def _velocity_coupling(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """Velocity-dependent part of d/dt (dL~/dydot): rows over all nodes."""
    N, m = sys.n_cells, sys.m
    out = np.zeros((N + 1, m))
    if sys.cross_blocks_zero:
        return out
    args = _pair_args(state)
    v_lo, v_hi = state.ydot[:-1], state.ydot[1:]
    pairs = [(2, 1, v_lo, 0), (2, 3, v_hi, 0), (4, 1, v_lo, 1), (4, 3, v_hi, 1)]
    for i, j, vel, row_off in pairs:
        if sys.pair.hessian_block_is_zero(i, j):
            continue
        H = sys.pair.eval_hessian_block(i, j, *args)
        term = np.einsum("kab,kb->ka", H, vel)
        if row_off == 0:
            out[:-1] += term
        else:
            out[1:] += term
    return out


def _boundary_acc_full(sys: ChainSystem, state: ChainState) -> np.ndarray:
    acc = np.zeros((sys.n_nodes, sys.m))
    if sys.is_fixed:
        acc[0], acc[-1] = sys.boundary_accelerations(state.t)
    return acc


def force_vector(sys: ChainSystem, state: ChainState) -> np.ndarray:
    """F over the dynamical dofs, defined so the equations of motion are
    M @ yddot = F.  In FixedEnds mode the prescribed end accelerations are
    moved to the right-hand side."""
    G = position_gradient(sys, state) - _velocity_coupling(sys, state)
    F = G.ravel()[sys.dynamical_dofs()]
    if sys.is_fixed:
        full = full_velocity_hessian(sys, state)
        acc = _boundary_acc_full(sys, state).ravel()
        F = F - (full @ acc)[sys.dynamical_dofs()]
    return F


def el_residual(sys: ChainSystem, state: ChainState, yddot) -> np.ndarray:
    """dL~/dy - d/dt dL~/dydot over the dynamical dofs, evaluated with the
    supplied accelerations (shape (N+1, m); in FixedEnds mode the end rows
    are taken from the boundary curves instead)."""
    yddot = np.asarray(yddot, float).reshape(sys.n_nodes, sys.m)
    if sys.is_fixed:
        yddot = yddot.copy()
        yddot[0], yddot[-1] = sys.boundary_accelerations(state.t)
    G = position_gradient(sys, state) - _velocity_coupling(sys, state)
    full = full_velocity_hessian(sys, state)
    resid = G.ravel() - full @ yddot.ravel()
    return resid[sys.dynamical_dofs()]


def _min_norm_solve(M: np.ndarray, b: np.ndarray):
    """Solve M x = b; min-norm least squares when M is rank deficient.
    Returns (x, consistency, rank_deficient) with consistency the norm of
    the unreachable component of b."""
    U, s, Vt = np.linalg.svd(M)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(M.shape[1]), float(np.linalg.norm(b)), True
    keep = s > TOL_RANK_FACTOR * s[0]
    if keep.all():
        return np.linalg.solve(M, b), 0.0, False
    coeff = (U[:, keep].T @ b) / s[keep]
    x = Vt[keep].T @ coeff
    return x, float(np.linalg.norm(b - M @ x)), True


def solve_accelerations(sys: ChainSystem, state: ChainState,
                        consistency_tol: float = 1e-8):
    """Accelerations from M @ yddot = F.

    Nonsingular M gives the unique solution and consistency 0; singular M
    gives the minimum-norm least-squares solution with consistency equal to
    the norm of the force component outside the range of M.  Raises
    InconsistentForce above consistency_tol (the dynamics are undefined at
    this state).  Returns (yddot, consistency) with yddot over all nodes
    (fixed-end rows filled from the curves)."""
    M = mass_matrix(sys, state)
    F = force_vector(sys, state)
    x, consistency, _ = _min_norm_solve(M, F)
    if consistency > consistency_tol:
        raise InconsistentForce(consistency)
    yddot = _boundary_acc_full(sys, state)
    flat = yddot.ravel()
    flat[sys.dynamical_dofs()] = x
    return flat.reshape(sys.n_nodes, sys.m), consistency


def noether_momentum(sys: ChainSystem, state: ChainState, generator) -> float:
    """Symmetry pairing sum_k p_k . xi(y_k); the generator is an m-vector
    (translations) or per-node values of shape (N+1, m)."""
    gen = np.asarray(generator, float)
    if gen.shape == (sys.m,):
        gen = np.broadcast_to(gen, (sys.n_nodes, sys.m))
    elif gen.shape != (sys.n_nodes, sys.m):
        raise ValueError("generator must be (m,) or (N+1, m)")
    return float(np.sum(momenta(sys, state) * gen))


def legendre_transform(sys: ChainSystem, state: ChainState):
    """(y, p) image of the state under the Legendre map."""
    return state.y.copy(), momenta(sys, state)


def inverse_legendre(sys: ChainSystem, y, p, guess_ydot=None, t: float = 0.0,
                     newton_tol: float = 1e-12, max_iters: int = 50) -> ChainState:
    """Recover the state with the given momenta at the dynamical nodes.

    Requires a numerically nonsingular mass matrix; raises SingularLegendre
    otherwise (e.g. the free-ends wave chain)."""
    p = np.asarray(p, float).reshape(sys.n_nodes, sys.m)
    guess = np.zeros((sys.n_nodes, sys.m)) if guess_ydot is None \
        else np.asarray(guess_ydot, float).reshape(sys.n_nodes, sys.m)
    state = make_state(sys, t, y, guess)
    dofs = sys.dynamical_dofs()
    target = p.ravel()[dofs]
    for _ in range(max_iters):
        M = mass_matrix(sys, state)
        s = np.linalg.svd(M, compute_uv=False)
        if s[0] == 0.0 or s[-1] <= TOL_RANK_FACTOR * s[0]:
            raise SingularLegendre(
                "velocity Hessian is numerically singular; momenta are not invertible")
        resid = momenta(sys, state).ravel()[dofs] - target
        if np.linalg.norm(resid) <= newton_tol:
            return state
        flat = state.ydot.ravel()
        flat[dofs] -= np.linalg.solve(M, resid)
        state = ChainState(state.t, state.y, flat.reshape(sys.n_nodes, sys.m))
    raise NewtonDivergence(float(np.linalg.norm(resid)), max_iters)


# ---------------------------------------------------------------------------
# sampled-curve pairings and conservation diagnostics

@dataclass
class PairCurve:
    """Uniformly sampled paths of one adjacent node pair on [0, T]."""

    times: np.ndarray
    y0: np.ndarray   # (S, m)
    v0: np.ndarray
    y1: np.ndarray
    v1: np.ndarray


def _check_grid(times: np.ndarray, *arrays) -> float:
    times = np.asarray(times, float)
    if times.ndim != 1 or times.size < 2:
        raise GridMismatch("need at least two samples")
    dt = times[1] - times[0]
    if dt <= 0 or not np.allclose(np.diff(times), dt, rtol=1e-9, atol=1e-12):
        raise GridMismatch("sample grid is not uniform")
    for a in arrays:
        if np.asarray(a).shape[0] != times.size:
            raise GridMismatch("sampled curve length does not match the grid")
    return float(dt)


def theta_pairing(sys: ChainSystem, curve: PairCurve, variation, side: str) -> float:
    """One-sided boundary pairing of a pair trajectory with a variation:

        minus: -integral(D1 . X + D2 . Xdot) dt
        plus:  +integral(D3 . Y + D4 . Ydot) dt

    by composite trapezoid on the sample grid, with the variation's time
    derivative taken by centered differences."""
    X = np.asarray(variation, float).reshape(-1, sys.m)
    dt = _check_grid(curve.times, curve.y0, curve.v0, curve.y1, curve.v1, X)
    Xdot = np.gradient(X, dt, axis=0)
    args = (np.asarray(curve.y0, float), np.asarray(curve.v0, float),
            np.asarray(curve.y1, float), np.asarray(curve.v1, float))
    if side == "minus":
        Dq = sys.pair.eval_gradient_block(1, *args)
        Dv = sys.pair.eval_gradient_block(2, *args)
        sign = -1.0
    elif side == "plus":
        Dq = sys.pair.eval_gradient_block(3, *args)
        Dv = sys.pair.eval_gradient_block(4, *args)
        sign = 1.0
    else:
        raise ValueError("side must be 'minus' or 'plus'")
    integrand = np.sum(Dq * X + Dv * Xdot, axis=1)
    return sign * float(_trapz(integrand, dx=dt))


def spatial_conservation_check(sys: ChainSystem, traj, generator, k: int) -> float:
    """Value of the along-chain conserved pairing at spatial index k:

        integral_0^T [D1 of pair k - d/dt (D2 of pair k)] . xi(y_k) dt
        + [D2 of pair k . xi(y_k)] from 0 to T

    computed from a stored trajectory (trapezoid quadrature; the time
    derivative of D2 by centered differences).  Along exact fixed-end
    solutions with the temporal natural boundary conditions the value is
    independent of k."""
    times = np.asarray(traj.times, float)
    dt = _check_grid(times, traj.y, traj.ydot)
    y, v = np.asarray(traj.y, float), np.asarray(traj.ydot, float)
    args = (y[:, k], v[:, k], y[:, k + 1], v[:, k + 1])
    D1 = sys.pair.eval_gradient_block(1, *args)
    D2 = sys.pair.eval_gradient_block(2, *args)
    gen = np.asarray(generator, float)
    xi = gen if gen.shape == (sys.m,) else gen[k]
    D2dot = np.gradient(D2, dt, axis=0)
    integrand = np.sum((D1 - D2dot) * xi, axis=1)
    boundary = np.sum(D2[-1] * xi) - np.sum(D2[0] * xi)
    return float(_trapz(integrand, dx=dt)) + float(boundary)


def boundary_residuals_modeA(sys: ChainSystem, traj):
    """Interior momenta at the first and last stored times (the temporal
    natural boundary conditions of the fixed-ends variational problem)."""
    if not sys.is_fixed:
        raise ValueError("boundary residuals are defined for FixedEnds chains")
    first = ChainState(float(traj.times[0]), traj.y[0], traj.ydot[0])
    last = ChainState(float(traj.times[-1]), traj.y[-1], traj.ydot[-1])
    r0 = momenta(sys, first)[1:-1]
    rT = momenta(sys, last)[1:-1]
    return r0, rT


def project_initial_velocities(sys: ChainSystem, state: ChainState) -> ChainState:
    """Minimal Euclidean-norm change of the dynamical velocities making the
    interior momenta vanish; positions unchanged.  Requires momenta affine
    in the velocities (velocity-quadratic Lagrangian), which is checked by
    comparing the velocity Hessian at two random velocity points."""
    rng = np.random.default_rng(0)
    probes = []
    for _ in range(2):
        probe = ChainState(state.t, state.y,
                           rng.uniform(-1, 1, state.ydot.shape))
        probes.append(full_velocity_hessian(sys, probe))
    scale = max(1.0, float(np.abs(probes[0]).max()))
    if not np.allclose(probes[0], probes[1], atol=1e-9 * scale):
        raise NotVelocityAffine(
            "velocity Hessian varies with the velocities; projection is not linear")
    interior = np.arange(1, sys.n_cells)
    rows = (interior[:, None] * sys.m + np.arange(sys.m)[None, :]).ravel()
    dofs = sys.dynamical_dofs()
    C = full_velocity_hessian(sys, state)[np.ix_(rows, dofs)]
    r = momenta(sys, state).ravel()[rows]
    dv, *_ = np.linalg.lstsq(C, -r, rcond=None)
    flat = state.ydot.copy().ravel()
    flat[dofs] += dv
    return make_state(sys, state.t, state.y, flat)
