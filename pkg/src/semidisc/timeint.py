"""Structure-preserving time integration of the assembled chain.

The main stepper is variational: a two-point discrete Lagrangian

    L_d(a, b) = dt * L~((a + b)/2, (b - a)/dt)

is stationarized over the interior point, which gives the discrete
Euler-Lagrange system D1 L_d(y_cur, y_next) + D2 L_d(y_prev, y_cur) = 0
solved by Newton with the exact Jacobian from the symbolic second blocks.
Discrete Legendre maps, the discrete momentum map and a finite-difference
probe of the discrete symplectic two-form accompany it.  A symplectic Euler
scheme on the momentum side and a classical rk4 reference are included for
comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import chain as ch
from .errors import NewtonDivergence, SingularJacobian

__all__ = [
    "SCHEMES", "StepperConfig", "DiscretePair", "discrete_lagrangian",
    "discrete_el_step", "initialize_discrete", "discrete_legendre",
    "discrete_momentum_map", "symplectic_two_form_probe", "propagate_tangent",
    "symplectic_euler_step", "rk4_step",
]

SCHEMES = ("variational_midpoint", "symplectic_euler", "rk4")

# probe step for the symplectic two-form finite differences
FD_PROBE_STEP = 1e-6
# a least-squares Newton step with a linear-solve residual above this aborts
STEP_INCONSISTENCY_LIMIT = 1e-8


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: str = "variational_midpoint"
    newton_tol: float = 1e-12
    max_newton_iters: int = 50

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not (self.newton_tol > 0 and self.max_newton_iters > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class DiscretePair:
    """Two consecutive node-position arrays of the discrete flow.  t_cur is
    the time of y_cur, needed to evaluate fixed-end boundary curves."""

    y_prev: np.ndarray
    y_cur: np.ndarray
    dt: float
    t_cur: float = 0.0
    seed_fallback: bool = field(default=False, compare=False)


def _midpoint_state(sys: ch.ChainSystem, a, b, dt: float, t: float) -> ch.ChainState:
    # plain ChainState: the end rows of a and b already carry the curve
    # samples, and the discrete theory works with their averages as-is
    return ch.ChainState(t + dt / 2, (a + b) / 2.0, (b - a) / dt)


def discrete_lagrangian(sys: ch.ChainSystem, y0, y1, dt: float,
                        t: float = 0.0) -> float:
    """Midpoint-rule discrete Lagrangian dt * L~((y0+y1)/2, (y1-y0)/dt)."""
    y0 = np.asarray(y0, float).reshape(sys.n_nodes, sys.m)
    y1 = np.asarray(y1, float).reshape(sys.n_nodes, sys.m)
    return dt * ch.assemble_total_lagrangian(
        sys, _midpoint_state(sys, y0, y1, dt, t))


def _dl_gradients(sys: ch.ChainSystem, a, b, dt: float, t: float):
    """(D1 L_d, D2 L_d) over all nodes:
    D1 = (dt/2) G_y - G_v and D2 = (dt/2) G_y + G_v at the midpoint."""
    mid = _midpoint_state(sys, a, b, dt, t)
    gy = ch.position_gradient(sys, mid)
    gv = ch.momenta(sys, mid)
    return (dt / 2) * gy - gv, (dt / 2) * gy + gv


def _dl_jacobian(sys: ch.ChainSystem, a, b, dt: float, t: float, wrt: str):
    """Jacobian of D1 L_d(a, b) in the dynamical dofs of one argument:
    d(D1)/db = (dt/4) H_yy + (1/2)(H_yv - H_vy) - (1/dt) H_vv,
    d(D1)/da = (dt/4) H_yy - (1/2)(H_yv + H_vy) + (1/dt) H_vv."""
    mid = _midpoint_state(sys, a, b, dt, t)
    hyy = ch.position_hessian(sys, mid)
    hvv = ch.mass_matrix(sys, mid)
    if sys.cross_blocks_zero:
        hyv = 0.0
        hvy = 0.0
    else:
        hyv = ch.cross_hessian(sys, mid)
        hvy = hyv.T
    if wrt == "b":
        return (dt / 4) * hyy + 0.5 * hyv - 0.5 * hvy - (1.0 / dt) * hvv
    return (dt / 4) * hyy - 0.5 * hyv - 0.5 * hvy + (1.0 / dt) * hvv


def _newton(residual, jacobian, x0: np.ndarray, tol: float, max_iters: int):
    """Damped-free Newton with least-squares fallback on singular Jacobians.
    Returns (x, iterations, worst_inconsistency)."""
    x = x0.copy()
    worst = 0.0
    for it in range(max_iters):
        r = residual(x)
        norm = float(np.linalg.norm(r))
        if norm <= tol:
            return x, it, worst
        step, inconsistency, deficient = ch._min_norm_solve(jacobian(x), -r)
        if deficient:
            worst = max(worst, inconsistency)
            if inconsistency > STEP_INCONSISTENCY_LIMIT:
                raise SingularJacobian(
                    f"Newton system is singular and inconsistent "
                    f"(residual {inconsistency:.3e})")
        x = x + step
    raise NewtonDivergence(norm, max_iters)


def _el_step_info(sys: ch.ChainSystem, pair: DiscretePair, cfg: StepperConfig):
    """One discrete Euler-Lagrange step; returns (y_next, iters, inconsistency)."""
    dt, t = pair.dt, pair.t_cur
    dofs = sys.dynamical_dofs()
    shape = (sys.n_nodes, sys.m)
    _, d2_prev = _dl_gradients(sys, pair.y_prev, pair.y_cur, dt, t - dt)

    template = 2.0 * pair.y_cur - pair.y_prev
    if sys.is_fixed:
        template = template.copy()
        left, right = sys.boundary_values(t + dt)
        template[0], template[-1] = left, right

    def embed(xdyn):
        full = template.copy().ravel()
        full[dofs] = xdyn
        return full.reshape(shape)

    def residual(xdyn):
        d1, _ = _dl_gradients(sys, pair.y_cur, embed(xdyn), dt, t)
        return (d1 + d2_prev).ravel()[dofs]

    def jacobian(xdyn):
        return _dl_jacobian(sys, pair.y_cur, embed(xdyn), dt, t, wrt="b")

    x0 = template.ravel()[dofs]
    x, iters, worst = _newton(residual, jacobian, x0,
                              cfg.newton_tol, cfg.max_newton_iters)
    return embed(x), iters, worst


def discrete_el_step(sys: ch.ChainSystem, pair: DiscretePair,
                     cfg: StepperConfig) -> np.ndarray:
    """Solve D1 L_d(y_cur, y_next) + D2 L_d(y_prev, y_cur) = 0 for y_next
    by Newton iteration with the exact symbolic Jacobian."""
    y_next, _, _ = _el_step_info(sys, pair, cfg)
    return y_next


def advance_pair(sys: ch.ChainSystem, pair: DiscretePair,
                 cfg: StepperConfig) -> DiscretePair:
    """Discrete flow on pairs: (y_prev, y_cur) -> (y_cur, y_next)."""
    y_next = discrete_el_step(sys, pair, cfg)
    return DiscretePair(pair.y_cur, y_next, pair.dt, pair.t_cur + pair.dt)


def initialize_discrete(sys: ch.ChainSystem, state0: ch.ChainState,
                        dt: float, newton_tol: float = 1e-12,
                        max_iters: int = 50) -> DiscretePair:
    """Seed the two-point window from (y, ydot): choose y_prev by Newton so
    the discrete momentum attached at y0, D2 L_d(y_prev, y0), equals the
    continuous momenta at state0.  Through the discrete Euler-Lagrange
    equation this is exactly the minus discrete Legendre momentum of the
    forward window (y0, y1).  Falls back to y_prev = y0 - dt*ydot0 with a
    warning flag when the Newton solve fails."""
    dofs = sys.dynamical_dofs()
    shape = (sys.n_nodes, sys.m)
    y0 = state0.y
    target = ch.momenta(sys, state0).ravel()[dofs]

    template = y0 - dt * state0.ydot
    if sys.is_fixed:
        left, right = sys.boundary_values(state0.t - dt)
        template = template.copy()
        template[0], template[-1] = left, right

    def embed(xdyn):
        full = template.copy().ravel()
        full[dofs] = xdyn
        return full.reshape(shape)

    def residual(xdyn):
        _, d2 = _dl_gradients(sys, embed(xdyn), y0, dt, state0.t - dt)
        return d2.ravel()[dofs] - target

    def jacobian(xdyn):
        # d(D2 L_d)/da = (dt/4) H_yy - (1/2)(H_yv - H_vy) - (1/dt) H_vv
        mid = _midpoint_state(sys, embed(xdyn), y0, dt, state0.t - dt)
        hyy = ch.position_hessian(sys, mid)
        hvv = ch.mass_matrix(sys, mid)
        if sys.cross_blocks_zero:
            cross = 0.0
        else:
            hyv = ch.cross_hessian(sys, mid)
            cross = 0.5 * (hyv - hyv.T)
        return (dt / 4) * hyy - cross - (1.0 / dt) * hvv

    try:
        x, _, _ = _newton(residual, jacobian, template.ravel()[dofs],
                          newton_tol, max_iters)
        y_prev, fallback = embed(x), False
    except (NewtonDivergence, SingularJacobian):
        y_prev, fallback = template.copy(), True
    return DiscretePair(y_prev, y0.copy(), dt, t_cur=state0.t,
                        seed_fallback=fallback)


def discrete_legendre(sys: ch.ChainSystem, pair: DiscretePair,
                      side: str) -> np.ndarray:
    """Discrete Legendre momenta of a pair: minus side -D1 L_d (attached at
    y_prev), plus side +D2 L_d (attached at y_cur); shape (N+1, m)."""
    d1, d2 = _dl_gradients(sys, pair.y_prev, pair.y_cur, pair.dt,
                           pair.t_cur - pair.dt)
    if side == "minus":
        return -d1
    if side == "plus":
        return d2
    raise ValueError("side must be 'minus' or 'plus'")


def discrete_momentum_map(sys: ch.ChainSystem, pair: DiscretePair,
                          generator) -> float:
    """Pairing of the plus discrete Legendre momenta with the generator at
    the current positions; conserved by the discrete flow when L_d is
    invariant under the generator's action."""
    gen = np.asarray(generator, float)
    if gen.shape == (sys.m,):
        gen = np.broadcast_to(gen, (sys.n_nodes, sys.m))
    p_plus = discrete_legendre(sys, pair, "plus")
    return float(np.sum(p_plus * gen))


def _zero_nondynamical(sys: ch.ChainSystem, d: np.ndarray) -> np.ndarray:
    if not sys.is_fixed:
        return d
    out = d.copy()
    out[:, 0, :] = 0.0
    out[:, -1, :] = 0.0
    return out


def _as_pair_direction(sys: ch.ChainSystem, d) -> np.ndarray:
    arr = np.asarray(d, float).reshape(2, sys.n_nodes, sys.m)
    return _zero_nondynamical(sys, arr)


def symplectic_two_form_probe(sys: ch.ChainSystem, pair: DiscretePair,
                              da, db) -> float:
    """omega_d on two pair-space directions via centered differences of the
    plus discrete Legendre map: delta_a p . delta_b q - delta_b p . delta_a q
    over the dynamical dofs."""
    da = _as_pair_direction(sys, da)
    db = _as_pair_direction(sys, db)
    dofs = sys.dynamical_dofs()

    def fl_plus(prev, cur):
        d2 = _dl_gradients(sys, prev, cur, pair.dt, pair.t_cur - pair.dt)[1]
        return cur.ravel()[dofs], d2.ravel()[dofs]

    def differential(d):
        e = FD_PROBE_STEP
        q_hi, p_hi = fl_plus(pair.y_prev + e * d[0], pair.y_cur + e * d[1])
        q_lo, p_lo = fl_plus(pair.y_prev - e * d[0], pair.y_cur - e * d[1])
        return (q_hi - q_lo) / (2 * e), (p_hi - p_lo) / (2 * e)

    qa, pa = differential(da)
    qb, pb = differential(db)
    return float(pa @ qb - pb @ qa)


def propagate_tangent(sys: ch.ChainSystem, pair: DiscretePair, d,
                      cfg: StepperConfig) -> np.ndarray:
    """Centered finite-difference linearization of the discrete flow applied
    to a pair-space direction d = (d_prev, d_cur)."""
    d = _as_pair_direction(sys, d)
    eps = FD_PROBE_STEP * (1.0 + float(np.sqrt(
        np.sum(pair.y_prev ** 2) + np.sum(pair.y_cur ** 2))))

    def stepped(sign):
        shifted = DiscretePair(pair.y_prev + sign * eps * d[0],
                               pair.y_cur + sign * eps * d[1],
                               pair.dt, pair.t_cur)
        return _el_step_info(sys, shifted, cfg)[0]

    d_next = (stepped(+1.0) - stepped(-1.0)) / (2 * eps)
    return np.stack([d[1], _zero_nondynamical(sys, d_next[None])[0]])


def symplectic_euler_step(sys: ch.ChainSystem, state: ch.ChainState,
                          cfg: StepperConfig) -> ch.ChainState:
    """Momentum-first symplectic Euler: p' = p + dt * dL~/dy evaluated at
    (y, ydot(y, p')), then y' = y + dt * ydot(y, p').  The momentum update
    is explicit when the force is velocity-independent (wave family) and a
    fixed-point iteration otherwise.  Requires an invertible mass matrix."""
    dt = cfg.dt
    dofs = sys.dynamical_dofs()
    p = ch.momenta(sys, state)
    p_new = p.copy()
    if sys.cross_blocks_zero:
        g = ch.position_gradient(sys, state).ravel()[dofs]
        flat = p_new.ravel()
        flat[dofs] += dt * g
        vel_state = ch.inverse_legendre(sys, state.y, p_new, state.ydot,
                                        t=state.t, newton_tol=cfg.newton_tol)
    else:
        vel_state = ch.ChainState(state.t, state.y, state.ydot)
        for _ in range(cfg.max_newton_iters):
            g = ch.position_gradient(sys, vel_state).ravel()[dofs]
            candidate = p.copy()
            candidate.ravel()[dofs] += dt * g
            change = np.linalg.norm(candidate - p_new)
            p_new = candidate
            vel_state = ch.inverse_legendre(sys, state.y, p_new, vel_state.ydot,
                                            t=state.t, newton_tol=cfg.newton_tol)
            if change <= cfg.newton_tol:
                break
        else:
            raise NewtonDivergence(float(change), cfg.max_newton_iters)
    y_new = state.y + dt * vel_state.ydot
    interim = ch.make_state(sys, state.t + dt, y_new, vel_state.ydot)
    final = ch.inverse_legendre(sys, interim.y, p_new, interim.ydot,
                                t=state.t + dt, newton_tol=cfg.newton_tol)
    return final


def rk4_step(sys: ch.ChainSystem, state: ch.ChainState,
             cfg: StepperConfig):
    """Classical fourth-order step on (y, ydot) with accelerations from the
    chain solve; returns (state', max stage inconsistency)."""
    dt = cfg.dt
    worst = 0.0

    def rate(s):
        nonlocal worst
        ydd, cons = ch.solve_accelerations(sys, s)
        worst = max(worst, cons)
        return s.ydot.copy(), ydd

    t, y, v = state.t, state.y, state.ydot
    k1y, k1v = rate(state)
    k2y, k2v = rate(ch.make_state(sys, t + dt / 2, y + dt / 2 * k1y, v + dt / 2 * k1v))
    k3y, k3v = rate(ch.make_state(sys, t + dt / 2, y + dt / 2 * k2y, v + dt / 2 * k2v))
    k4y, k4v = rate(ch.make_state(sys, t + dt, y + dt * k3y, v + dt * k3v))
    new = ch.make_state(sys, t + dt,
                        y + dt / 6 * (k1y + 2 * k2y + 2 * k3y + k4y),
                        v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v))
    return new, worst


def velocity_from_plus_momenta(sys: ch.ChainSystem, pair: DiscretePair,
                               newton_tol: float = 1e-12) -> ch.ChainState:
    """State at (t_cur, y_cur) whose momenta match the plus discrete
    Legendre momenta of the pair.  Degenerate chains use the minimum-norm
    affine recovery (solutions differ by kernel elements)."""
    p = discrete_legendre(sys, pair, "plus")
    guess = (pair.y_cur - pair.y_prev) / pair.dt
    try:
        return ch.inverse_legendre(sys, pair.y_cur, p, guess, t=pair.t_cur,
                                   newton_tol=newton_tol)
    except ch.SingularLegendre:
        state = ch.make_state(sys, pair.t_cur, pair.y_cur, guess)
        dofs = sys.dynamical_dofs()
        A = ch.full_velocity_hessian(sys, state)[np.ix_(dofs, dofs)]
        zero_v = ch.ChainState(state.t, state.y, np.zeros_like(state.ydot))
        offset = ch.momenta(sys, zero_v).ravel()[dofs]
        target = p.ravel()[dofs] - offset
        sol, *_ = np.linalg.lstsq(A, target, rcond=None)
        flat = state.ydot.ravel()
        flat[dofs] = sol
        return ch.ChainState(state.t, state.y, flat.reshape(state.ydot.shape))
