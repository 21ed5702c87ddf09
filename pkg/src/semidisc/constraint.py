"""Pointwise constraint algorithm for degenerate chains.

When the velocity Hessian of the chain is singular, the equations of motion
M @ yddot = F only determine consistent dynamics where F is orthogonal to
ker M.  This module detects the kernel, evaluates the induced constraint
functions phi_a = v_a . F, differentiates them along the flow to build the
stabilization chain, and classifies states as admissible or not.  Everything
is numerical and pointwise: constraint functions are evaluators over states,
their time derivatives come from short consistent integrations, and
stabilization is a rank test on finite-difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import chain as ch

__all__ = ["ConstraintChain", "kernel_basis", "secondary_constraints",
           "constraint_chain", "is_admissible"]

# Central-difference probes: a level-d constraint function carries rounding
# noise amplified by one factor 1/step per nesting level, so the step must
# grow with depth.  noise(1) ~ machine eps; noise(d+1) = noise(d)/step(d)
# with the optimal step(d) = noise(d)^(1/3), giving noise(d+1) = noise(d)^(2/3).
_BASE_NOISE = 1e-16


def _level_noise(level: int) -> float:
    return _BASE_NOISE ** ((2.0 / 3.0) ** (level - 1))


def _level_step(level: int) -> float:
    return max(1e-5, _level_noise(level) ** (1.0 / 3.0))


def kernel_basis(M: np.ndarray, tol_rank: float = ch.TOL_RANK_FACTOR):
    """Orthonormal basis of the numerical null space of a square symmetric
    matrix: right singular vectors whose singular value falls below
    tol_rank times the largest one.  Empty list when nonsingular."""
    M = np.asarray(M, float)
    _, s, Vt = np.linalg.svd(M)
    if s[0] == 0.0:
        null = Vt
    else:
        null = Vt[s <= tol_rank * s[0]]
    vectors = []
    for v in null:
        lead = np.flatnonzero(np.abs(v) > 1e-12)
        if lead.size and v[lead[0]] < 0:
            v = -v   # deterministic sign
        vectors.append(v)
    return vectors


def secondary_constraints(sys: ch.ChainSystem, state: ch.ChainState) -> np.ndarray:
    """Values phi_a = v_a . F for the kernel basis of the mass matrix at
    this state; all zero (within tolerance) exactly when consistent
    accelerations exist."""
    basis = kernel_basis(ch.mass_matrix(sys, state))
    if not basis:
        return np.zeros(0)
    F = ch.force_vector(sys, state)
    return np.array([v @ F for v in basis])


@dataclass
class ConstraintChain:
    """Stack of constraint evaluators: levels[0] holds phi_a = v_a . F for
    the frozen kernel basis; each later level holds the time derivatives of
    the previous one along the consistent dynamics."""

    levels: list          # list of lists of callables ChainState -> float
    kernel: list          # frozen kernel basis vectors
    stabilized: bool
    depth: int

    def values(self, state: ch.ChainState):
        return [np.array([f(state) for f in level]) for level in self.levels]


def _state_scale(state: ch.ChainState) -> float:
    return 1.0 + float(np.sqrt(np.sum(state.y ** 2) + np.sum(state.ydot ** 2)))


def _advance(sys: ch.ChainSystem, state: ch.ChainState, delta: float) -> ch.ChainState:
    """Second-order Taylor step of the constrained dynamics, used for the
    tiny probe steps of the derivative evaluators.  Probe states sit
    slightly off the constraint surface by construction, so the minimum-norm
    acceleration is used unconditionally."""
    ydd, _ = ch.solve_accelerations(sys, state, consistency_tol=float("inf"))
    y = state.y + delta * state.ydot + 0.5 * delta ** 2 * ydd
    v = state.ydot + delta * ydd
    return ch.ChainState(state.t + delta, y, v)


def _time_derivative(sys: ch.ChainSystem, fun, level: int):
    """Evaluator for the total time derivative of a level-`level` function
    along the constrained flow."""
    def dfun(state: ch.ChainState) -> float:
        d = _level_step(level) * _state_scale(state)
        return (fun(_advance(sys, state, d)) - fun(_advance(sys, state, -d))) / (2 * d)
    return dfun


def _state_gradient(sys: ch.ChainSystem, fun, level: int,
                    state: ch.ChainState) -> np.ndarray:
    """Central-difference gradient of a constraint function over all state
    coordinates (positions then velocities)."""
    d = _level_step(level) * _state_scale(state)
    y0, v0 = state.y.ravel(), state.ydot.ravel()
    n = y0.size
    grad = np.zeros(2 * n)
    shape = state.y.shape
    for i in range(2 * n):
        hi_y, hi_v = y0.copy(), v0.copy()
        lo_y, lo_v = y0.copy(), v0.copy()
        if i < n:
            hi_y[i] += d
            lo_y[i] -= d
        else:
            hi_v[i - n] += d
            lo_v[i - n] -= d
        hi = ch.ChainState(state.t, hi_y.reshape(shape), hi_v.reshape(shape))
        lo = ch.ChainState(state.t, lo_y.reshape(shape), lo_v.reshape(shape))
        grad[i] = (fun(hi) - fun(lo)) / (2 * d)
    return grad


def constraint_chain(sys: ch.ChainSystem, state: ch.ChainState,
                     max_depth: int = 4, tol: float = 1e-3) -> ConstraintChain:
    """Generate the constraint chain at a state.

    Level 1 holds phi_a = v_a . F for the kernel basis computed here; level
    i+1 holds the total time derivatives of level i along the consistent
    dynamics.  Generation stops once every candidate function's gradient
    lies in the span of the accumulated gradients at this state (rank test
    with tol), or at max_depth with stabilized left False."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    basis = kernel_basis(ch.mass_matrix(sys, state))
    if not basis:
        return ConstraintChain(levels=[], kernel=[], stabilized=True, depth=0)

    def level_one(v):
        return lambda s: float(v @ ch.force_vector(sys, s))

    levels = [[level_one(v) for v in basis]]
    span = []   # orthonormal basis of accumulated gradient directions

    def absorb(grad: np.ndarray) -> bool:
        """Project out the known span; returns True if a new direction was
        added (i.e. the gradient was not already in the span)."""
        res = grad.copy()
        for q in span:
            res -= (q @ res) * q
        if np.linalg.norm(res) <= tol * max(1.0, np.linalg.norm(grad)):
            return False
        span.append(res / np.linalg.norm(res))
        return True

    for f in levels[0]:
        absorb(_state_gradient(sys, f, 1, state))
    while len(levels) < max_depth:
        depth = len(levels)
        candidates = [_time_derivative(sys, f, depth) for f in levels[-1]]
        new_direction = False
        for f in candidates:
            new_direction |= absorb(_state_gradient(sys, f, depth + 1, state))
        if not new_direction:
            return ConstraintChain(levels=levels, kernel=basis,
                                   stabilized=True, depth=len(levels))
        levels.append(candidates)
    return ConstraintChain(levels=levels, kernel=basis,
                           stabilized=False, depth=len(levels))


def is_admissible(sys: ch.ChainSystem, state: ch.ChainState,
                  chain: ConstraintChain, tol: float = 1e-8) -> bool:
    """True when every constraint function at every level evaluates below
    tol in absolute value at the state."""
    return all(abs(f(state)) < tol for level in chain.levels for f in level)
