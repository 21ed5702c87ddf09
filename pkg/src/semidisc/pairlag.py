"""Two-node Lagrangian L(y0, ydot0, y1, ydot1) with exact derivative blocks.

Slot convention: slot 1 = first-node position, slot 2 = first-node velocity,
slot 3 = second-node position, slot 4 = second-node velocity.  Gradient
blocks are m-vectors, second-derivative blocks are m-by-m matrices with
block(i, j)[a, b] = d^2 L / (d slot_i[a] d slot_j[b]), so block(i, j) is the
transpose of block(j, i).

Everything is derived symbolically from one scalar expression over the
variables y0_1..y0_m, v0_1..v0_m, y1_1..y1_m, v1_1..v1_m, so Newton
Jacobians and mass matrices carry no finite-difference noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import UnknownVariable

__all__ = ["SLOTS", "WaveSpec", "PairLagrangian",
           "make_generic_pair_lagrangian", "make_wave_pair_lagrangian"]

SLOTS = {1: "y0", 2: "v0", 3: "y1", 4: "v1"}


def _slot_var(slot: int, comp: int) -> str:
    return f"{SLOTS[slot]}_{comp + 1}"


@dataclass(frozen=True)
class WaveSpec:
    """Ingredients of the two-node wave Lagrangian: sigma over the strain
    variable "v", the potential f over "u", and the node spacing h > 0."""

    sigma: ex.Expr
    f: ex.Expr
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("spacing h must be positive")
        extra = ex.variables(self.sigma) - {"v"}
        if extra:
            raise UnknownVariable(f"sigma may only use 'v', got {sorted(extra)}")
        extra = ex.variables(self.f) - {"u"}
        if extra:
            raise UnknownVariable(f"f may only use 'u', got {sorted(extra)}")

    @classmethod
    def from_strings(cls, sigma: str, f: str, h: float) -> "WaveSpec":
        return cls(ex.parse_expression(sigma), ex.parse_expression(f), h)


@dataclass(frozen=True)
class PairLagrangian:
    """Evaluators for a two-node Lagrangian and all its derivative blocks."""

    m: int
    value_expr: ex.Expr
    grad_exprs: dict = field(repr=False)    # slot -> [m component exprs]
    hess_exprs: dict = field(repr=False)    # (i, j) -> [m][m] exprs
    provenance: dict = field(default_factory=dict)

    # -- evaluation ---------------------------------------------------------

    def _env(self, y0, v0, y1, v1) -> dict:
        arrays = {"y0": np.asarray(y0, float), "v0": np.asarray(v0, float),
                  "y1": np.asarray(y1, float), "v1": np.asarray(v1, float)}
        env = {}
        for prefix, arr in arrays.items():
            for a in range(self.m):
                env[f"{prefix}_{a + 1}"] = arr[..., a]
        return env, arrays["y0"].shape[:-1]

    def eval_lagrangian(self, y0, v0, y1, v1):
        """L at a 4m-point; inputs of shape (m,) or batched (..., m)."""
        env, batch = self._env(y0, v0, y1, v1)
        out = ex.evaluate_many(self.value_expr, env)
        return np.broadcast_to(np.asarray(out, float), batch).copy() if batch \
            else float(out)

    def eval_gradient_block(self, slot: int, y0, v0, y1, v1):
        """Gradient block for slot in 1..4, shape (..., m)."""
        env, batch = self._env(y0, v0, y1, v1)
        cols = [np.broadcast_to(np.asarray(ex.evaluate_many(g, env), float), batch)
                for g in self.grad_exprs[slot]]
        return np.stack(cols, axis=-1)

    def eval_hessian_block(self, i: int, j: int, y0, v0, y1, v1):
        """Second-derivative block for slots (i, j), shape (..., m, m)."""
        env, batch = self._env(y0, v0, y1, v1)
        rows = []
        for a in range(self.m):
            rows.append([np.broadcast_to(
                np.asarray(ex.evaluate_many(h, env), float), batch)
                for h in self.hess_exprs[(i, j)][a]])
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    # -- structure queries used by the assembly layer ------------------------

    def hessian_block_is_zero(self, i: int, j: int) -> bool:
        return all(isinstance(h, ex.Constant) and h.value == 0.0
                   for row in self.hess_exprs[(i, j)] for h in row)

    def hessian_block_is_constant(self, i: int, j: int) -> bool:
        return all(isinstance(h, ex.Constant)
                   for row in self.hess_exprs[(i, j)] for h in row)


def make_generic_pair_lagrangian(exprL: ex.Expr, m: int) -> PairLagrangian:
    """Build all derivative blocks of a pair Lagrangian given as one scalar
    expression over y0_i, v0_i, y1_i, v1_i (i = 1..m)."""
    if m < 1:
        raise ValueError("field dimension m must be >= 1")
    declared = {_slot_var(s, a) for s in SLOTS for a in range(m)}
    undeclared = ex.variables(exprL) - declared
    if undeclared:
        raise UnknownVariable(
            f"expression uses undeclared variables {sorted(undeclared)}")
    grads = {}
    for slot in SLOTS:
        grads[slot] = [ex.differentiate(exprL, _slot_var(slot, a))
                       for a in range(m)]
    hess = {}
    for i in SLOTS:
        for j in SLOTS:
            hess[(i, j)] = [[ex.differentiate(grads[i][a], _slot_var(j, b))
                             for b in range(m)] for a in range(m)]
    return PairLagrangian(
        m=m, value_expr=ex.simplify(exprL), grad_exprs=grads, hess_exprs=hess,
        provenance={"kind": "generic", "lagrangian": ex.render(exprL), "m": m})


def make_wave_pair_lagrangian(spec: WaveSpec) -> PairLagrangian:
    """Two-node wave Lagrangian (m = 1):

        L = ((v0 + v1)/2)^2 / 2 - sigma((y1 - y0)/h) - f((y0 + y1)/2)

    with all derivative blocks produced symbolically.
    """
    y0, v0 = ex.Variable("y0_1"), ex.Variable("v0_1")
    y1, v1 = ex.Variable("y1_1"), ex.Variable("v1_1")
    two = ex.Constant(2.0)
    kinetic = ex.Div(ex.Pow(ex.Div(ex.Add(v0, v1), two), 2.0), two)
    strain = ex.Div(ex.Sub(y1, y0), ex.Constant(spec.h))
    average = ex.Div(ex.Add(y0, y1), two)
    lagrangian = ex.Sub(ex.Sub(kinetic, ex.substitute(spec.sigma, "v", strain)),
                        ex.substitute(spec.f, "u", average))
    pair = make_generic_pair_lagrangian(lagrangian, m=1)
    return PairLagrangian(
        m=1, value_expr=pair.value_expr, grad_exprs=pair.grad_exprs,
        hess_exprs=pair.hess_exprs,
        provenance={"kind": "wave", "sigma": ex.render(spec.sigma),
                    "f": ex.render(spec.f), "h": spec.h})
