"""Gradient-based error indication, bulk marking and the adapt loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Callable, Optional

import numpy as np

from .fem_basis import LagrangeBasis, build_patch_dof_map, quadrature_rule
from .mesh import MacroMesh, refine_macros, sub_cells
from .schur_solver import SolverConfig, solve


@dataclass
class IndicatorField:
    eta: np.ndarray  # one nonnegative value per macro

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.eta**2)))


def error_indicator(mesh: MacroMesh, p: int, solution) -> IndicatorField:
    """eta_K = h_K * ||grad u_h||_{L2(K)} per macro K."""
    rule = quadrature_rule(2, max(2 * p - 2, 1))
    basis = LagrangeBasis(2, p)
    gref = basis.grad(rule.points_ref)
    eta = np.zeros(len(mesh.macro_elements))
    for e, macro in enumerate(mesh.macro_elements):
        dofmap = build_patch_dof_map(macro, p)
        u = solution.u_coeffs(e)
        amap = macro.affine_map()
        acc = 0.0
        tables = {}
        for kind, jsub in (
            ("up", np.eye(2) / macro.m),
            ("down", np.array([[0.0, -1.0], [1.0, 1.0]]) / macro.m),
        ):
            Jc = amap.matrix @ jsub
            tables[kind] = (gref @ np.linalg.inv(Jc),
                            rule.weights * abs(float(np.linalg.det(Jc))))
        for cell_idx, (kind, i, j) in enumerate(sub_cells(macro.m)):
            gph, wd = tables[kind]
            cm = dofmap.cell_maps[cell_idx]
            grad = np.einsum("b,qbc->qc", u[cm], gph)
            acc += float(np.sum(wd * np.sum(grad**2, axis=1)))
        eta[e] = macro.diameter * sqrt(acc)
    return IndicatorField(eta=eta)


def mark(indicator: IndicatorField, theta: float) -> set:
    """Doerfler bulk marking: smallest set with sum eta^2 >= theta^2 * total^2,
    ties broken by macro id."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    eta2 = indicator.eta**2
    target = theta**2 * float(eta2.sum())
    if target == 0.0:
        return set()
    order = sorted(range(eta2.size), key=lambda e: (-eta2[e], e))
    marked = set()
    acc = 0.0
    for e in order:
        if eta2[e] == 0.0:
            break
        marked.add(e)
        acc += float(eta2[e])
        if acc >= target * (1.0 - 1e-12):
            break
    return marked


@dataclass
class AdaptState:
    mesh: MacroMesh
    level: int
    history: list = field(default_factory=list)
    solutions: list = field(default_factory=list)


def adapt(
    mesh: MacroMesh,
    problem,
    stab,
    config: SolverConfig,
    p: int,
    levels: int,
    theta: float = 0.5,
    error_fn: Optional[Callable] = None,
    keep_solutions: bool = False,
) -> AdaptState:
    """Loop solve -> indicate -> mark -> refine for `levels` steps.

    error_fn(mesh, solution) may supply an L2 error against a known exact
    solution; otherwise NaN is recorded."""
    state = AdaptState(mesh=mesh, level=0)
    for lvl in range(levels + 1):
        solution, _ = solve(mesh, problem, stab, config, p)
        ind = error_indicator(mesh, p, solution)
        err = float(error_fn(mesh, solution)) if error_fn is not None else float("nan")
        state.history.append(
            {
                "level": lvl,
                "n_macros": len(mesh.macro_elements),
                "dof_local": solution.report.dof_local,
                "dof_global": solution.report.dof_global,
                "l2_error": err,
                "eta_total": ind.total,
            }
        )
        if keep_solutions:
            state.solutions.append((mesh, solution))
        state.mesh = mesh
        state.level = lvl
        if lvl == levels:
            break
        mesh = refine_macros(mesh, mark(ind, theta))
    return state
