"""Shared helpers for the test suite."""

import numpy as np
import pytest

from mehdg.assembly import ProblemData, StabilizationConfig
from mehdg.bench import make_benchmark
from mehdg.mesh import build_structured_macro_mesh
from mehdg.schur_solver import SolverConfig, solve


def poly_case(degree: int, kappa: float = 1.0, a=(1.0, 2.0)):
    """Manufactured polynomial benchmark of the given total degree."""
    return make_benchmark(f"poly{degree}", kappa, a)


def solve_poly(degree, n, m, p, kappa=1.0, a=(1.0, 2.0), supg=False,
               tol=1e-12, mode="mb", workers=1):
    """Convenience patch-test solve; returns (mesh, solution, sys, case)."""
    case = poly_case(degree, kappa, a)
    mesh = build_structured_macro_mesh(2, n, m)
    stab = StabilizationConfig(supg=supg)
    config = SolverConfig(tol=tol, mode=mode, workers=workers)
    solution, sys = solve(mesh, case.problem(), stab, config, p)
    return mesh, solution, sys, case


def face_mass_oracle(face, p, npts=20):
    """Trace mass matrix of a skeleton face by dense Gauss quadrature."""
    from mehdg.fem_basis import TraceBasis

    psi = TraceBasis(face.m_f, p)
    x, w = np.polynomial.legendre.leggauss(npts)
    pieces = np.arange(face.m_f + 1) / face.m_f
    M = np.zeros((psi.n_dofs, psi.n_dofs))
    for lo, hi in zip(pieces[:-1], pieces[1:]):
        s = lo + (hi - lo) * 0.5 * (x + 1.0)
        ww = (hi - lo) * 0.5 * w * face.length
        V = psi.eval(s)
        M += V.T @ (ww[:, None] * V)
    return M


@pytest.fixture(scope="session")
def mesh_2_2():
    return build_structured_macro_mesh(2, 2, 2)
