"""Static condensation and the global trace solve.

The block system [A B; C D][U; uhat] = [R_u; R_uhat] is reduced to
(D - C A^-1 B) uhat = R_uhat - C A^-1 R_u.  The Schur operator is applied
matrix-free through four local steps (B, A^-1, C per macro, then a per-face
reduction) or through an explicitly scattered sparse matrix; both share the
block-diagonal D^-1 preconditioner and a restarted GMRES.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    FaceOperator,
    LocalOperators,
    ProblemData,
    StabilizationConfig,
    assemble_face,
    assemble_macro,
)
from .mesh import MacroMesh


class SingularLocalBlock(RuntimeError):
    pass


class SingularFaceBlock(RuntimeError):
    pass


@dataclass
class SolverConfig:
    tol: float = 1e-6
    restart: int = 100
    maxiter: int = 10000
    preconditioner: str = "dinv"  # 'dinv' | 'none'
    mode: str = "mf"  # 'mf' | 'mb'
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.preconditioner not in ("dinv", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.mode not in ("mf", "mb"):
            raise ValueError(f"unknown mode {self.mode!r}")


class WorkerPool:
    """Static round-robin scheduling of independent tasks onto threads.

    The partition of items to workers is fixed, so results never depend on
    the worker count; per-worker busy time is accumulated for the LBF."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self.busy = np.zeros(self.workers)
        self._ex = (
            ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        )

    def map(self, fn: Callable, items) -> list:
        items = list(items)
        results = [None] * len(items)

        def run_chunk(w):
            # thread CPU time: excludes waits, so the balance factor reflects
            # the work split rather than scheduler noise
            t0 = time.thread_time()
            for i in range(w, len(results), self.workers):
                results[i] = fn(items[i])
            self.busy[w] += time.thread_time() - t0

        if self._ex is None:
            run_chunk(0)
        else:
            futs = [self._ex.submit(run_chunk, w) for w in range(self.workers)]
            for f in futs:
                f.result()
        return results

    @property
    def lbf(self) -> float:
        mx = float(self.busy.max(initial=0.0))
        if mx == 0.0:
            return 1.0
        return float(self.busy.mean()) / mx

    def close(self):
        if self._ex is not None:
            self._ex.shutdown(wait=True)
            self._ex = None


def _factorize_local(op: LocalOperators) -> None:
    if op.storage == "dense":
        lu, piv = sla.lu_factor(op.A)
        diag = np.abs(np.diag(lu))
        if diag.min() <= 1e-13 * max(float(np.abs(op.A).max()), 1e-300):
            raise SingularLocalBlock(op.macro_id)
        op.lu = ("dense", (lu, piv))
    else:
        fac = spla.splu(sp.csc_matrix(op.A))
        diag = np.abs(fac.U.diagonal())
        amax = float(np.abs(op.A.data).max()) if op.A.nnz else 0.0
        if diag.min() <= 1e-13 * max(amax, 1e-300):
            raise SingularLocalBlock(op.macro_id)
        op.lu = ("sparse", fac)


def _solve_local(op: LocalOperators, rhs: np.ndarray) -> np.ndarray:
    kind, fac = op.lu
    if kind == "dense":
        return sla.lu_solve(fac, rhs)
    if rhs.ndim == 1:
        return fac.solve(rhs)
    return np.column_stack([fac.solve(rhs[:, k]) for k in range(rhs.shape[1])])


def _factorize_face(op: FaceOperator) -> None:
    """Symmetric factorization of -D or D when definite, LU otherwise."""
    for sign, kind in ((-1.0, "chol-neg"), (1.0, "chol-pos")):
        try:
            c = sla.cho_factor(sign * op.D)
        except np.linalg.LinAlgError:
            continue
        op.factor = ("chol", sign, c)
        op.factor_kind = kind
        return
    try:
        lu, piv = sla.lu_factor(op.D)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularFaceBlock(op.face_id) from exc
    if np.abs(np.diag(lu)).min() < 1e-13 * max(np.abs(op.D).max(), 1e-300):
        raise SingularFaceBlock(op.face_id)
    op.factor = ("lu", 1.0, (lu, piv))
    op.factor_kind = "lu"


def _solve_face(op: FaceOperator, rhs: np.ndarray) -> np.ndarray:
    kind, sign, fac = op.factor
    if kind == "chol":
        return sign * sla.cho_solve(fac, rhs)
    return sla.lu_solve(fac, rhs)


@dataclass
class CondensedSystem:
    mesh: MacroMesh
    p: int
    local_ops: list
    face_ops: dict  # face id -> FaceOperator, unknown faces only
    offsets: dict  # face id -> (start, ndofs) in the global trace vector
    zhat: int
    f_vec: np.ndarray
    pool: WorkerPool
    # per macro: boolean mask of unknown slot positions and their global indices
    gather_mask: list = field(default_factory=list)
    gather_idx: list = field(default_factory=list)
    # per unknown face: (start, nd, [(macro id, slot slice), ...])
    face_plan: list = field(default_factory=list)
    counters: dict = field(default_factory=lambda: {"macro_apply": 0, "face_reduce": 0})
    timings: dict = field(default_factory=lambda: {"local": 0.0, "global": 0.0})

    @property
    def dof_local(self) -> int:
        return int(sum(op.R_u.size for op in self.local_ops))

    def gather(self, uhat: np.ndarray, e: int) -> np.ndarray:
        ue = np.zeros(self.local_ops[e].B.shape[1])
        ue[self.gather_mask[e]] = uhat[self.gather_idx[e]]
        return ue


def condense(
    mesh: MacroMesh,
    local_ops: list,
    face_ops: dict,
    config: SolverConfig,
    pool: Optional[WorkerPool] = None,
) -> CondensedSystem:
    """Factorize local blocks and build the reduced right-hand side
    f = R_uhat - C A^-1 R_u."""
    pool = pool or WorkerPool(config.workers)
    pool.map(_factorize_local, local_ops)
    pool.map(_factorize_face, list(face_ops.values()))

    offsets = {}
    pos = 0
    for face in mesh.skeleton:
        if face.tag == "D":
            continue
        nd = face_ops[face.id].D.shape[0]
        offsets[face.id] = (pos, nd)
        pos += nd
    zhat = pos

    sys = CondensedSystem(
        mesh=mesh, p=_infer_p(mesh, local_ops), local_ops=local_ops,
        face_ops=face_ops, offsets=offsets, zhat=zhat,
        f_vec=np.zeros(zhat), pool=pool,
    )

    for e, op in enumerate(local_ops):
        mask = np.zeros(op.B.shape[1], dtype=bool)
        idx = []
        for fid, slot in op.face_slots:
            if fid in offsets:
                start, nd = offsets[fid]
                mask[slot] = True
                idx.extend(range(start, start + nd))
        sys.gather_mask.append(mask)
        sys.gather_idx.append(np.array(idx, dtype=np.int64))

    side_slots = {}
    for e, op in enumerate(local_ops):
        for fid, slot in op.face_slots:
            if fid in offsets:
                side_slots.setdefault(fid, []).append((e, slot))
    for face in mesh.skeleton:
        if face.id not in offsets:
            continue
        start, nd = offsets[face.id]
        # fixed reduction order: left side first, then right
        order = []
        for side in face.sides():
            for (e, slot) in side_slots.get(face.id, []):
                if e == side.macro and (e, slot) not in order:
                    order.append((e, slot))
                    break
        sys.face_plan.append((face.id, start, nd, order))

    # reduced RHS
    def macro_rhs(e):
        op = local_ops[e]
        return op.C @ _solve_local(op, op.R_u)

    contrib = pool.map(macro_rhs, range(len(local_ops)))
    for fid, start, nd, order in sys.face_plan:
        seg = face_ops[fid].R_hat.copy()
        for (e, slot) in order:
            seg -= contrib[e][slot]
        sys.f_vec[start:start + nd] = seg
    return sys


def _infer_p(mesh: MacroMesh, local_ops: list) -> int:
    from math import isqrt

    # Q = binom(mp+2, 2) -> recover p from the first macro's block size
    Q = local_ops[0].R_u.size // 3
    m = mesh.macro_elements[0].m
    L = (isqrt(8 * Q + 1) - 3) // 2  # lattice degree with (L+1)(L+2)/2 = Q
    return L // m


def apply_schur(sys: CondensedSystem, uhat: np.ndarray) -> np.ndarray:
    """(D - C A^-1 B) uhat via the four matrix-free steps."""
    t0 = time.perf_counter()

    def macro_task(e):
        op = sys.local_ops[e]
        ue = sys.gather(uhat, e)
        x = op.B @ ue            # step 1
        y = _solve_local(op, x)  # step 2
        sys.counters["macro_apply"] += 1
        return op.C @ y          # step 3

    vhat = sys.pool.map(macro_task, range(len(sys.local_ops)))
    sys.timings["local"] += time.perf_counter() - t0

    w = np.empty(sys.zhat)

    def face_task(plan):  # step 4
        fid, start, nd, order = plan
        seg = sys.face_ops[fid].D @ uhat[start:start + nd]
        for (e, slot) in order:
            seg = seg - vhat[e][slot]
        w[start:start + nd] = seg
        sys.counters["face_reduce"] += 1

    sys.pool.map(face_task, sys.face_plan)
    return w


def apply_preconditioner(sys: CondensedSystem, w: np.ndarray) -> np.ndarray:
    """Per-face application of D^-1."""
    out = np.empty_like(w)

    def face_task(plan):
        fid, start, nd, _ = plan
        out[start:start + nd] = _solve_face(sys.face_ops[fid], w[start:start + nd])

    sys.pool.map(face_task, sys.face_plan)
    return out


def gmres(
    apply_op: Callable,
    rhs: np.ndarray,
    config: SolverConfig,
    precond: Optional[Callable] = None,
):
    """Restarted GMRES with left preconditioning; the stopping test uses the
    preconditioned relative residual."""
    n = rhs.size
    M = precond if precond is not None else (lambda v: v)
    x = np.zeros(n)
    history = []
    mb = M(rhs)
    bnorm = float(np.linalg.norm(mb))
    if bnorm == 0.0:
        return x, {"iterations": 0, "residual_history": [0.0], "converged": True}
    it = 0
    converged = False
    while it < config.maxiter and not converged:
        r = M(rhs - apply_op(x))
        beta = float(np.linalg.norm(r))
        if not history:
            history.append(beta)
        if beta / bnorm <= config.tol:
            converged = True
            break
        V = np.zeros((config.restart + 1, n))
        H = np.zeros((config.restart + 1, config.restart))
        cs = np.zeros(config.restart)
        sn = np.zeros(config.restart)
        g = np.zeros(config.restart + 1)
        V[0] = r / beta
        g[0] = beta
        k_used = 0
        breakdown = False
        for k in range(config.restart):
            # copy: the operator or preconditioner may return its input
            wv = np.array(M(apply_op(V[k])), dtype=float)
            for i in range(k + 1):  # modified Gram-Schmidt
                H[i, k] = float(V[i] @ wv)
                wv -= H[i, k] * V[i]
            H[k + 1, k] = float(np.linalg.norm(wv))
            if H[k + 1, k] > 1e-300:
                V[k + 1] = wv / H[k + 1, k]
            else:
                breakdown = True
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = float(np.hypot(H[k, k], H[k + 1, k]))
            if denom == 0.0:
                k_used = k + 1
                breakdown = True
                break
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            it += 1
            res = abs(g[k + 1])
            history.append(res)
            k_used = k + 1
            if res / bnorm <= config.tol:
                converged = True
                break
            if breakdown or it >= config.maxiter:
                break
        if k_used > 0:
            y = sla.solve_triangular(H[:k_used, :k_used], g[:k_used])
            x = x + V[:k_used].T @ y
        if breakdown and not converged:
            break  # invariant Krylov subspace; no further progress possible
    if not converged:
        r = M(rhs - apply_op(x))
        converged = float(np.linalg.norm(r)) / bnorm <= config.tol
    return x, {"iterations": it, "residual_history": history, "converged": converged}


def assemble_schur_explicit(sys: CondensedSystem) -> sp.csr_matrix:
    """Explicit D - C A^-1 B, scattered per macro by trace indices."""
    rows, cols, vals = [], [], []

    def macro_task(e):
        op = sys.local_ops[e]
        mask = sys.gather_mask[e]
        if not mask.any():
            return None
        Y = _solve_local(op, op.B[:, mask])
        return -(op.C[mask] @ Y)

    blocks = sys.pool.map(macro_task, range(len(sys.local_ops)))
    for e, blk in enumerate(blocks):
        if blk is None:
            continue
        gi = sys.gather_idx[e]
        R, Cc = np.meshgrid(gi, gi, indexing="ij")
        rows.append(R.ravel())
        cols.append(Cc.ravel())
        vals.append(blk.ravel())
    for fid, start, nd, _ in sys.face_plan:
        D = sys.face_ops[fid].D
        gi = np.arange(start, start + nd)
        R, Cc = np.meshgrid(gi, gi, indexing="ij")
        rows.append(R.ravel())
        cols.append(Cc.ravel())
        vals.append(D.ravel())
    S = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(sys.zhat, sys.zhat),
    )
    return S.tocsr()


def reconstruct_interior(sys: CondensedSystem, uhat: np.ndarray) -> list:
    """Per macro, solve A U = R_u - B uhat with the stored factorization."""

    def macro_task(e):
        op = sys.local_ops[e]
        rhs = op.R_u - op.B @ sys.gather(uhat, e)
        return _solve_local(op, rhs)

    return sys.pool.map(macro_task, range(len(sys.local_ops)))


@dataclass
class SolveReport:
    p: int
    m: int
    n: int
    dof_local: int
    dof_global: int
    iterations: int
    converged: bool
    tol: float
    mode: str
    precond: str
    t_init_s: float
    t_local_s: float
    t_global_s: float
    t_reconstruct_s: float
    lbf: float
    worker_busy: list
    residual_history: list

    def to_record(self) -> dict:
        return {
            "p": self.p, "m": self.m, "n": self.n,
            "dof_local": self.dof_local, "dof_global": self.dof_global,
            "iterations": self.iterations, "converged": self.converged,
            "tol": self.tol, "mode": self.mode, "precond": self.precond,
            "t_init_s": self.t_init_s, "t_local_s": self.t_local_s,
            "t_global_s": self.t_global_s, "lbf": self.lbf,
        }


@dataclass
class Solution:
    local: list  # per macro [q_x | q_y | u] coefficient vectors
    uhat: np.ndarray
    report: SolveReport

    def u_coeffs(self, e: int) -> np.ndarray:
        v = self.local[e]
        Q = v.size // 3
        return v[2 * Q:]

    def q_coeffs(self, e: int) -> np.ndarray:
        v = self.local[e]
        Q = v.size // 3
        return v[:2 * Q].reshape(2, Q)


def assemble_system(
    mesh: MacroMesh, problem: ProblemData, stab: StabilizationConfig,
    p: int, pool: WorkerPool,
):
    local_ops = pool.map(
        lambda e: assemble_macro(mesh, e, p, problem, stab), mesh.macro_elements
    )
    unknown = [f for f in mesh.skeleton if f.tag != "D"]
    ops = pool.map(lambda f: assemble_face(mesh, f, p, problem, stab), unknown)
    face_ops = {f.id: op for f, op in zip(unknown, ops)}
    return local_ops, face_ops


def solve(
    mesh: MacroMesh,
    problem: ProblemData,
    stab: StabilizationConfig,
    config: SolverConfig,
    p: int,
):
    """Assemble, condense, run GMRES on the trace system and reconstruct."""
    pool = WorkerPool(config.workers)
    try:
        local_ops, face_ops = assemble_system(mesh, problem, stab, p, pool)
        t0 = time.perf_counter()
        sys = condense(mesh, local_ops, face_ops, config, pool=pool)
        t_init = time.perf_counter() - t0

        precond = None
        if config.preconditioner == "dinv":
            precond = lambda w: apply_preconditioner(sys, w)
        if config.mode == "mb":
            S = assemble_schur_explicit(sys)
            op = lambda v: S @ v
        else:
            op = lambda v: apply_schur(sys, v)

        sys.timings["local"] = 0.0
        t0 = time.perf_counter()
        uhat, info = gmres(op, sys.f_vec, config, precond=precond)
        t_gmres = time.perf_counter() - t0
        t_local = sys.timings["local"]

        t0 = time.perf_counter()
        local = reconstruct_interior(sys, uhat)
        t_rec = time.perf_counter() - t0

        report = SolveReport(
            p=p, m=mesh.macro_elements[0].m, n=mesh.n,
            dof_local=sys.dof_local, dof_global=sys.zhat,
            iterations=info["iterations"], converged=info["converged"],
            tol=config.tol, mode=config.mode, precond=config.preconditioner,
            t_init_s=t_init, t_local_s=t_local,
            t_global_s=max(t_gmres - t_local, 0.0), t_reconstruct_s=t_rec,
            lbf=pool.lbf, worker_busy=list(pool.busy),
            residual_history=info["residual_history"],
        )
        return Solution(local=local, uhat=uhat, report=report), sys
    finally:
        pool.close()
