"""Second-order cone programs and a certified solve contract.

A program is ``minimize c^T x`` subject to ``x_j >= 0`` for ``j`` in
``nonneg``, optional equalities ``E x = f`` and a list of second-order cone
constraints ``A x + b in Q``, where ``Q = {(t, y): t >= ||y||_2}``.  A cone
with a single output row is an ordinary linear inequality ``a^T x + b >= 0``.

The backend is Clarabel, a primal-dual interior-point solver that returns
infeasibility certificates rather than giving up on timeouts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

DEFAULT_TOL = 1e-8
# second attempt after a reduced-accuracy exit: lighter regularization helps when the
# optimum sits on a cone boundary
RETRY_SETTINGS = {"static_regularization_constant": 1e-10}


class MalformedProgramError(ValueError):
    pass


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SocConstraint:
    """``A x + b`` must lie in the second-order cone (first row dominates the rest).

    ``A`` is kept as COO triplets so that many cones can be stacked cheaply.
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    b: np.ndarray

    @classmethod
    def from_matrix(cls, A, b) -> SocConstraint:
        A = sp.coo_matrix(A)
        return cls(A.row.astype(np.int64), A.col.astype(np.int64), A.data.astype(float),
                   np.asarray(b, dtype=float))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def matrix(self, num_vars: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.dim, num_vars))


@dataclass(frozen=True)
class ConicProgram:
    num_vars: int
    c: np.ndarray
    nonneg: tuple[int, ...] = ()
    soc_constraints: tuple[SocConstraint, ...] = ()
    eq_A: sp.csr_matrix | None = None
    eq_b: np.ndarray | None = None
    names: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        if self.num_vars < 1:
            raise MalformedProgramError("program has no variables")
        if self.c.shape != (self.num_vars,) or not np.all(np.isfinite(self.c)):
            raise MalformedProgramError("objective must be a finite vector of length num_vars")
        if any(j < 0 or j >= self.num_vars for j in self.nonneg):
            raise MalformedProgramError("nonnegativity index out of range")
        for n, cone in enumerate(self.soc_constraints):
            if cone.dim < 1:
                raise MalformedProgramError(f"cone {n} has no output rows")
            if cone.rows.size and (cone.rows.min() < 0 or cone.rows.max() >= cone.dim):
                raise MalformedProgramError(f"cone {n} has a row index outside its output dimension")
            if cone.cols.size and (cone.cols.min() < 0 or cone.cols.max() >= self.num_vars):
                raise MalformedProgramError(f"cone {n} references a variable index >= num_vars")
            if not (np.all(np.isfinite(cone.vals)) and np.all(np.isfinite(cone.b))):
                raise MalformedProgramError(f"cone {n} has non-finite data")
        if self.eq_A is not None:
            if self.eq_A.shape[1] != self.num_vars or self.eq_b is None or self.eq_b.shape != (self.eq_A.shape[0],):
                raise MalformedProgramError("equality block has inconsistent shapes")

    def with_constraints(self, *cones: SocConstraint) -> ConicProgram:
        return ConicProgram(self.num_vars, self.c, self.nonneg, self.soc_constraints + tuple(cones),
                            self.eq_A, self.eq_b, self.names)

    def with_objective(self, c) -> ConicProgram:
        return ConicProgram(self.num_vars, np.asarray(c, dtype=float), self.nonneg,
                            self.soc_constraints, self.eq_A, self.eq_b, self.names)


@dataclass(frozen=True)
class SolveResult:
    status: Status
    objective: float
    x: np.ndarray
    residuals: dict[str, float]
    iterations: int = 0
    dual_objective: float = float("nan")

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class ProgramBuilder:
    """Incremental construction of a :class:`ConicProgram`.

    Allocate every variable block first, then add constraints.  Cone rows are
    given as dense coefficient arrays over a subset of columns.
    """

    def __init__(self):
        self.num_vars = 0
        self.names: dict[str, np.ndarray] = {}
        self.nonneg: list[int] = []
        self.cones: list[SocConstraint] = []
        self.objective: dict[int, float] = {}
        self._eq_rows: list[tuple[np.ndarray, np.ndarray, float]] = []

    def add_vars(self, name: str, shape=(), nonneg: bool = False) -> np.ndarray:
        count = int(np.prod(shape)) if shape != () else 1
        idx = np.arange(self.num_vars, self.num_vars + count).reshape(shape) if shape != () \
            else np.int64(self.num_vars)
        self.num_vars += count
        self.names[name] = np.asarray(idx)
        if nonneg:
            self.nonneg.extend(np.atleast_1d(idx).ravel().tolist())
        return idx

    def add_objective(self, cols, coeffs) -> None:
        for j, v in zip(np.atleast_1d(cols).ravel(), np.broadcast_to(coeffs, np.shape(np.atleast_1d(cols))).ravel()):
            self.objective[int(j)] = self.objective.get(int(j), 0.0) + float(v)

    def add_cone(self, cols: np.ndarray, coeffs: np.ndarray, offset: np.ndarray) -> None:
        """Cone rows ``coeffs[r] . x[cols] + offset[r]``; ``coeffs`` is ``(rows, len(cols))``."""
        cols = np.asarray(cols, dtype=np.int64).ravel()
        offset = np.asarray(offset, dtype=float).ravel()
        coeffs = np.asarray(coeffs, dtype=float).reshape(offset.size, cols.size)
        r, c = np.nonzero(coeffs)
        self.cones.append(SocConstraint(r, cols[c], coeffs[r, c], offset))

    def add_raw_cone(self, cone: SocConstraint) -> None:
        self.cones.append(cone)

    def add_equality(self, cols, coeffs, rhs: float) -> None:
        self._eq_rows.append((np.atleast_1d(cols).astype(int), np.atleast_1d(coeffs).astype(float), float(rhs)))

    def build(self) -> ConicProgram:
        c = np.zeros(self.num_vars)
        for j, v in self.objective.items():
            c[j] = v
        eq_A = eq_b = None
        if self._eq_rows:
            rows, cols, vals = [], [], []
            for r, (cs, vs, _) in enumerate(self._eq_rows):
                rows.extend([r] * len(cs))
                cols.extend(cs.tolist())
                vals.extend(vs.tolist())
            eq_A = sp.csr_matrix((vals, (rows, cols)), shape=(len(self._eq_rows), self.num_vars))
            eq_b = np.array([rhs for _, _, rhs in self._eq_rows])
        return ConicProgram(self.num_vars, c, tuple(sorted(set(self.nonneg))), tuple(self.cones),
                            eq_A, eq_b, dict(self.names))


def epigraph_quadratic(u: Sequence[int], t: int) -> SocConstraint:
    """Cone encoding ``sum_i x[u_i]^2 <= x[t]`` as ``||(x[t] - 1, 2 x[u])|| <= x[t] + 1``."""
    u = np.asarray(u, dtype=np.int64).ravel()
    m = u.size
    rows = np.concatenate([[0, 1], np.arange(2, 2 + m)])
    cols = np.concatenate([[t, t], u])
    vals = np.concatenate([[1.0, 1.0], np.full(m, 2.0)])
    b = np.zeros(2 + m)
    b[0], b[1] = 1.0, -1.0
    return SocConstraint(rows, cols, vals, b)


_STATUS_MAP = {
    "Solved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "MaxIterations": Status.MAX_ITERATIONS,
    "MaxTime": Status.MAX_ITERATIONS,
}


def solve_socp(program: ConicProgram, tol: float = DEFAULT_TOL, max_iter: int = 200) -> SolveResult:
    """Solve ``program`` to relative duality gap and feasibility residuals below ``tol``.

    Returns ``OPTIMAL`` only when the backend met the full tolerances and
    ``INFEASIBLE`` only with a primal infeasibility certificate.  Anything
    else (reduced-accuracy exits, dual infeasibility, numerical breakdown)
    is reported as ``NUMERICAL_FAILURE`` or ``MAX_ITERATIONS``.  A
    reduced-accuracy exit is retried once with ``RETRY_SETTINGS``.
    """
    if not (0 < tol <= 1e-2):
        raise ValueError(f"tolerance must lie in (0, 1e-2], got {tol}")
    program.validate()

    rows, cols, vals, blocks_b, cones = [], [], [], [], []
    offset = 0
    if program.eq_A is not None and program.eq_A.shape[0] > 0:
        eq = program.eq_A.tocoo()
        rows.append(eq.row)
        cols.append(eq.col)
        vals.append(eq.data)
        blocks_b.append(program.eq_b)
        cones.append(clarabel.ZeroConeT(eq.shape[0]))
        offset += eq.shape[0]
    if program.nonneg:
        idx = np.asarray(program.nonneg)
        rows.append(offset + np.arange(idx.size))
        cols.append(idx)
        vals.append(-np.ones(idx.size))
        blocks_b.append(np.zeros(idx.size))
        cones.append(clarabel.NonnegativeConeT(idx.size))
        offset += idx.size
    for cone in program.soc_constraints:
        rows.append(offset + cone.rows)
        cols.append(cone.cols)
        vals.append(-cone.vals)
        blocks_b.append(cone.b)
        cones.append(clarabel.NonnegativeConeT(1) if cone.dim == 1 else clarabel.SecondOrderConeT(cone.dim))
        offset += cone.dim
    if not cones:
        raise MalformedProgramError("program has no constraints")

    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(offset, program.num_vars))
    b = np.concatenate(blocks_b)

    result = _run_backend(program, A, b, cones, tol, max_iter, {})
    if result.status in (Status.NUMERICAL_FAILURE, Status.MAX_ITERATIONS):
        retry = _run_backend(program, A, b, cones, tol, max_iter, RETRY_SETTINGS)
        if retry.status in (Status.OPTIMAL, Status.INFEASIBLE):
            return retry
    return result


def _run_backend(program: ConicProgram, A, b, cones, tol: float, max_iter: int,
                 overrides: dict) -> SolveResult:
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_infeas_abs = tol
    settings.tol_infeas_rel = tol
    settings.presolve_enable = False
    for name, value in overrides.items():
        setattr(settings, name, value)
    P = sp.csc_matrix((program.num_vars, program.num_vars))
    try:
        solution = clarabel.DefaultSolver(P, program.c, A, b, cones, settings).solve()
    except Exception:  # backend panics surface as generic exceptions
        return SolveResult(Status.NUMERICAL_FAILURE, float("nan"), np.full(program.num_vars, np.nan), {})

    status = _STATUS_MAP.get(str(solution.status), Status.NUMERICAL_FAILURE)
    x = np.asarray(solution.x, dtype=float)
    pobj, dobj = float(solution.obj_val), float(solution.obj_val_dual)
    gap_abs = abs(pobj - dobj)
    residuals = {
        "primal": float(solution.r_prim),
        "dual": float(solution.r_dual),
        "gap": min(gap_abs, gap_abs / max(1.0, min(abs(pobj), abs(dobj)))) if np.isfinite(gap_abs) else float("inf"),
    }
    if status is Status.INFEASIBLE:
        return SolveResult(status, float("inf"), x, residuals, solution.iterations)
    return SolveResult(status, pobj, x, residuals, solution.iterations, dobj)


def format_program(program: ConicProgram) -> str:
    """Human-readable listing of the program for solver triage."""
    lines = [f"variables: {program.num_vars}"]
    for name, idx in program.names.items():
        idx = np.atleast_1d(idx)
        lines.append(f"  {name}: shape {idx.shape}, columns {idx.min()}..{idx.max()}")
    nz = np.flatnonzero(program.c)
    lines.append("minimize " + " + ".join(f"{program.c[j]:.6g}*x[{j}]" for j in nz[:20])
                 + (" + ..." if nz.size > 20 else ""))
    lines.append(f"nonneg: {len(program.nonneg)} variables")
    if program.eq_A is not None:
        lines.append(f"equalities: {program.eq_A.shape[0]}")
    for n, cone in enumerate(program.soc_constraints):
        kind = "linear" if cone.dim == 1 else f"soc({cone.dim})"
        lines.append(f"cone {n}: {kind}, nnz={cone.vals.size}, |b|={np.linalg.norm(cone.b):.3g}")
    return "\n".join(lines)
