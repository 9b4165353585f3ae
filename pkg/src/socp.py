"""
Cone Programs
Canonical linear/second-order-cone program representation and its solver.

Programs are assembled from LinExpr objects over named scalar variables and
handed to Clarabel (an interior-point conic solver) through cvxpy. Residuals
and the duality gap are recomputed here so results can be audited.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
import scipy.sparse as sp


logger = logging.getLogger(__name__)

Number = Union[int, float]


class ProgramError(ValueError):
    """Raised for malformed programs or incomplete assignments."""


class SolveError(RuntimeError):
    """A program could not be solved to optimality."""


class LinExpr:
    """Affine expression sum(coef * x[idx]) + const."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: Optional[Mapping[int, float]] = None, const: float = 0.0):
        self.terms: Dict[int, float] = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def lift(value: Union["LinExpr", Number]) -> "LinExpr":
        return value if isinstance(value, LinExpr) else LinExpr(const=float(value))

    @staticmethod
    def total(exprs: Iterable[Union["LinExpr", Number]]) -> "LinExpr":
        out = LinExpr()
        for e in exprs:
            out._iadd(LinExpr.lift(e), 1.0)
        return out

    def _iadd(self, other: "LinExpr", sign: float) -> "LinExpr":
        for idx, coef in other.terms.items():
            self.terms[idx] = self.terms.get(idx, 0.0) + sign * coef
        self.const += sign * other.const
        return self

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def __add__(self, other):
        return self.copy()._iadd(LinExpr.lift(other), 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy()._iadd(LinExpr.lift(other), -1.0)

    def __rsub__(self, other):
        return LinExpr.lift(other)._iadd(self, -1.0)

    def __neg__(self):
        return LinExpr({i: -c for i, c in self.terms.items()}, -self.const)

    def __mul__(self, scalar: Number):
        if isinstance(scalar, LinExpr):
            raise ProgramError("products of expressions are not affine")
        s = float(scalar)
        return LinExpr({i: s * c for i, c in self.terms.items()}, s * self.const)

    __rmul__ = __mul__

    def __truediv__(self, scalar: Number):
        return self * (1.0 / float(scalar))

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def __repr__(self) -> str:
        return f"LinExpr({self.terms}, {self.const})"


@dataclass
class Row:
    expr: LinExpr
    rhs: float
    family: str
    label: str


@dataclass
class Cone:
    """||v|| <= t"""

    t: LinExpr
    v: List[LinExpr]
    family: str
    label: str


class ConeProgram:
    """
    Minimize a linear objective subject to linear equalities, linear
    inequalities (expr <= rhs), nonnegative variables and second-order cones.
    """

    def __init__(self, name: str = "program"):
        self.name = name
        self.names: List[str] = []
        self.index: Dict[str, int] = {}
        self.nonneg: List[int] = []
        self.objective = LinExpr()
        self.eq: List[Row] = []
        self.le: List[Row] = []
        self.cones: List[Cone] = []

    @property
    def n_variables(self) -> int:
        return len(self.names)

    def variable(self, name: str, nonneg: bool = False) -> LinExpr:
        if name in self.index:
            raise ProgramError(f"variable {name} declared twice")
        idx = len(self.names)
        self.names.append(name)
        self.index[name] = idx
        if nonneg:
            self.nonneg.append(idx)
        return LinExpr({idx: 1.0})

    def var(self, name: str) -> LinExpr:
        if name not in self.index:
            raise ProgramError(f"unknown variable {name}")
        return LinExpr({self.index[name]: 1.0})

    def minimize(self, expr: Union[LinExpr, Number]):
        self.objective = LinExpr.lift(expr)
        self._check(self.objective, "objective")

    def add_eq(self, expr: Union[LinExpr, Number], rhs: float = 0.0, family: str = "eq", label: str = ""):
        expr = LinExpr.lift(expr)
        self._check(expr, label or family)
        self.eq.append(Row(expr, float(rhs), family, label or family))

    def add_le(self, expr: Union[LinExpr, Number], rhs: float = 0.0, family: str = "le", label: str = ""):
        expr = LinExpr.lift(expr)
        self._check(expr, label or family)
        self.le.append(Row(expr, float(rhs), family, label or family))

    def add_ge(self, expr: Union[LinExpr, Number], rhs: float = 0.0, family: str = "le", label: str = ""):
        self.add_le(-LinExpr.lift(expr), -float(rhs), family, label)

    def add_soc(self, t: Union[LinExpr, Number], v: Sequence[Union[LinExpr, Number]], family: str = "soc", label: str = ""):
        t = LinExpr.lift(t)
        v = [LinExpr.lift(e) for e in v]
        for e in [t, *v]:
            self._check(e, label or family)
        self.cones.append(Cone(t, v, family, label or family))

    def _check(self, expr: LinExpr, where: str):
        n = len(self.names)
        bad = [i for i in expr.terms if not 0 <= i < n]
        if bad:
            raise ProgramError(f"{where} references undeclared variables {bad}")

    def assignment(self, point: Union[Mapping[str, float], np.ndarray]) -> np.ndarray:
        """Turn a name -> value mapping (or a full vector) into a vector."""
        if isinstance(point, np.ndarray):
            if point.shape != (self.n_variables,):
                raise ProgramError(f"expected {self.n_variables} values, got shape {point.shape}")
            return point.astype(float)
        missing = [n for n in self.names if n not in point]
        if missing:
            raise ProgramError(f"assignment misses {len(missing)} variables, e.g. {missing[:3]}")
        return np.array([float(point[n]) for n in self.names])


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class FeasibilityReport:
    primal_eq: float
    cone: float
    objective: float
    worst_eq: str = ""
    worst_cone: str = ""


@dataclass
class Solution:
    status: SolveStatus
    x: Optional[np.ndarray]
    objective: float
    residuals: Dict[str, float] = field(default_factory=dict)
    dual_objective: Optional[float] = None
    names: Sequence[str] = ()

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL

    def value(self, expr: Union[LinExpr, str]) -> float:
        if self.x is None:
            raise ProgramError(f"no primal values, status is {self.status.value}")
        if isinstance(expr, str):
            return float(self.x[list(self.names).index(expr)])
        return expr.value(self.x)

    def values(self, exprs: Sequence[LinExpr]) -> np.ndarray:
        return np.array([self.value(e) for e in exprs])

    def as_dict(self) -> Dict[str, float]:
        if self.x is None:
            return {}
        return dict(zip(self.names, self.x.tolist()))


def _matrix(rows: Sequence[Row], n: int) -> Tuple[sp.csr_matrix, np.ndarray]:
    data, ri, ci = [], [], []
    rhs = np.empty(len(rows))
    for r, row in enumerate(rows):
        for idx, coef in row.expr.terms.items():
            if coef != 0.0:
                data.append(coef)
                ri.append(r)
                ci.append(idx)
        rhs[r] = row.rhs - row.expr.const
    return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n)), rhs


def _affine_block(exprs: Sequence[LinExpr], n: int) -> Tuple[sp.csr_matrix, np.ndarray]:
    rows = [Row(e, 0.0, "", "") for e in exprs]
    mat, neg_const = _matrix(rows, n)
    return mat, -neg_const


def evaluate(program: ConeProgram, point: Union[Mapping[str, float], np.ndarray]) -> FeasibilityReport:
    """
    Worst equality residual, worst cone/inequality violation and objective at a point.

    Cone violation is max over ||v|| - t, inequality excess and -x for
    nonnegative variables; it is <= 0 at a feasible point.
    """
    x = program.assignment(point)

    worst_eq, eq_label = 0.0, ""
    for row in program.eq:
        res = abs(row.expr.value(x) - row.rhs)
        if res > worst_eq:
            worst_eq, eq_label = res, row.label

    worst_cone, cone_label = -np.inf, ""
    for row in program.le:
        res = row.expr.value(x) - row.rhs
        if res > worst_cone:
            worst_cone, cone_label = res, row.label
    for idx in program.nonneg:
        if -x[idx] > worst_cone:
            worst_cone, cone_label = -x[idx], program.names[idx]
    for cone in program.cones:
        norm = float(np.linalg.norm([e.value(x) for e in cone.v])) if cone.v else 0.0
        res = norm - cone.t.value(x)
        if res > worst_cone:
            worst_cone, cone_label = res, cone.label
    if worst_cone == -np.inf:
        worst_cone = 0.0

    return FeasibilityReport(
        primal_eq=worst_eq,
        cone=float(worst_cone),
        objective=program.objective.value(x),
        worst_eq=eq_label,
        worst_cone=cone_label,
    )


def _presolve(program: ConeProgram, tol: float) -> Tuple[Optional[str], List[Row], List[Row]]:
    """
    Rows with variables, as (message, eq rows, le rows); message names a
    violated empty row. The program itself is left untouched.
    """
    kept_rows = {}
    for kind, rows in (("eq", program.eq), ("le", program.le)):
        kept = []
        for row in rows:
            if any(c != 0.0 for c in row.expr.terms.values()):
                kept.append(row)
                continue
            gap = row.expr.const - row.rhs
            if (kind == "eq" and abs(gap) > tol) or (kind == "le" and gap > tol):
                return f"empty row {row.label} is violated by {gap:.3g}", [], []
        kept_rows[kind] = kept
    return None, kept_rows["eq"], kept_rows["le"]


def solve(program: ConeProgram, tol: float = 1e-8, max_iter: int = 200, residual_tol: float = 1e-6) -> Solution:
    """
    Solve a cone program.

    Args:
        program: Program to solve
        tol: Solver feasibility/gap tolerance
        max_iter: Interior-point iteration cap
        residual_tol: Bound the recomputed residuals must meet for status optimal

    Returns:
        Solution; non-optimal statuses carry no primal values
    """
    n = program.n_variables
    names = tuple(program.names)
    infeasible_row, eq_rows, le_rows = _presolve(program, tol)
    if infeasible_row:
        logger.info("%s: presolve found infeasibility (%s)", program.name, infeasible_row)
        return Solution(SolveStatus.INFEASIBLE, None, np.inf, names=names)

    x = cp.Variable(n)
    constraints = []
    eq_con = le_con = nonneg_con = None
    if eq_rows:
        a_eq, b_eq = _matrix(eq_rows, n)
        eq_con = a_eq @ x == b_eq
        constraints.append(eq_con)
    if le_rows:
        g, h = _matrix(le_rows, n)
        le_con = g @ x <= h
        constraints.append(le_con)
    if program.nonneg:
        nonneg_con = x[program.nonneg] >= 0
        constraints.append(nonneg_con)

    by_dim: Dict[int, List[Cone]] = defaultdict(list)
    for cone in program.cones:
        by_dim[len(cone.v)].append(cone)
    soc_cons = []
    for dim in sorted(by_dim):
        group = by_dim[dim]
        t_mat, t0 = _affine_block([c.t for c in group], n)
        t_expr = t_mat @ x + t0
        if dim == 0:
            soc_cons.append((group, t_expr >= 0))
            constraints.append(soc_cons[-1][1])
            continue
        coords = []
        for j in range(dim):
            v_mat, v0 = _affine_block([c.v[j] for c in group], n)
            coords.append(v_mat @ x + v0)
        con = cp.SOC(t_expr, cp.vstack(coords), axis=0)
        soc_cons.append((group, con))
        constraints.append(con)

    c_mat, c0 = _affine_block([program.objective], n)
    problem = cp.Problem(cp.Minimize(c_mat @ x + c0[0]), constraints)

    try:
        problem.solve(
            solver=cp.CLARABEL,
            max_iter=max_iter,
            tol_gap_abs=tol,
            tol_gap_rel=tol,
            tol_feas=tol,
        )
    except cp.error.SolverError as e:
        logger.warning("%s: solver error: %s", program.name, e)
        return Solution(SolveStatus.NUMERICAL_FAILURE, None, np.nan, names=names)

    status = problem.status
    logger.debug("%s: %d variables, status %s", program.name, n, status)
    if status == cp.INFEASIBLE:
        return Solution(SolveStatus.INFEASIBLE, None, np.inf, names=names)
    if status == cp.UNBOUNDED:
        return Solution(SolveStatus.UNBOUNDED, None, -np.inf, names=names)
    if status != cp.OPTIMAL or x.value is None:
        logger.warning("%s: solver returned %s", program.name, status)
        return Solution(SolveStatus.NUMERICAL_FAILURE, None, np.nan, names=names)

    xv = np.asarray(x.value, dtype=float)
    report = evaluate(program, xv)
    gap = _complementarity(program, xv, le_rows, le_con, nonneg_con, soc_cons)
    rel_gap = abs(gap) / max(1.0, abs(report.objective)) if np.isfinite(gap) else np.nan
    residuals = {"primal_eq": report.primal_eq, "cone": max(report.cone, 0.0), "duality_gap": rel_gap}

    result_status = SolveStatus.OPTIMAL
    if report.primal_eq > residual_tol or report.cone > residual_tol or not rel_gap <= residual_tol:
        logger.warning("%s: residuals above %.1e after solve: %s", program.name, residual_tol, residuals)
        result_status = SolveStatus.NUMERICAL_FAILURE

    return Solution(
        status=result_status,
        x=xv,
        objective=report.objective,
        residuals=residuals,
        dual_objective=report.objective - gap if np.isfinite(gap) else None,
        names=names,
    )


def _complementarity(program, xv, le_rows, le_con, nonneg_con, soc_cons) -> float:
    """
    Primal objective minus dual objective, computed from complementary products
    so it does not depend on the sign convention of the equality duals.
    """
    try:
        gap = 0.0
        if le_con is not None:
            slack = np.array([row.rhs - row.expr.value(xv) for row in le_rows])
            gap += float(np.asarray(le_con.dual_value) @ slack)
        if nonneg_con is not None:
            gap += float(np.asarray(nonneg_con.dual_value) @ xv[program.nonneg])
        for group, con in soc_cons:
            t_val = np.array([c.t.value(xv) for c in group])
            dual = con.dual_value
            if isinstance(dual, list):
                mu, lam = np.asarray(dual[0]).ravel(), np.asarray(dual[1])
                v_val = np.array([[e.value(xv) for e in c.v] for c in group]).T
                gap += float(mu @ t_val + np.sum(lam.reshape(v_val.shape) * v_val))
            else:
                gap += float(np.asarray(dual).ravel() @ t_val)
        return gap
    except (TypeError, ValueError, AttributeError) as e:
        logger.debug("duality gap unavailable: %s", e)
        return np.nan


def dump(program: ConeProgram) -> str:
    """Canonical plain-text form of a program, stable across runs."""

    def fmt(expr: LinExpr) -> str:
        parts = [f"{c:+.12g}*{program.names[i]}" for i, c in sorted(expr.terms.items()) if c != 0.0]
        if expr.const != 0.0 or not parts:
            parts.append(f"{expr.const:+.12g}")
        return " ".join(parts)

    lines = [f"program {program.name}", f"minimize {fmt(program.objective)}", f"variables {program.n_variables}"]
    nonneg = set(program.nonneg)
    for i, name in enumerate(program.names):
        lines.append(f"  {name}{' >= 0' if i in nonneg else ''}")
    for row in program.eq:
        lines.append(f"eq  [{row.family}] {row.label}: {fmt(row.expr)} = {row.rhs:.12g}")
    for row in program.le:
        lines.append(f"le  [{row.family}] {row.label}: {fmt(row.expr)} <= {row.rhs:.12g}")
    for cone in program.cones:
        vec = ", ".join(fmt(e) for e in cone.v)
        lines.append(f"soc [{cone.family}] {cone.label}: ||({vec})|| <= {fmt(cone.t)}")
    return "\n".join(lines) + "\n"
