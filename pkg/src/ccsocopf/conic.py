"""A small conic-program IR and a Clarabel adapter.

Programs have scalar variables with bounds, a linear objective, linear
equalities and inequalities, standard and rotated second-order cones, and
convex quadratic inequalities written as sums of squared affine terms.  The
adapter maps everything onto Clarabel's ``A x + s = b, s in K`` form.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8


class ConicBuildError(ValueError):
    pass


class Expr:
    """Affine expression ``sum(coef * x[idx]) + const`` over program variables."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict | None = None, const: float = 0.0):
        self.terms = {} if terms is None else terms
        self.const = float(const)

    @staticmethod
    def lift(v) -> "Expr":
        if isinstance(v, Expr):
            return v
        return Expr({}, float(v))

    def copy(self) -> "Expr":
        return Expr(dict(self.terms), self.const)

    def __add__(self, other):
        other = Expr.lift(other)
        out = dict(self.terms)
        for k, a in other.terms.items():
            out[k] = out.get(k, 0.0) + a
        return Expr(out, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Expr({k: -a for k, a in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Expr.lift(other))

    def __rsub__(self, other):
        return Expr.lift(other) + (-self)

    def __mul__(self, k):
        k = float(k)
        return Expr({i: k * a for i, a in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(a * x[i] for i, a in self.terms.items())

    def __repr__(self):
        return f"Expr({self.terms}, {self.const})"


def lin_sum(items) -> Expr:
    out: dict = {}
    const = 0.0
    for e in items:
        e = Expr.lift(e)
        const += e.const
        for k, a in e.terms.items():
            out[k] = out.get(k, 0.0) + a
    return Expr(out, const)


class ConeKind(enum.Enum):
    STANDARD = "standard"  # ||x|| <= t
    ROTATED = "rotated"  # sum x^2 <= u * v, u, v >= 0


@dataclass
class Cone:
    kind: ConeKind
    x: list[Expr]
    t: Expr | None = None
    u: Expr | None = None
    v: Expr | None = None
    name: str = ""


@dataclass
class QuadIneq:
    """``sum(e**2 for e in terms) <= rhs`` with constant ``rhs >= 0``."""

    terms: list[Expr]
    rhs: float
    name: str = ""


@dataclass
class ConicProgram:
    names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    objective: Expr = field(default_factory=Expr)
    eqs: list[tuple[Expr, str]] = field(default_factory=list)  # expr == 0
    ineqs: list[tuple[Expr, str]] = field(default_factory=list)  # expr <= 0
    cones: list[Cone] = field(default_factory=list)
    quads: list[QuadIneq] = field(default_factory=list)

    @property
    def n_var(self) -> int:
        return len(self.names)

    def add_var(self, name: str, lb: float = -math.inf, ub: float = math.inf) -> Expr:
        if lb > ub:
            raise ConicBuildError(f"variable {name}: lower bound {lb} above upper bound {ub}")
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        return Expr({len(self.names) - 1: 1.0})

    def add_vars(self, prefix: str, n: int, lb=-math.inf, ub=math.inf) -> list[Expr]:
        lb = np.broadcast_to(np.asarray(lb, float), (n,))
        ub = np.broadcast_to(np.asarray(ub, float), (n,))
        return [self.add_var(f"{prefix}[{k}]", lb[k], ub[k]) for k in range(n)]

    def _check(self, e: Expr, where: str) -> Expr:
        e = Expr.lift(e)
        for k in e.terms:
            if not 0 <= k < self.n_var:
                raise ConicBuildError(f"{where}: references undeclared variable {k}")
        return e

    def add_eq(self, lhs, rhs=0.0, name: str = "") -> int:
        self.eqs.append((self._check(Expr.lift(lhs) - rhs, name), name))
        return len(self.eqs) - 1

    def add_le(self, lhs, rhs=0.0, name: str = "") -> int:
        self.ineqs.append((self._check(Expr.lift(lhs) - rhs, name), name))
        return len(self.ineqs) - 1

    def add_soc(self, x_terms, t, name: str = "") -> int:
        x = [self._check(e, name) for e in x_terms]
        self.cones.append(Cone(ConeKind.STANDARD, x, t=self._check(t, name), name=name))
        return len(self.cones) - 1

    def add_quad_le(self, terms, rhs: float, name: str = "") -> int:
        if rhs < 0:
            raise ConicBuildError(f"{name}: quadratic bound must be nonnegative, got {rhs}")
        self.quads.append(QuadIneq([self._check(e, name) for e in terms], float(rhs), name))
        return len(self.quads) - 1

    def minimize(self, expr) -> None:
        self.objective = self._check(expr, "objective")

    def to_dict(self) -> dict:
        def ed(e: Expr):
            return {"terms": {str(k): a for k, a in sorted(e.terms.items())}, "const": e.const}

        def bound(v):
            return None if math.isinf(v) else v

        return {
            "variables": [
                {"name": n, "lb": bound(lo), "ub": bound(hi)}
                for n, lo, hi in zip(self.names, self.lb, self.ub)
            ],
            "objective": ed(self.objective),
            "eq": [{"name": n, "expr": ed(e)} for e, n in self.eqs],
            "le": [{"name": n, "expr": ed(e)} for e, n in self.ineqs],
            "cones": [
                {
                    "name": c.name,
                    "kind": c.kind.value,
                    "x": [ed(e) for e in c.x],
                    **({"t": ed(c.t)} if c.t is not None else {"u": ed(c.u), "v": ed(c.v)}),
                }
                for c in self.cones
            ],
            "quad": [{"name": q.name, "rhs": q.rhs, "terms": [ed(e) for e in q.terms]} for q in self.quads],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def add_rotated_soc(prog: ConicProgram, x_terms, u, v, name: str = "") -> int:
    """Add ``sum(x**2) <= u * v`` with ``u, v >= 0`` implied by the cone."""
    x = list(x_terms)
    if not x:
        raise ConicBuildError(f"{name}: rotated cone needs at least one x term")
    if isinstance(u, (list, tuple, np.ndarray)) or isinstance(v, (list, tuple, np.ndarray)):
        raise ConicBuildError(f"{name}: u and v must be scalar expressions")
    cone = Cone(
        ConeKind.ROTATED,
        [prog._check(e, name) for e in x],
        u=prog._check(u, name),
        v=prog._check(v, name),
        name=name,
    )
    prog.cones.append(cone)
    return len(prog.cones) - 1


# ---------------------------------------------------------------------------
# residuals


@dataclass
class ResidualReport:
    """Signed residuals; positive means violated by that amount."""

    entries: list[tuple[str, str, float]]  # (kind, name, residual)
    rotated_slack: np.ndarray  # u*v - sum x^2 per rotated cone, in cone order

    @property
    def max_violation(self) -> float:
        return max((r for _, _, r in self.entries), default=0.0)

    def violated(self, tol: float) -> list[tuple[str, str, float]]:
        return [e for e in self.entries if e[2] > tol]


def check_solution(prog: ConicProgram, values, tol: float = 1e-6) -> ResidualReport:
    x = np.asarray(values, dtype=float)
    if x.shape != (prog.n_var,):
        raise ValueError(f"expected {prog.n_var} values, got shape {x.shape}")
    out = []
    for k, (lo, hi) in enumerate(zip(prog.lb, prog.ub)):
        if not math.isinf(lo):
            out.append(("lb", prog.names[k], lo - x[k]))
        if not math.isinf(hi):
            out.append(("ub", prog.names[k], x[k] - hi))
    out += [("eq", n, abs(e.value(x))) for e, n in prog.eqs]
    out += [("le", n, e.value(x)) for e, n in prog.ineqs]
    rot = []
    for c in prog.cones:
        xs = np.array([e.value(x) for e in c.x])
        if c.kind is ConeKind.STANDARD:
            out.append(("soc", c.name, float(np.linalg.norm(xs) - c.t.value(x))))
        else:
            u, v = c.u.value(x), c.v.value(x)
            slack = u * v - float(xs @ xs)
            rot.append(slack)
            out.append(("rsoc", c.name, max(-slack, -u, -v)))
    for q in prog.quads:
        vals = np.array([e.value(x) for e in q.terms])
        out.append(("quad", q.name, float(vals @ vals) - q.rhs))
    return ResidualReport(out, np.array(rot))


# ---------------------------------------------------------------------------
# solving


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class ConicSolution:
    status: SolveStatus
    x: np.ndarray
    objective_value: float
    iterations: int = 0
    runtime: float = 0.0
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def value(self, e: Expr) -> float:
        return e.value(self.x)

    def values(self, exprs) -> np.ndarray:
        return np.array([e.value(self.x) for e in exprs])


class _Rows:
    """COO accumulator for the rows of ``A x + s = b``."""

    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, coefs: dict, rhs: float, sign: float = 1.0):
        row = len(self.b)
        for k, a in coefs.items():
            if a != 0.0:
                self.r.append(row)
                self.c.append(k)
                self.v.append(sign * a)
        self.b.append(rhs)

    def add_cone_entry(self, e: Expr):
        # cone slot s = e  <=>  (-a) x + s = const
        self.add(e.terms, e.const, sign=-1.0)

    def __len__(self):
        return len(self.b)


class ClarabelBackend:
    """Interior-point backend; ``AlmostSolved`` counts only if residuals pass."""

    name = "clarabel"

    def __init__(self, tol: float = DEFAULT_TOL, max_iter: int = 200, verbose: bool = False, equilibrate: bool = False):
        self.tol = tol
        self.max_iter = max_iter
        self.verbose = verbose
        # Ruiz equilibration stalls the lifted OPF programs short of tolerance
        self.equilibrate = equilibrate

    def assemble(self, prog: ConicProgram):
        import clarabel

        zero, nonneg = _Rows(), _Rows()
        for e, _ in prog.eqs:
            zero.add(e.terms, -e.const)
        for k, (lo, hi) in enumerate(zip(prog.lb, prog.ub)):
            if lo == hi:
                zero.add({k: 1.0}, hi)
                continue
            if not math.isinf(hi):
                nonneg.add({k: 1.0}, hi)
            if not math.isinf(lo):
                nonneg.add({k: -1.0}, -lo)
        for e, _ in prog.ineqs:
            nonneg.add(e.terms, -e.const)
        socs = _Rows()
        sizes = []
        for c in prog.cones:
            if c.kind is ConeKind.STANDARD:
                entries = [c.t] + c.x
            else:
                entries = [c.u + c.v, c.u - c.v] + [2.0 * e for e in c.x]
            for e in entries:
                socs.add_cone_entry(e)
            sizes.append(len(entries))
        for q in prog.quads:
            entries = [Expr({}, math.sqrt(q.rhs))] + q.terms
            for e in entries:
                socs.add_cone_entry(e)
            sizes.append(len(entries))

        blocks = [zero, nonneg, socs]
        offs = np.cumsum([0] + [len(b) for b in blocks])
        rows = np.concatenate([np.asarray(b.r, int) + o for b, o in zip(blocks, offs)])
        cols = np.concatenate([np.asarray(b.c, int) for b in blocks])
        vals = np.concatenate([np.asarray(b.v, float) for b in blocks])
        A = sp.csc_matrix((vals, (rows, cols)), shape=(int(offs[-1]), prog.n_var))
        b = np.concatenate([np.asarray(blk.b, float) for blk in blocks])
        cones = []
        if len(zero):
            cones.append(clarabel.ZeroConeT(len(zero)))
        if len(nonneg):
            cones.append(clarabel.NonnegativeConeT(len(nonneg)))
        cones += [clarabel.SecondOrderConeT(m) for m in sizes]
        return A, b, cones

    def _run(self, prog, A, b, cones, q, equilibrate):
        import clarabel

        settings = clarabel.DefaultSettings()
        settings.verbose = self.verbose
        settings.max_iter = self.max_iter
        settings.tol_gap_abs = self.tol
        settings.tol_gap_rel = self.tol
        settings.tol_feas = self.tol
        settings.equilibrate_enable = equilibrate
        P = sp.csc_matrix((prog.n_var, prog.n_var))
        res = clarabel.DefaultSolver(P, q, A, b, cones, settings).solve()
        x = np.asarray(res.x, dtype=float)
        st = str(res.status)
        if st == "Solved":
            status = SolveStatus.OPTIMAL
        elif st.endswith("PrimalInfeasible"):
            status = SolveStatus.INFEASIBLE
        elif st.endswith("DualInfeasible"):
            status = SolveStatus.UNBOUNDED
        elif st == "AlmostSolved":
            viol = check_solution(prog, x).max_violation
            status = SolveStatus.OPTIMAL if viol <= 1e3 * self.tol else SolveStatus.NUMERICAL_FAILURE
            log.info("clarabel AlmostSolved, max residual %.2e", viol)
        else:
            status = SolveStatus.NUMERICAL_FAILURE
        return status, x, int(res.iterations), st

    def solve(self, prog: ConicProgram) -> ConicSolution:
        """One attempt, plus a retry with equilibration flipped on numerical trouble."""
        t0 = time.perf_counter()
        A, b, cones = self.assemble(prog)
        q = np.zeros(prog.n_var)
        for k, a in prog.objective.terms.items():
            q[k] = a
        scale = np.abs(q).max() if q.any() else 1.0
        status, x, iters, st = self._run(prog, A, b, cones, q / scale, self.equilibrate)
        if status == SolveStatus.NUMERICAL_FAILURE or st == "AlmostSolved":
            retry = self._run(prog, A, b, cones, q / scale, not self.equilibrate)
            if retry[0] == SolveStatus.OPTIMAL and (status != SolveStatus.OPTIMAL or retry[3] == "Solved"):
                log.info("clarabel retry with equilibrate=%s: %s", not self.equilibrate, retry[3])
                status, x, it2, st = retry
                iters += it2
        return ConicSolution(
            status=status,
            x=x,
            objective_value=float(prog.objective.value(x)),
            iterations=iters,
            runtime=time.perf_counter() - t0,
            message=st,
        )


def solve(prog: ConicProgram, backend=None, tol: float = DEFAULT_TOL) -> ConicSolution:
    backend = ClarabelBackend(tol=tol) if backend is None else backend
    return backend.solve(prog)
