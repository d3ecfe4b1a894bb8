"""Nonlinear least squares: dense and block-sparse Levenberg-Marquardt,
plus a penalty-schedule wrapper for hard constraints.

Problems are given as residual blocks over a fixed partition of the
variable vector into contiguous blocks. Each block evaluator returns its
residual and one analytic Jacobian piece per variable block it touches,
which is enough to assemble either a dense Jacobian or the block-sparse
normal equations without ever forming the full matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    pass


_DIAG_REL_FLOOR = 1e-2


@dataclass
class SolverOptions:
    max_iter: int = 100
    cost_tol: float = 1e-12        # relative accepted-cost decrease
    step_tol: float = 1e-12
    initial_damping: float = 1e-3  # 0 allowed: first trial is pure Gauss-Newton
    damping_max: float = 1e14


@dataclass
class SolveReport:
    x: np.ndarray
    cost: float
    iterations: int
    termination: str
    penalty_weights: list = field(default_factory=list)
    violation: float = 0.0
    violation_flagged: bool = False
    stage_violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cost": float(self.cost),
            "iterations": int(self.iterations),
            "termination": self.termination,
            "penalty_weights": [float(w) for w in self.penalty_weights],
            "violation": float(self.violation),
            "violation_flagged": bool(self.violation_flagged),
            "stage_violations": [float(v) for v in self.stage_violations],
        }


class ResidualProblem:
    """Residual blocks over contiguous variable blocks.

    block_sizes: size of each variable block; their sum is the variable
    count n. An evaluator fn(x) must return (r, jacs) with r of shape
    (dim,) and jacs a sequence of (dim, size_b) arrays, one per entry of
    var_block_ids in order.
    """

    def __init__(self, block_sizes):
        self.block_sizes = [int(s) for s in block_sizes]
        if not self.block_sizes or any(s < 1 for s in self.block_sizes):
            raise SolverError("variable blocks must be non-empty")
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self.n = int(self.offsets[-1])
        self.blocks = []  # (dim, var_block_ids, fn, label)

    def add_block(self, dim, var_block_ids, fn, label=""):
        dim = int(dim)
        ids = tuple(int(i) for i in var_block_ids)
        if dim < 1 or not ids:
            raise SolverError("residual block needs dim >= 1 and variables")
        for i in ids:
            if not (0 <= i < len(self.block_sizes)):
                raise SolverError(f"unknown variable block {i}")
        self.blocks.append((dim, ids, fn, label))

    @property
    def m(self) -> int:
        return sum(d for d, _, _, _ in self.blocks)

    def structure(self):
        """Sparsity pattern: (residual-block index, variable-block index)."""
        return [(bi, vb) for bi, (_, ids, _, _) in enumerate(self.blocks) for vb in ids]

    def evaluate(self, x):
        """Per-block residuals and Jacobian pieces.

        Returns (results, bad) where results[i] = (r, jacs) and bad is the
        index of the first block that produced a non-finite residual or
        raised, or None. Callers decide whether bad is fatal.
        """
        results = []
        for bi, (dim, ids, fn, _) in enumerate(self.blocks):
            try:
                r, jacs = fn(x)
            except (ValueError, ArithmeticError):
                return results, bi
            r = np.asarray(r, dtype=np.float64).reshape(dim)
            if not np.all(np.isfinite(r)):
                return results, bi
            results.append((r, [np.asarray(j, dtype=np.float64) for j in jacs]))
        return results, None

    def residuals(self, x):
        res, bad = self.evaluate(x)
        if bad is not None:
            raise SolverError(f"non-finite residual in block {bad} "
                              f"({self.blocks[bad][3] or 'unlabeled'})")
        return np.concatenate([r for r, _ in res]) if res else np.zeros(0)

    def dense_jacobian(self, x):
        res, bad = self.evaluate(x)
        if bad is not None:
            raise SolverError(f"non-finite residual in block {bad}")
        J = np.zeros((self.m, self.n))
        row = 0
        for (dim, ids, _, _), (r, jacs) in zip(self.blocks, res):
            for vb, jb in zip(ids, jacs):
                o = self.offsets[vb]
                J[row:row + dim, o:o + self.block_sizes[vb]] = jb
            row += dim
        return J


def _cost_of(results):
    return float(sum(r @ r for r, _ in results))


def _assemble_dense(problem, results):
    n = problem.n
    H = np.zeros((n, n))
    g = np.zeros(n)
    for (dim, ids, _, _), (r, jacs) in zip(problem.blocks, results):
        for vb_i, J_i in zip(ids, jacs):
            oi, si = problem.offsets[vb_i], problem.block_sizes[vb_i]
            g[oi:oi + si] += J_i.T @ r
            for vb_j, J_j in zip(ids, jacs):
                oj, sj = problem.offsets[vb_j], problem.block_sizes[vb_j]
                H[oi:oi + si, oj:oj + sj] += J_i.T @ J_j
    return H, g


def _assemble_blocks(problem, results):
    """Normal equations as per-block pieces: Hbb[(i,j)] with i >= j, gb[i]."""
    Hbb = {}
    gb = [np.zeros(s) for s in problem.block_sizes]
    for (dim, ids, _, _), (r, jacs) in zip(problem.blocks, results):
        for vb_i, J_i in zip(ids, jacs):
            gb[vb_i] += J_i.T @ r
            for vb_j, J_j in zip(ids, jacs):
                if vb_i < vb_j:
                    continue
                key = (vb_i, vb_j)
                piece = J_i.T @ J_j
                if key in Hbb:
                    Hbb[key] += piece
                else:
                    Hbb[key] = piece.copy()
    return Hbb, gb


def _solve_damped_dense(H, g, lam, D):
    A = H + lam * np.diag(D)
    try:
        c, low = sla.cho_factor(A, check_finite=False)
        return sla.cho_solve((c, low), -g, check_finite=False)
    except np.linalg.LinAlgError:
        return None


def _is_block_tridiagonal(Hbb):
    return all(i - j <= 1 for i, j in Hbb)


def _solve_damped_tridiag(problem, Hbb, gb, lam, Db):
    """Block-Thomas solve of (H + lam*diag) delta = -g for a block-tridiagonal H."""
    nb = len(problem.block_sizes)
    A = []
    for i in range(nb):
        Ai = Hbb.get((i, i))
        Ai = Ai + lam * np.diag(Db[i]) if Ai is not None else lam * np.diag(Db[i])
        A.append(Ai)
    try:
        facs = [None] * nb
        ys = [None] * nb
        S = A[0]
        facs[0] = sla.cho_factor(S, check_finite=False)
        ys[0] = -gb[0]
        Ss = [S]
        for i in range(1, nb):
            B = Hbb.get((i, i - 1))  # couples block i to i-1
            if B is None:
                S = A[i]
                y = -gb[i]
            else:
                K = sla.cho_solve(facs[i - 1], B.T, check_finite=False)
                S = A[i] - B @ K
                y = -gb[i] - B @ sla.cho_solve(facs[i - 1], ys[i - 1], check_finite=False)
            facs[i] = sla.cho_factor(S, check_finite=False)
            ys[i] = y
            Ss.append(S)
        delta = [None] * nb
        delta[nb - 1] = sla.cho_solve(facs[nb - 1], ys[nb - 1], check_finite=False)
        for i in range(nb - 2, -1, -1):
            B = Hbb.get((i + 1, i))
            rhs = ys[i] if B is None else ys[i] - B.T @ delta[i + 1]
            delta[i] = sla.cho_solve(facs[i], rhs, check_finite=False)
        return np.concatenate(delta)
    except np.linalg.LinAlgError:
        return None


def _solve_damped_sparse_general(problem, Hbb, gb, lam, Db):
    n = problem.n
    rows, cols, vals = [], [], []
    for (i, j), piece in Hbb.items():
        oi, oj = problem.offsets[i], problem.offsets[j]
        si, sj = piece.shape
        rr, cc = np.meshgrid(np.arange(oi, oi + si), np.arange(oj, oj + sj),
                             indexing="ij")
        rows.append(rr.ravel()); cols.append(cc.ravel()); vals.append(piece.ravel())
        if i != j:
            rows.append(cc.ravel()); cols.append(rr.ravel()); vals.append(piece.T.ravel())
    dia = np.concatenate([lam * d for d in Db])
    rows.append(np.arange(n)); cols.append(np.arange(n)); vals.append(dia)
    A = sp.csc_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    g = np.concatenate(gb)
    try:
        return spla.splu(A).solve(-g)
    except RuntimeError:
        return None


def _lm_loop(problem, x0, opts, sparse):
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (problem.n,):
        raise SolverError(f"x0 must have {problem.n} components")
    results, bad = problem.evaluate(x)
    if bad is not None:
        raise SolverError(f"non-finite residual at start in block {bad} "
                          f"({problem.blocks[bad][3] or 'unlabeled'})")
    cost = _cost_of(results)
    if cost == 0.0:
        return SolveReport(x, 0.0, 0, "already_converged")

    lam = float(opts.initial_damping)
    accepted = 0
    termination = "max_iter"
    while accepted < opts.max_iter:
        # Marquardt scaling with a relative floor: pure diag(H) scaling
        # gives each variable a step ~ g_i / (lam * H_ii); a residual whose
        # jacobian barely touches some variable then gets a huge step along
        # it, poisoning every trial until damping kills real progress. All
        # variables share one unit (mm), so a global floor is safe.
        if sparse:
            Hbb, gb = _assemble_blocks(problem, results)
            gmax = max((float(np.diag(Hbb[(i, i)]).max()) for i in
                        range(len(problem.block_sizes)) if (i, i) in Hbb),
                       default=0.0)
            floor = max(_DIAG_REL_FLOOR * gmax, 1e-12)
            Db = [np.maximum(np.diag(Hbb[(i, i)]), floor) if (i, i) in Hbb
                  else np.full(problem.block_sizes[i], floor)
                  for i in range(len(problem.block_sizes))]
            tridiag = _is_block_tridiagonal(Hbb)
        else:
            H, g = _assemble_dense(problem, results)
            dia = np.diag(H)
            D = np.maximum(dia, max(_DIAG_REL_FLOOR * float(dia.max(initial=0.0)),
                                    1e-12))

        moved = False
        while True:
            if sparse:
                if tridiag:
                    delta = _solve_damped_tridiag(problem, Hbb, gb, lam, Db)
                else:
                    delta = _solve_damped_sparse_general(problem, Hbb, gb, lam, Db)
            else:
                delta = _solve_damped_dense(H, g, lam, D)

            if delta is None or not np.all(np.isfinite(delta)):
                lam = max(lam, 1e-12) * 10.0
                if lam > opts.damping_max:
                    return SolveReport(x, cost, accepted, "stalled")
                continue

            trial = x + delta
            trial_results, bad = problem.evaluate(trial)
            trial_cost = np.inf if bad is not None else _cost_of(trial_results)
            if trial_cost < cost:
                x = trial
                drop = cost - trial_cost
                cost = trial_cost
                results = trial_results
                accepted += 1
                lam = max(lam / 10.0, 1e-32)
                moved = True
                if cost == 0.0 or drop <= opts.cost_tol * max(cost, 1e-30):
                    termination = "cost_tol"
                elif float(np.linalg.norm(delta)) <= opts.step_tol * (float(np.linalg.norm(x)) + opts.step_tol):
                    termination = "step_tol"
                else:
                    break
                return SolveReport(x, cost, accepted, termination)
            lam = max(lam, 1e-12) * 10.0
            if lam > opts.damping_max:
                return SolveReport(x, cost, accepted, "stalled")
        if not moved:  # pragma: no cover - inner loop always moves or returns
            break
    return SolveReport(x, cost, accepted, termination)


def lm_solve(problem: ResidualProblem, x0, opts: SolverOptions = None) -> SolveReport:
    """Dense Levenberg-Marquardt. Damping x10 on reject, /10 on accept."""
    return _lm_loop(problem, x0, opts or SolverOptions(), sparse=False)


def lm_solve_sparse(problem: ResidualProblem, x0, opts: SolverOptions = None) -> SolveReport:
    """Same iteration as lm_solve but the normal equations are assembled
    and solved blockwise: block-Thomas elimination when the pattern is
    block-tridiagonal (the global problem's case), sparse LU otherwise."""
    return _lm_loop(problem, x0, opts or SolverOptions(), sparse=True)


@dataclass(frozen=True)
class ConstraintBlock:
    """g(x)=0 (equality) or h(x)>=0 (inequality) over variable blocks.

    fn(x) -> (value, jacs) exactly like a residual block evaluator.
    """
    dim: int
    var_block_ids: tuple
    fn: object
    label: str = ""


@dataclass
class ConstraintSet:
    equalities: list = field(default_factory=list)
    inequalities: list = field(default_factory=list)

    def max_violation(self, x) -> float:
        worst = 0.0
        for cb in self.equalities:
            v, _ = cb.fn(x)
            worst = max(worst, float(np.max(np.abs(v))) if np.size(v) else 0.0)
        for cb in self.inequalities:
            v, _ = cb.fn(x)
            if np.size(v):
                worst = max(worst, float(np.max(np.maximum(0.0, -np.asarray(v)))))
        return worst


DEFAULT_SCHEDULE = (1.0, 10.0, 100.0, 1000.0, 10000.0)


def penalized_problem(problem, constraints, mu):
    """The augmented problem one penalty stage solves: original residual
    blocks plus sqrt(mu)-weighted equality and hinge blocks."""
    aug = ResidualProblem(problem.block_sizes)
    aug.blocks = list(problem.blocks)
    s = float(np.sqrt(mu))

    def eq_wrap(cb):
        def fn(x):
            v, jacs = cb.fn(x)
            return s * np.asarray(v, dtype=np.float64), [s * np.asarray(j) for j in jacs]
        return fn

    def ineq_wrap(cb):
        def fn(x):
            v, jacs = cb.fn(x)
            v = np.atleast_1d(np.asarray(v, dtype=np.float64))
            active = v < 0.0
            r = np.where(active, -s * v, 0.0)
            out_jacs = []
            for j in jacs:
                j = np.atleast_2d(np.asarray(j, dtype=np.float64))
                out_jacs.append(np.where(active[:, None], -s * j, 0.0))
            return r, out_jacs
        return fn

    for cb in constraints.equalities:
        aug.add_block(cb.dim, cb.var_block_ids, eq_wrap(cb), f"eq:{cb.label}")
    for cb in constraints.inequalities:
        aug.add_block(cb.dim, cb.var_block_ids, ineq_wrap(cb), f"ineq:{cb.label}")
    return aug


def penalty_solve(problem: ResidualProblem, constraints: ConstraintSet, x0,
                  schedule=DEFAULT_SCHEDULE, opts: SolverOptions = None,
                  sparse: bool = False, violation_tol: float = 1e-3) -> SolveReport:
    """Quadratic-penalty relaxation of constrained least squares.

    For each weight mu in the increasing schedule, solves the problem
    augmented with sqrt(mu)*g(x) and sqrt(mu)*max(0, -h(x)) residuals,
    warm-starting from the previous stage. The final report carries the
    remaining constraint violation; exceeding violation_tol flags the
    report instead of raising.
    """
    weights = [float(w) for w in schedule]
    if not weights or any(w <= 0 for w in weights) or any(
            b <= a for a, b in zip(weights, weights[1:])):
        raise SolverError("schedule must be increasing and positive")
    x = np.asarray(x0, dtype=np.float64).copy()
    report = None
    stage_violations = []
    total_iters = 0
    for mu in weights:
        aug = penalized_problem(problem, constraints, mu)
        solve = lm_solve_sparse if sparse else lm_solve
        report = solve(aug, x, opts)
        x = report.x
        total_iters += report.iterations
        stage_violations.append(constraints.max_violation(x))
    viol = stage_violations[-1] if stage_violations else 0.0
    return SolveReport(x, report.cost, total_iters, report.termination,
                       penalty_weights=weights, violation=viol,
                       violation_flagged=viol > violation_tol,
                       stage_violations=stage_violations)


def numeric_jacobian(problem: ResidualProblem, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the stacked residual vector."""
    if h <= 0:
        raise SolverError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    r0 = problem.residuals(x)
    J = np.zeros((r0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (problem.residuals(x + e) - problem.residuals(x - e)) / (2 * h)
    return J
