"""Restricted LP solves with exact vertex duals.

The master has one column per grid point x_l = (u_l, y_l): column vector
H(x_l) = (1, h_1(x_l), ..., h_N(x_l)), cost g(x_l), and right-hand side
b = (1, 0, ..., 0).  A basic optimal solution is a discrete measure on at
most N+1 points; the dual vector prices the moment rows.

Solver layout:

* rows are equilibrated to unit max-norm before solving (h magnitudes vary
  by orders of magnitude across basis degrees),
* a feasible starting basis comes from a zero-violation singleton column
  plus artificial drive-out when possible, textbook phase 1 otherwise,
* the primal simplex runs on a slightly perturbed rhs to cut degenerate
  cycling, then dual-simplex steps restore feasibility for the exact rhs,
* the reported dual is, when the basic weights admit a clean truncation,
  re-selected as the minimum-norm vector inside the optimality tolerance
  box (the vertex dual of a degenerate master can be arbitrarily large and
  certifies nothing away from the grid); otherwise the vertex dual is
  returned unchanged.
"""

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .problem import ConfigError

FEAS_TOL = 1e-9         # moment-row feasibility
OPT_TOL = 1e-8          # reduced-cost optimality band, user-facing
DUAL_BAND = 5e-9        # one-sided band used by the min-norm dual selection
_INNER_OPT = 2e-9       # the simplex itself works tighter than OPT_TOL
_PIVOT_TOL = 1e-9
_PERTURB = 1e-10
_BLAND_STREAK = 2000    # consecutive degenerate pivots before Bland's rule
_MAX_PIVOTS = 500000


class Infeasible(RuntimeError):
    """No nonnegative combination of columns meets the moment rows."""

    def __init__(self, message, worst_row=None, violation=None):
        super().__init__(message)
        self.worst_row = worst_row
        self.violation = violation


class _SingularBasis(RuntimeError):
    """Basis matrix factorization failed; caller restarts from phase 1."""


def _lu(B):
    """LU factorization that refuses numerically singular bases."""
    lu = lu_factor(B)
    d = np.abs(np.diag(lu[0]))
    if d.size and d.min() <= 1e-13 * max(1.0, d.max()):
        raise _SingularBasis("singular basis matrix")
    return lu


class GridPoint:
    """A control/state pair inside U x Y."""

    __slots__ = ("u", "y")

    def __init__(self, u, y):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))
        self.y = np.atleast_1d(np.asarray(y, dtype=float))

    def as_array(self):
        return np.concatenate([self.u, self.y])

    def __repr__(self):
        return f"GridPoint(u={self.u.tolist()}, y={self.y.tolist()})"


class RestrictedLP:
    """Finite master: points, costs g(x_l), columns H(x_l), rhs e_1."""

    def __init__(self, xs, costs, columns):
        xs = np.asarray(xs, dtype=float)
        costs = np.asarray(costs, dtype=float)
        columns = np.asarray(columns, dtype=float)
        if columns.shape[1] != len(costs) or columns.shape[1] != len(xs):
            raise ConfigError("column count must match point count")
        self.xs = xs                      # (L, m+n), u coordinates first
        self.costs = costs
        self.columns = columns            # (N+1, L), row 0 all ones
        self.rhs = np.zeros(columns.shape[0])
        self.rhs[0] = 1.0
        self._n_controls = None

    @classmethod
    def from_points(cls, problem, basis, xs):
        """Assemble costs and columns for an array of stacked (u, y) rows."""
        xs = np.asarray(xs, dtype=float)
        U, Y = xs[:, :problem.n], xs[:, problem.n:]
        h = basis.h_table(U, Y)                       # (L, N)
        costs = np.asarray(problem.cost(U, Y), dtype=float)
        columns = np.vstack([np.ones(len(xs)), h.T])
        out = cls(xs, costs, columns)
        out._n_controls = problem.n
        return out

    @property
    def n_points(self):
        return self.columns.shape[1]

    @property
    def n_rows(self):
        return self.columns.shape[0]

    def point(self, l):
        n = self._n_controls if self._n_controls is not None else 1
        return GridPoint(self.xs[l, :n], self.xs[l, n:])

    def add_point(self, x, cost, column):
        x = np.asarray(x, dtype=float)
        self.xs = np.vstack([self.xs, x])
        self.costs = np.append(self.costs, float(cost))
        self.columns = np.hstack([self.columns, np.asarray(column, float)[:, None]])

    def dump(self, fileobj):
        """Write the master in LP interchange text format, stable names."""
        w = fileobj.write
        w("\\ restricted master: %d rows, %d columns\n" % (self.n_rows, self.n_points))
        w("Minimize\n obj:")
        self._write_terms(w, self.costs, np.arange(self.n_points))
        w("\nSubject To\n")
        w(" mass:")
        self._write_terms(w, self.columns[0], np.arange(self.n_points))
        w(" = 1\n")
        for i in range(1, self.n_rows):
            w(" mom_%d:" % i)
            row = self.columns[i]
            nz = np.flatnonzero(row != 0.0)
            if nz.size == 0:
                w(" 0 x_0")
            else:
                self._write_terms(w, row, nz)
            w(" = 0\n")
        w("Bounds\nEnd\n")

    @staticmethod
    def _write_terms(w, coeffs, idx):
        for pos, l in enumerate(idx):
            v = coeffs[l]
            sign = " -" if v < 0 else (" +" if pos else " ")
            w("%s%.17g x_%d" % (sign, abs(v), l))
            if pos % 8 == 7:
                w("\n   ")


class DiscreteMeasure:
    """Nonnegative weights on the grid points, unit total mass."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=float)
        self.support = np.flatnonzero(self.weights > 0.0)

    @property
    def total_mass(self):
        return float(self.weights.sum())

    def moment_residuals(self, lp):
        """Row residuals A gamma - b, mass row first."""
        return lp.columns @ self.weights - lp.rhs


class DualCertificate:
    """Row prices: lambda0 for the mass row, lam for the moment rows."""

    def __init__(self, lambda0, lam):
        self.lambda0 = float(lambda0)
        self.lam = np.asarray(lam, dtype=float)

    def reduced_costs(self, lp):
        """g(x_l) + sum_i h_i(x_l) lam_i - lambda0 per column."""
        return lp.costs + self.lam @ lp.columns[1:] - self.lambda0


# ---------------------------------------------------------------------------
# simplex internals


def _primal_simplex(A, b, c, bas, tol_opt=_INNER_OPT, max_pivots=_MAX_PIVOTS):
    """Revised primal simplex from a feasible basis; Dantzig with Bland fallback."""
    R = A.shape[0]
    bas = np.array(bas, dtype=int)
    pivots = 0
    degen = 0
    bland = False
    while True:
        lu = _lu(A[:, bas])
        y = lu_solve(lu, c[bas], trans=1)
        r = c - y @ A
        r[bas] = np.inf
        if bland:
            ent = np.flatnonzero(r < -tol_opt)
            if ent.size == 0:
                return bas, pivots
            j = int(ent[0])
        else:
            j = int(np.argmin(r))
            if r[j] >= -tol_opt:
                return bas, pivots
        xB = lu_solve(lu, b)
        d = lu_solve(lu, A[:, j])
        pos = d > _PIVOT_TOL
        if not pos.any():
            raise AssertionError("unbounded master; mass row should prevent this")
        ratios = np.full(R, np.inf)
        ratios[pos] = np.maximum(xB[pos], 0.0) / d[pos]
        t = ratios.min()
        cand = np.flatnonzero(ratios <= t + 1e-15)
        i = int(cand[np.argmin(bas[cand])])
        bas[i] = j
        pivots += 1
        degen = degen + 1 if t <= _PIVOT_TOL else 0
        if degen > _BLAND_STREAK:
            bland = True
        if pivots >= max_pivots:
            raise AssertionError(f"simplex exceeded {max_pivots} pivots")


def _dual_cleanup(A, b, c, bas, max_pivots=50000):
    """Dual-simplex steps removing negative basic values for the exact rhs.

    After the perturbed primal solve the basis is dual feasible; only primal
    feasibility needs repair.
    """
    R = A.shape[0]
    pivots = 0
    while True:
        lu = _lu(A[:, bas])
        xB = lu_solve(lu, b)
        if xB.min() >= -1e-10:
            return bas, pivots
        i = int(np.argmin(xB))
        y = lu_solve(lu, c[bas], trans=1)
        r = c - y @ A
        ei = np.zeros(R)
        ei[i] = 1.0
        w = lu_solve(lu, ei, trans=1) @ A
        w[bas] = 0.0
        cand = np.flatnonzero(w < -1e-9)
        if cand.size == 0:
            raise Infeasible("dual step found no entering column")
        ratios = np.maximum(r[cand], 0.0) / (-w[cand])
        t = ratios.min()
        tie = cand[ratios <= t + 1e-15]
        bas[i] = int(tie.min())
        pivots += 1
        if pivots >= max_pivots:
            raise AssertionError(f"dual cleanup exceeded {max_pivots} pivots")


def _crash_basis(A, tol=1e-9):
    """Feasible basis from a zero-violation singleton, or None.

    Requires some column whose moment entries all vanish (an equilibrium
    point): that singleton carries the whole mass.  Remaining basis slots
    are driven out of a virtual artificial identity; rows that cannot be
    covered are linearly dependent and get dropped.
    """
    R, L = A.shape
    viol = np.abs(A[1:]).max(axis=0) if R > 1 else np.zeros(L)
    cands = np.flatnonzero(viol <= tol)
    if cands.size == 0:
        return None, None
    Aext = np.hstack([A, np.eye(R)])
    bas = np.array([int(cands[0])] + [L + r for r in range(1, R)])
    for pos in range(1, R):
        lu = _lu(Aext[:, bas])
        erow = np.zeros(R)
        erow[pos] = 1.0
        trow = lu_solve(lu, erow, trans=1) @ A
        trow[bas[bas < L]] = 0.0
        j = int(np.argmax(np.abs(trow)))
        if abs(trow[j]) > 1e-7:
            bas[pos] = j
    dropped = [pos for pos in range(R) if bas[pos] >= L]
    return bas, dropped


def _phase_one(A, b):
    """Textbook phase 1 with one artificial per row; returns basis, dropped."""
    R, L = A.shape
    signs = np.where(b >= 0, 1.0, -1.0)
    Aext = np.hstack([A, np.diag(signs)])
    cart = np.concatenate([np.zeros(L), np.ones(R)])
    bas = np.arange(L, L + R)
    # graded rhs perturbation inside the artificial cone; a rhs of e_1 makes
    # every pivot degenerate and the walk endless without it
    bp = b + signs * _PERTURB * np.linspace(1.0, 2.0, R)
    bas, _ = _primal_simplex(Aext, bp, cart, bas)
    try:
        bas, _ = _dual_cleanup(Aext, b, cart, bas)
    except Infeasible as exc:   # phase 1 itself is always feasible
        raise AssertionError(f"phase 1 repair failed: {exc}") from exc
    lu = _lu(Aext[:, bas])
    xB = lu_solve(lu, b)
    art_level = float(cart[bas] @ np.maximum(xB, 0.0))
    if art_level > OPT_TOL:
        art = bas >= L
        rows = bas[art] - L
        vals = np.abs(xB[art])
        worst = int(rows[np.argmax(vals)])
        raise Infeasible(
            f"phase 1 artificial objective {art_level:.3e}; "
            f"worst violated moment row {worst}",
            worst_row=worst, violation=float(vals.max()))
    # drive zero-level artificials out; rows that resist are dependent
    dropped = []
    for pos in range(R):
        if bas[pos] < L:
            continue
        lu = _lu(Aext[:, bas])
        erow = np.zeros(R)
        erow[pos] = 1.0
        trow = lu_solve(lu, erow, trans=1) @ A
        trow[bas[bas < L]] = 0.0
        j = int(np.argmax(np.abs(trow)))
        if abs(trow[j]) > 1e-7:
            bas[pos] = j
        else:
            dropped.append(pos)
    return bas, dropped


# ---------------------------------------------------------------------------
# nonnegative least squares and the minimum-norm dual


def _nnls(A, b, maxiter=None):
    """Lawson-Hanson active set for min ||Ax - b||, x >= 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0.0] = 1.0
    An = A / norms
    if maxiter is None:
        maxiter = 3 * n + 30
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    resid = b.copy()
    tol = 4 * max(m, n) * np.finfo(float).eps * max(np.linalg.norm(b), 1e-300)
    for _ in range(maxiter):
        grad = An.T @ resid
        grad[passive] = -np.inf
        j = int(np.argmax(grad))
        if grad[j] <= tol:
            break
        passive[j] = True
        while True:
            P = np.flatnonzero(passive)
            z, *_ = np.linalg.lstsq(An[:, P], b, rcond=None)
            if z.min() > 0.0:
                x[:] = 0.0
                x[P] = z
                break
            neg = z <= 0.0
            alpha = np.min(x[P][neg] / (x[P][neg] - z[neg]))
            x[P] += alpha * (z - x[P])
            passive[P] = x[P] > 1e-14 * max(1.0, x[P].max())
            x[~passive] = 0.0
        resid = b - An @ x
    return x / norms, float(np.linalg.norm(resid))


def _ldp(G, h):
    """min ||x|| subject to G x >= h, or None when infeasible."""
    ncons, nvar = G.shape
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(nvar + 1)
    f[-1] = 1.0
    u, rnorm = _nnls(E, f)
    resid = E @ u - f
    if abs(resid[-1]) < 1e-12:
        return None
    return -resid[:nvar] / resid[-1]


def _min_norm_dual(hrows, d, support, work, rounds=4, batch=300,
                   band=DUAL_BAND):
    """Minimum-norm lam with d_l + h_l.lam >= -band on all columns and
    |d_l + h_l.lam| <= band on the support; cutting planes over `work`."""
    work = set(int(v) for v in work) | set(int(s) for s in support)
    for _ in range(rounds):
        wl = np.fromiter(sorted(work), dtype=int)
        G = np.vstack([hrows[:, wl].T, -hrows[:, support].T])
        rhs = np.concatenate([-d[wl] - band, d[support] - band])
        lam = _ldp(G, rhs)
        if lam is None:
            return None, work
        slack = d + hrows.T @ lam + band
        bad = np.flatnonzero(slack < -1e-12)
        if bad.size == 0:
            return lam, work
        worst = bad[np.argsort(slack[bad])[:batch]]
        work |= set(int(v) for v in worst)
    return None, work


# ---------------------------------------------------------------------------
# solver


class RestrictedLPSolver:
    """Mutable solve state for one master, reusable across column additions."""

    def __init__(self, lp):
        self.lp = lp
        scale = np.abs(lp.columns).max(axis=1)
        scale[scale <= 0.0] = 1.0
        self.scale = scale
        self.keep = None        # row indices kept after dependence dropping
        self.basis = None
        self._work = set()      # cutting-plane warm start for the dual selection

    # -- state management ---------------------------------------------------

    def _scaled(self):
        return self.lp.columns / self.scale[:, None]

    def _cold_start(self, A, force_phase1=False):
        bas, dropped = (None, None) if force_phase1 else _crash_basis(A)
        if bas is None:
            bas, dropped = _phase_one(A, self.lp.rhs)
        self.keep = np.setdiff1d(np.arange(A.shape[0]), dropped)
        return np.array([bas[p] for p in range(A.shape[0]) if p not in dropped])

    def add_column(self, x, cost, column):
        """Append one point; re-crash when a dropped row becomes active."""
        self.lp.add_point(x, cost, column)
        if self.keep is not None and len(self.keep) < self.lp.n_rows:
            dropped = np.setdiff1d(np.arange(self.lp.n_rows), self.keep)
            scaled = np.asarray(column, float) / self.scale
            if np.abs(scaled[dropped]).max() > 1e-7:
                self.basis = None   # dependence structure changed; cold restart

    # -- main solve ---------------------------------------------------------

    def solve(self):
        """Solve to a basic optimum; returns (DiscreteMeasure, DualCertificate, G)."""
        lp = self.lp
        if lp.n_points == 0:
            raise Infeasible("empty master")
        A_full = self._scaled()
        for attempt in (0, 1):
            try:
                if self.basis is None:
                    self.basis = self._cold_start(A_full, force_phase1=attempt > 0)
                A = A_full[self.keep]
                b = lp.rhs[self.keep]
                c = lp.costs
                # perturb the rhs inside the current basis cone, then repair
                bp = b + _PERTURB * (A[:, self.basis] @ np.ones(len(self.keep)))
                self.basis, _ = _primal_simplex(A, bp, c, self.basis)
                self.basis, _ = _dual_cleanup(A, b, c, self.basis)
                break
            except _SingularBasis:
                if attempt:
                    raise AssertionError("singular basis after phase 1 restart")
                self.basis = None   # crash basis went singular; rebuild
            except Infeasible:
                # only phase 1 may declare infeasibility; crash-start verdicts
                # can be artifacts of a poor initial basis
                if attempt:
                    raise
                self.basis = None
        lu = _lu(A[:, self.basis])
        xB = lu_solve(lu, b)
        for _ in range(3):
            xB += lu_solve(lu, b - A[:, self.basis] @ xB)
        y = lu_solve(lu, c[self.basis], trans=1)
        y += lu_solve(lu, c[self.basis] - A[:, self.basis].T @ y, trans=1)
        return self._select(xB, y)

    def _select(self, xB, y):
        """Vertex solution, then the min-norm dual when truncation is clean."""
        lp = self.lp
        weights = np.zeros(lp.n_points)
        weights[self.basis] = np.maximum(xB, 0.0)
        y_full = np.zeros(lp.n_rows)
        y_full[self.keep] = y / self.scale[self.keep]
        lam0_v = y_full[0]
        lam_v = -y_full[1:]
        G_v = float(lp.costs @ weights)
        cleaned = self._clean_dual(xB, G_v)
        if cleaned is not None:
            return cleaned
        return (DiscreteMeasure(weights),
                DualCertificate(lam0_v, lam_v), G_v)

    def _clean_dual(self, xB, G_v):
        """Truncate numerically-zero weights, refit, select the min-norm dual.

        Returns None unless every gate passes; the caller then falls back to
        the vertex dual.  Gates: truncated support strictly smaller than the
        row count, refit residual <= FEAS_TOL, refit objective within 1e-9 of
        the vertex objective, and a feasible norm minimization.
        """
        lp = self.lp
        bas = self.basis
        hrows = lp.columns[1:]
        for tau in (1e-5, 1e-6, 1e-7, 1e-8):
            sup = bas[xB > tau]
            if len(sup) > lp.n_rows or len(sup) == 0:
                continue
            cols = lp.columns[:, sup]
            gs, res = _nnls(cols, lp.rhs)
            if res > FEAS_TOL:
                continue
            G_ref = float(lp.costs[sup] @ gs)
            if abs(G_ref - G_v) > 1e-9:
                continue
            d = lp.costs - G_ref
            lam, self._work = _min_norm_dual(hrows, d, sup, self._work)
            if lam is None:
                return None
            weights = np.zeros(lp.n_points)
            weights[sup] = gs
            return (DiscreteMeasure(weights),
                    DualCertificate(G_ref, lam), G_ref)
        return None


def solve_restricted_lp(lp):
    """One-shot solve; see RestrictedLPSolver for reuse across additions."""
    return RestrictedLPSolver(lp).solve()


def dense_grid_oracle(problem, basis, resolution, cap=10**6):
    """Brute-force reference: solve the master on a full uniform grid.

    The grid is the product of per-axis linspaces over U x Y including both
    endpoints.  Objective decreases (weakly) as the resolution refines.
    """
    resolution = [int(r) for r in np.atleast_1d(resolution)]
    if len(resolution) == 1:
        resolution = resolution * (problem.n + problem.m)
    if len(resolution) != problem.n + problem.m:
        raise ConfigError(
            f"need {problem.n + problem.m} resolutions, got {len(resolution)}")
    total = int(np.prod([float(r) for r in resolution]))
    if total > cap:
        raise ConfigError(f"grid of {total} columns exceeds cap {cap}")
    u_axes = problem.control_box.grid(resolution[:problem.n])
    y_axes = problem.state_box.grid(resolution[problem.n:])
    ug = np.repeat(u_axes, len(y_axes), axis=0)
    yg = np.tile(y_axes, (len(u_axes), 1))
    xs = np.hstack([ug, yg])
    lp = RestrictedLP.from_points(problem, basis, xs)
    measure, dual, G = solve_restricted_lp(lp)
    return measure, G
