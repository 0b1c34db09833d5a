"""Column generation: restricted LP, pricing, one appended point per pass.

Each iteration solves the restricted master over the current point set
Omega_k, prices the dual by globally minimizing

    r(x) = g(x) + sum_i h_i(x) lam_i

over U x Y (dense grid scan plus pattern polish from the best seeds), and
appends the minimizer.  The loop stops when the duality gap lambda0 - a
falls below eps_gap * max(1, |lambda0|), the iteration budget runs out, or
the gap stalls.

The initial point set is the algorithm's one unspecified ingredient.  A
bare uniform grid converges impractically slowly for high-degree bases:
the exact vertex duals of coarse masters oscillate, and one appended point
per pass repairs them one dip at a time.  build_initial_grid therefore
assembles a structured pool before the certified loop starts:

  1. For large bases, a cheap low-degree solve of the same problem marks
     where optimal mass lives: its support atoms cluster along the optimal
     orbit.  Linear interpolation between chain-adjacent atoms traces that
     ring, and a thickened tube of samples around it hands the master
     near-feasible mass where it belongs.  Without this seed the master
     sits at the equilibrium point mass and its duals are arbitrary
     enough to make pricing useless.
  2. Coarse strips on the state-box faces cover the cost minimizers that
     high-degree duals push against the boundary.
  3. Budgeted exchange rounds alternate warm master solves with batched
     appends of every grid-local minimizer of r under a norm-relaxed dual
     (the relaxation keeps the dual polynomial tame between pool points,
     so its minimizers mark genuine support candidates rather than
     inter-pool artifacts), plus small rings around each minimizer that
     pre-empt the dip simply reappearing next to an appended point.

The certified loop then starts from a pool whose pricing gap is already
near tolerance and certifies it by the book, one column per iteration.
Correctness never depends on the presolve (the certified loop re-prices
from scratch); only iteration counts do.
"""

from __future__ import annotations

import time
import warnings

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .basis import BasisMode, build_basis
from .lp import (DualCertificate, GridPoint, Infeasible, RestrictedLP,
                 RestrictedLPSolver, _min_norm_dual)
from .problem import Box, ConfigError

EPS_GAP = 1e-6          # relative duality-gap tolerance
EPS_PRICE = 1e-7        # absolute pricing certification tolerance
STALL_WINDOW = 25       # iterations without gap reduction before Stalled
STALL_REDUCTION = 1e-12
MAX_ITERATIONS = 500
PRICING_RES = 64        # dense pricing nodes per axis
POLISH_SEEDS = 8
_TIE_BAND = 1e-12
_DUP_TOL = 1e-9
_MULTIMODAL_SPREAD = 1e-3


class MultimodalPricing(UserWarning):
    """Polished pricing seeds settled on well-separated values."""


class ColGenError(RuntimeError):
    """Terminal non-converged state; carries the state for inspection."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class Stalled(ColGenError):
    """Gap stopped shrinking; pricing resolution is likely exhausted."""


class MaxIterations(ColGenError):
    """Iteration budget ran out before the gap closed."""


class ColGenConfig:
    """Tolerances, budgets, and grid resolutions for one solve."""

    def __init__(self, eps_gap=EPS_GAP, eps_price=EPS_PRICE,
                 max_iterations=MAX_ITERATIONS, stall_window=STALL_WINDOW,
                 initial_resolution=9, pricing_resolution=PRICING_RES,
                 polish_seeds=POLISH_SEEDS, seed_rounds=200, seed_batch=256,
                 presolve=True, presolve_wall=150.0, bootstrap=True,
                 bootstrap_degree=4, bootstrap_threshold=60):
        if eps_gap <= 0 or eps_price <= 0:
            raise ConfigError("tolerances must be positive")
        if max_iterations < 1 or stall_window < 1:
            raise ConfigError("iteration budgets must be >= 1")
        if presolve_wall <= 0:
            raise ConfigError("presolve wall budget must be positive")
        if bootstrap_degree < 1:
            raise ConfigError("bootstrap degree must be >= 1")
        self.eps_gap = float(eps_gap)
        self.eps_price = float(eps_price)
        self.max_iterations = int(max_iterations)
        self.stall_window = int(stall_window)
        self.initial_resolution = initial_resolution
        self.pricing_resolution = pricing_resolution
        self.polish_seeds = int(polish_seeds)
        self.seed_rounds = int(seed_rounds)
        self.seed_batch = int(seed_batch)
        self.presolve = bool(presolve)
        self.presolve_wall = float(presolve_wall)
        self.bootstrap = bool(bootstrap)
        self.bootstrap_degree = int(bootstrap_degree)
        self.bootstrap_threshold = int(bootstrap_threshold)


class RegularityDiagnostics:
    """Basic-tuple regularity data at one iterate."""

    def __init__(self, condition, eta, beta, V, regular, degenerate):
        self.condition = float(condition)
        self.eta = float(eta)
        self.beta = float(beta)
        self.V = float(V)
        self.regular = bool(regular)
        self.degenerate = bool(degenerate)

    def __repr__(self):
        return (f"RegularityDiagnostics(cond={self.condition:.3e}, "
                f"eta={self.eta:.3e}, beta={self.beta:.3e}, V={self.V:.3e}, "
                f"regular={self.regular})")


class ColGenState:
    """Mutable record of one run: history rows plus the final artifacts."""

    def __init__(self, problem, basis, cfg):
        self.problem = problem
        self.basis = basis
        self.cfg = cfg
        self.history = []        # dict per iteration
        self.status = "Running"
        self.iterations = 0
        self.measure = None
        self.dual = None
        self.G = None
        self.lp = None
        self.solver = None
        self.last_priced = None  # (GridPoint, column, a)
        self.presolve_rounds = 0
        self.seed_source = "grid"
        self.wall_time = 0.0

    def record(self, **row):
        self.history.append(row)

    @property
    def gaps(self):
        return [row["gap"] for row in self.history]

    def log_csv(self, fileobj):
        cols = ["k", "G", "a", "gap", "omega", "eta", "V"]
        fileobj.write(",".join(cols) + "\n")
        for row in self.history:
            fileobj.write(",".join(f"{row[c]:.17g}" if isinstance(row[c], float)
                                   else str(row[c]) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# pricing


def _tie_order_keys(X):
    """Sort keys for the pricing tie rule: per coordinate, magnitude before
    sign, leading coordinate most significant."""
    keys = []
    for j in range(X.shape[1]):
        keys.append(np.abs(X[:, j]))
        keys.append(X[:, j])
    # np.lexsort treats the LAST key as primary
    return list(reversed(keys))


class Pricer:
    """Dense-grid pricing with cached tables and lockstep pattern polish."""

    def __init__(self, problem, basis, resolution=PRICING_RES,
                 polish_seeds=POLISH_SEEDS, chunk=60000):
        res = np.broadcast_to(np.asarray(resolution, int),
                              (problem.n + problem.m,)).copy()
        if np.any(res < 2):
            raise ConfigError("pricing resolution must be >= 2 per axis")
        self.problem = problem
        self.basis = basis
        self.resolution = res
        self.polish_seeds = int(polish_seeds)
        Ug = problem.control_box.grid(res[:problem.n])
        Yg = problem.state_box.grid(res[problem.n:])
        self.X = np.hstack([np.repeat(Ug, len(Yg), axis=0),
                            np.tile(Yg, (len(Ug), 1))])
        self.g = np.empty(len(self.X))
        self.H = np.empty((len(self.X), basis.N))
        for s in range(0, len(self.X), chunk):
            U = self.X[s:s + chunk, :problem.n]
            Y = self.X[s:s + chunk, problem.n:]
            self.g[s:s + chunk] = problem.cost(U, Y)
            self.H[s:s + chunk] = basis.h_table(U, Y)
        self.lower = np.concatenate([problem.control_box.lower,
                                     problem.state_box.lower])
        self.upper = np.concatenate([problem.control_box.upper,
                                     problem.state_box.upper])
        self.step0 = (self.upper - self.lower) / np.maximum(res - 1, 1) / 2.0
        self.step_floor = 1e-8 * max(1.0, float((self.upper - self.lower).max()))

    def _r_of(self, X, lam):
        U, Y = X[:, :self.problem.n], X[:, self.problem.n:]
        return (np.asarray(self.problem.cost(U, Y), float)
                + self.basis.h_table(U, Y) @ lam)

    def _polish(self, X0, lam, max_rounds=80):
        """Pattern descent in lockstep; negative direction first per axis."""
        X = X0.copy()
        v = self._r_of(X, lam)
        step = np.broadcast_to(self.step0, X.shape).copy()
        for _ in range(max_rounds):
            if step.max() <= self.step_floor:
                break
            improved = np.zeros(len(X), dtype=bool)
            for j in range(X.shape[1]):
                for sgn in (-1.0, 1.0):
                    Xt = X.copy()
                    Xt[:, j] = np.clip(Xt[:, j] + sgn * step[:, j],
                                       self.lower[j], self.upper[j])
                    vt = self._r_of(Xt, lam)
                    better = vt < v - _TIE_BAND
                    X[better] = Xt[better]
                    v[better] = vt[better]
                    improved |= better
            step[~improved] *= 0.5
        return X, v

    def price(self, dual):
        """Global minimum of r; returns (GridPoint, a, x_row, multimodal)."""
        lam = dual.lam
        r = self.g + self.H @ lam
        vmin = float(r.min())
        band = _TIE_BAND * max(1.0, abs(vmin))
        ties = np.flatnonzero(r <= vmin + band)
        order = np.lexsort(_tie_order_keys(self.X[ties]))
        x_grid = self.X[ties[order[0]]]
        nseed = min(self.polish_seeds, len(r))
        seeds = np.argpartition(r, nseed - 1)[:nseed]
        Xp, vp = self._polish(self.X[seeds], lam)
        spread = float(vp.max() - vp.min())
        multimodal = spread > _MULTIMODAL_SPREAD * max(1.0, abs(vmin))
        if multimodal:
            warnings.warn(
                f"pricing seeds settled {spread:.3e} apart; "
                "the landscape is multimodal at this resolution",
                MultimodalPricing, stacklevel=3)
        best = int(np.argmin(vp))
        if vp[best] < vmin - _TIE_BAND:
            a, x_new = float(vp[best]), Xp[best]
        else:
            a, x_new = vmin, x_grid
        return (GridPoint(x_new[:self.problem.n], x_new[self.problem.n:]),
                a, np.asarray(x_new, float), multimodal)

    def grid_minimum(self, dual):
        """Certified minimum of r restricted to the cached dense grid."""
        return float((self.g + self.H @ dual.lam).min())

    def batch_dips(self, lam, threshold, cap=256):
        """All grid-local minimizers of r below threshold, polished.

        Local means minimal within the axis-aligned grid neighborhood; the
        polish runs in lockstep and the result is deduplicated on rounded
        coordinates.  Used by the initial-grid builder only.
        """
        r = (self.g + self.H @ lam).reshape(tuple(self.resolution))
        mask = np.ones_like(r, dtype=bool)
        for ax in range(r.ndim):
            if r.shape[ax] == 1:
                continue
            lo = np.ones_like(r, dtype=bool)
            hi = np.ones_like(r, dtype=bool)
            sl_c, sl_p = [slice(None)] * r.ndim, [slice(None)] * r.ndim
            sl_c[ax], sl_p[ax] = slice(1, None), slice(None, -1)
            lo[tuple(sl_c)] = r[tuple(sl_c)] <= r[tuple(sl_p)]
            hi[tuple(sl_p)] = r[tuple(sl_p)] <= r[tuple(sl_c)]
            mask &= lo & hi
        flat = np.flatnonzero(mask.ravel() & (r.ravel() < threshold))
        if flat.size == 0:
            return np.empty((0, self.X.shape[1])), np.empty(0)
        if flat.size > cap:
            flat = flat[np.argsort(r.ravel()[flat])[:cap]]
        Xp, vp = self._polish(self.X[flat], lam)
        _, first = np.unique(np.round(Xp, 9), axis=0, return_index=True)
        keep = np.sort(first)
        return Xp[keep], vp[keep]


def price(problem, basis, dual, cfg=None):
    """One-shot pricing; run_colgen uses a cached Pricer instead."""
    cfg = cfg or ColGenConfig()
    pricer = Pricer(problem, basis, cfg.pricing_resolution, cfg.polish_seeds)
    point, a, _, _ = pricer.price(dual)
    return point, a


# ---------------------------------------------------------------------------
# diagnostics


def diagnostics(state):
    """Regularity data of the current basic tuple at one iterate.

    eta is the least basic weight, beta the largest positive component of
    d = A^{-1} H(x_new), and V = (-lambda0 + a) * eta / beta the guaranteed
    one-step improvement; eta > 0 with a nonsingular square basis declares
    the tuple regular.
    """
    lp, solver = state.lp, state.solver
    if solver is None or solver.basis is None:
        return RegularityDiagnostics(np.inf, 0.0, np.nan, 0.0,
                                     regular=False, degenerate=True)
    A = lp.columns[:, solver.basis]
    degenerate = A.shape[0] != A.shape[1] or len(solver.keep) != lp.n_rows
    if degenerate:
        return RegularityDiagnostics(np.inf, 0.0, np.nan, 0.0,
                                     regular=False, degenerate=True)
    try:
        cond = float(np.linalg.cond(A))
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e15:
        return RegularityDiagnostics(np.inf, 0.0, np.nan, 0.0,
                                     regular=False, degenerate=True)
    lu = lu_factor(A)
    gamma = lu_solve(lu, lp.rhs)
    eta = float(gamma.min())
    beta = np.nan
    V = 0.0
    if state.last_priced is not None:
        point, column, a = state.last_priced
        d = lu_solve(lu, column)
        pos = d[d > 0]
        beta = float(pos.max()) if pos.size else np.nan
        lam0 = state.dual.lambda0 if state.dual is not None else np.nan
        if np.isfinite(beta) and eta > 0:
            V = float((-lam0 + a) * eta / beta)
    return RegularityDiagnostics(cond, max(eta, 0.0), beta, V,
                                 regular=eta > 0.0, degenerate=False)


# ---------------------------------------------------------------------------
# initial grid


def _uniform_initial(problem, basis, resolution):
    res = np.broadcast_to(np.asarray(resolution, int),
                          (problem.n + problem.m,)).copy()
    need = basis.N + 1
    while np.prod(res.astype(float)) < need:
        res = res + 2                      # grow odd, keep box centers on grid
    Ug = problem.control_box.grid(res[:problem.n])
    Yg = problem.state_box.grid(res[problem.n:])
    return np.hstack([np.repeat(Ug, len(Yg), axis=0),
                      np.tile(Yg, (len(Ug), 1))])


def _face_strips(problem, res_u=7, res_face=17, cap=4000):
    """Coarse samples on every state-box face; the cost minimizers that
    duals chase routinely sit on the boundary."""
    m, n = problem.m, problem.n
    per_face = res_u ** n * res_face ** (m - 1)
    if 2 * m * per_face > cap:
        return np.empty((0, n + m))
    Ug = problem.control_box.grid([res_u] * n)
    rows = []
    lo, hi = problem.state_box.lower, problem.state_box.upper
    for axis in range(m):
        others = [i for i in range(m) if i != axis]
        if others:
            sub = Box(lo[others], hi[others]).grid([res_face] * (m - 1))
        else:
            sub = np.zeros((1, 0))
        for bound in (lo[axis], hi[axis]):
            Y = np.empty((len(sub), m))
            Y[:, axis] = bound
            Y[:, others] = sub
            rows.append(np.hstack([np.repeat(Ug, len(Y), axis=0),
                                   np.tile(Y, (len(Ug), 1))]))
    return np.vstack(rows)


def _tube(problem, states, controls, radii, u_jitter, stride=4):
    """Thicken closed-orbit samples into a tube of master columns.

    For planar states the offsets follow the orbit normal; otherwise fixed-
    seed random unit directions.  Offsets are clipped into the state box,
    control jitter into the control box.
    """
    Y = states[::stride]
    U = controls[::stride]
    rows = [np.hstack([controls, states])]
    if len(Y) >= 2:
        tang = np.gradient(Y, axis=0)
        tang = tang / np.maximum(np.linalg.norm(tang, axis=1,
                                                keepdims=True), 1e-30)
        if problem.m == 2:
            normals = np.stack([-tang[:, 1], tang[:, 0]], axis=1)[:, None, :]
        else:
            rng = np.random.default_rng(0)
            normals = rng.standard_normal((len(Y), 3, problem.m))
            normals /= np.linalg.norm(normals, axis=2, keepdims=True)
        scale = float(np.mean(problem.state_box.widths)) / 2.0
        for rad in radii:
            for k in range(normals.shape[1]):
                Yo = problem.state_box.clip(Y + rad * scale * normals[:, k])
                rows.append(np.hstack([U, Yo]))
    for du in u_jitter:
        Uj = problem.control_box.clip(U + du)
        rows.append(np.hstack([Uj, Y]))
    return np.vstack(rows)


def _chain_order(Y):
    """Greedy nearest-neighbor chain from the point farthest out."""
    left = list(range(len(Y)))
    cur = int(np.argmax(np.linalg.norm(Y, axis=1)))
    order = [cur]
    left.remove(cur)
    while left:
        d = np.linalg.norm(Y[left] - Y[cur], axis=1)
        cur = left.pop(int(np.argmin(d)))
        order.append(cur)
    return np.array(order)


def _orbit_seed(problem, basis, cfg, log=None, target_spine=360):
    """Pool seed traced through the bootstrap master's support ring.

    Solves the same problem at cfg.bootstrap_degree (cheap; a bare grid
    presolve suffices there) and reads off where its optimal measure sits:
    the support atoms of moment-matched measures cluster along the optimal
    orbit, and linear interpolation between chain-adjacent atoms traces
    that ring.  Thickened into a tube, the ring hands the high-degree
    master near-feasible mass where it belongs; without it the master
    sits at the equilibrium point mass and its duals are arbitrary enough
    to make pricing useless.  Bootstrap feedback laws themselves are not
    trustworthy (they may spiral into the equilibrium or leave the box),
    so no trajectories are involved.  Returns an empty array when the
    bootstrap fails or its support collapses to the equilibrium; the pool
    then falls back to the bare grid.
    """
    kind = basis.mode.kind if basis.mode else "tensor"
    degree = min(cfg.bootstrap_degree,
                 basis.mode.degree if basis.mode else cfg.bootstrap_degree)
    boot_basis = build_basis(problem, BasisMode(kind, degree),
                             scaling_enabled=basis.scaling_enabled)
    boot_cfg = ColGenConfig(eps_gap=max(cfg.eps_gap, 1e-6),
                            eps_price=cfg.eps_price,
                            max_iterations=cfg.max_iterations,
                            initial_resolution=cfg.initial_resolution,
                            pricing_resolution=cfg.pricing_resolution,
                            seed_rounds=cfg.seed_rounds,
                            seed_batch=cfg.seed_batch,
                            presolve=True, bootstrap=False)
    try:
        boot_state, measure, _, _ = run_colgen(problem, boot_basis, boot_cfg)
    except (ColGenError, Infeasible) as exc:
        if log is not None:
            log.write(f"presolve bootstrap solve failed: {exc}\n")
        return np.empty((0, problem.n + problem.m))
    sup = boot_state.lp.xs[measure.support]
    center = problem.state_box.center
    half = problem.state_box.widths / 2.0
    ys = (sup[:, problem.n:] - center) / half
    keep = np.linalg.norm(ys, axis=1) > 0.05
    if keep.sum() < 3:
        if log is not None:
            log.write("presolve bootstrap support sits at the equilibrium; "
                      "no ring to seed\n")
        return np.empty((0, problem.n + problem.m))
    P = sup[keep][_chain_order(ys[keep])]
    closed = np.vstack([P, P[:1]])
    arcs = np.linalg.norm(np.diff(closed[:, problem.n:] / half, axis=0),
                          axis=1)
    mean_arc = max(float(arcs.sum()) / target_spine, 1e-12)
    spine = []
    for i in range(len(P)):
        k = max(3, int(np.ceil(arcs[i] / mean_arc)))
        t = np.linspace(0.0, 1.0, k, endpoint=False)[:, None]
        spine.append(closed[i] + t * (closed[i + 1] - closed[i]))
    spine = np.vstack(spine)
    return _tube(problem, spine[:, problem.n:], spine[:, :problem.n],
                 radii=(-0.16, -0.09, -0.04, -0.015, -0.005,
                        0.005, 0.015, 0.04, 0.09, 0.16),
                 u_jitter=(-0.25, -0.1, 0.1, 0.25), stride=1)


def _append_rows(problem, basis, solver, rows, existing):
    """Deduplicated column appends; returns how many landed."""
    added = 0
    for row in rows:
        key = tuple(np.round(row, 7))
        if key in existing:
            continue
        existing.add(key)
        U, Y = row[:problem.n][None], row[problem.n:][None]
        col = np.concatenate([[1.0], basis.h_table(U, Y)[0]])
        solver.add_column(row, float(problem.cost(U, Y)[0]), col)
        added += 1
    return added


def build_initial_grid(problem, basis, cfg, pricer, state=None, log=None):
    """Construct Omega_0 and presolve it; returns (lp, solver, rounds).

    Pool assembly: uniform grid, plus a closed-orbit tube and face strips
    for large bases (see module docstring).  Exchange rounds then append
    batched grid-local minimizers of r under a norm-relaxed dual, with
    rings around each minimizer, until the polished pricing gap of the
    dual that the certified loop would report reaches a quarter of the
    convergence threshold, or the round/wall budget runs out.  Correctness
    never depends on this phase; only iteration counts do.
    """
    t0 = time.perf_counter()
    parts = [_uniform_initial(problem, basis, cfg.initial_resolution)]
    if (cfg.presolve and cfg.bootstrap
            and basis.N >= cfg.bootstrap_threshold):
        ring = _orbit_seed(problem, basis, cfg, log=log)
        if len(ring):
            parts += [ring, _face_strips(problem)]
            if state is not None:
                state.seed_source = "ring"
    xs = np.vstack(parts)
    _, first = np.unique(np.round(xs, 7), axis=0, return_index=True)
    xs = xs[np.sort(first)]
    lp = RestrictedLP.from_points(problem, basis, xs)
    solver = RestrictedLPSolver(lp)
    rounds = 0
    if not cfg.presolve or cfg.seed_rounds < 1:
        return lp, solver, rounds
    existing = {tuple(np.round(row, 7)) for row in lp.xs}
    target = 0.25 * cfg.eps_gap
    lo = np.concatenate([problem.control_box.lower, problem.state_box.lower])
    hi = np.concatenate([problem.control_box.upper, problem.state_box.upper])
    for rnd in range(cfg.seed_rounds):
        rounds = rnd + 1
        measure, dual, G = solver.solve()
        _, a_pol, _, _ = pricer.price(dual)
        gap = dual.lambda0 - a_pol
        if log is not None:
            log.write(f"presolve r={rnd} G={G:.12g} a={a_pol:.12g} "
                      f"gap={gap:.3e} omega={lp.n_points}\n")
        if gap <= target * max(1.0, abs(dual.lambda0)):
            break
        if time.perf_counter() - t0 > cfg.presolve_wall:
            break
        # norm-relaxed dual: minimum-norm lam within a band that tolerates
        # a fraction of the current gap; tame between pool points
        band = max(0.25 * gap, 1e-9)
        d = lp.costs - G
        relaxed, _ = _min_norm_dual(lp.columns[1:], d, measure.support,
                                    set(), band=band)
        lam_r = relaxed if relaxed is not None else dual.lam
        pool_min = G + float((d + lam_r @ lp.columns[1:]).min())
        per_dip = 1 + 8 * (problem.n + problem.m)
        Xd, _ = pricer.batch_dips(lam_r, pool_min - 1e-9,
                                  cap=max(1, cfg.seed_batch // per_dip))
        if len(Xd) == 0:
            # relaxed dual sees nothing; feed the strict dual's dips instead
            Xd, _ = pricer.batch_dips(dual.lam, a_pol + 0.5 * gap,
                                      cap=max(1, cfg.seed_batch // per_dip))
        if len(Xd) == 0:
            break
        # rings around each dip pre-empt its reappearing next door
        rings = [Xd]
        for radius in (1.0, 0.25):
            for j in range(Xd.shape[1]):
                for sgn in (-1.0, 1.0):
                    ring = Xd.copy()
                    ring[:, j] = np.clip(
                        ring[:, j] + sgn * radius * pricer.step0[j],
                        lo[j], hi[j])
                    rings.append(ring)
        if _append_rows(problem, basis, solver, np.vstack(rings),
                        existing) == 0:
            break
    if state is not None:
        state.presolve_rounds = rounds
    return lp, solver, rounds


# ---------------------------------------------------------------------------
# the certified loop


def run_colgen(problem, basis, cfg=None, log=None):
    """Iterate solve / price / append until the duality gap certifies G.

    Returns (state, measure, dual, G).  Raises Infeasible, Stalled, or
    MaxIterations; the latter two carry the state for inspection.
    """
    cfg = cfg or ColGenConfig()
    t0 = time.perf_counter()
    state = ColGenState(problem, basis, cfg)
    pricer = Pricer(problem, basis, cfg.pricing_resolution, cfg.polish_seeds)
    lp, solver, _ = build_initial_grid(problem, basis, cfg, pricer, state,
                                       log=log)
    state.lp = lp
    state.solver = solver
    G_prev = np.inf
    for k in range(cfg.max_iterations + 1):
        measure, dual, G = solver.solve()
        state.measure, state.dual, state.G = measure, dual, G
        state.iterations = k
        if G > G_prev + 1e-9:
            raise AssertionError(
                f"objective increased at iteration {k}: {G_prev} -> {G}")
        G_prev = G
        if abs(G - dual.lambda0) > 1e-8 * max(1.0, abs(G)):
            raise AssertionError(
                f"strong duality violated at iteration {k}: "
                f"G={G!r} lambda0={dual.lambda0!r}")
        if len(measure.support) > lp.n_rows:
            raise AssertionError(
                f"support size {len(measure.support)} exceeds {lp.n_rows}")
        point, a, x_row, multimodal = pricer.price(dual)
        gap = dual.lambda0 - a
        if a > dual.lambda0 + cfg.eps_price:
            raise AssertionError(
                f"pricing above the dual bound at iteration {k}: "
                f"a={a!r} lambda0={dual.lambda0!r}")
        column = np.concatenate([[1.0],
                                 basis.h_table(x_row[None, :problem.n],
                                               x_row[None, problem.n:])[0]])
        state.last_priced = (point, column, a)
        diag = diagnostics(state)
        state.record(k=k, G=G, a=a, gap=gap, omega=lp.n_points,
                     eta=diag.eta, V=diag.V, lambda0=dual.lambda0,
                     support=len(measure.support), multimodal=multimodal)
        if log is not None:
            log.write(f"k={k} G={G:.12g} a={a:.12g} gap={gap:.3e} "
                      f"omega={lp.n_points} eta={diag.eta:.3e} "
                      f"V={diag.V:.3e}\n")
        if gap <= cfg.eps_gap * max(1.0, abs(dual.lambda0)):
            state.status = "Converged"
            state.wall_time = time.perf_counter() - t0
            return state, measure, dual, G
        gaps = state.gaps
        if len(gaps) > cfg.stall_window:
            if gaps[-cfg.stall_window - 1] - gaps[-1] < STALL_REDUCTION:
                state.status = "Stalled"
                state.wall_time = time.perf_counter() - t0
                raise Stalled(
                    f"gap {gap:.3e} did not shrink over {cfg.stall_window} "
                    "iterations; consider doubling the pricing resolution",
                    state=state)
        duplicate = np.any(np.all(np.abs(lp.xs - x_row) <= _DUP_TOL, axis=1))
        if duplicate:
            state.status = "Stalled"
            state.wall_time = time.perf_counter() - t0
            raise Stalled(
                f"priced point duplicates an existing grid point with gap "
                f"{gap:.3e}; consider doubling the pricing resolution",
                state=state)
        solver.add_column(x_row, float(problem.cost(x_row[None, :problem.n],
                                                    x_row[None, problem.n:])[0]),
                          column)
    state.status = "MaxIterations"
    state.wall_time = time.perf_counter() - t0
    raise MaxIterations(
        f"gap {state.history[-1]['gap']:.3e} after {cfg.max_iterations} "
        "iterations", state=state)
