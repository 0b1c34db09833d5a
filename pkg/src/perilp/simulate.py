"""Closed-loop integration, limit-cycle detection, and period averages.

The feedback law closes the loop y' = f(u(y), y); an embedded Runge-Kutta
5(4) pair with PI step control integrates it, recomputing the control at
every stage evaluation.  A Poincare section through the post-warmup state
finds the limit cycle: successive same-direction crossings are bisected on
the dense interpolant, and the period is accepted once two consecutive
return points agree within eps_cycle.  Period averages (running cost,
moment functions) are quadratures of augmented states, not sample sums.
"""

from __future__ import annotations

import numpy as np

from .problem import BOX_TOL

RTOL = 1e-8             # default per-step relative tolerance
ATOL = 1e-10            # default per-step absolute tolerance
EQUILIBRIUM_SPEED = 1e-8
SECTION_TIME_TOL = 1e-10
_MIN_STEP_FACTOR = 1e-14
_MAX_STEPS = 10_000_000

# Dormand-Prince 5(4) tableau with the standard quartic dense interpolant.
_C = np.array([0.0, 1/5, 3/10, 4/5, 8/9, 1.0, 1.0])
_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1/5, 0, 0, 0, 0, 0],
    [3/40, 9/40, 0, 0, 0, 0],
    [44/45, -56/15, 32/9, 0, 0, 0],
    [19372/6561, -25360/2187, 64448/6561, -212/729, 0, 0],
    [9017/3168, -355/33, 46732/5247, 49/176, -5103/18656, 0],
    [35/384, 0, 500/1113, 125/192, -2187/6784, 11/84]])
_B5 = np.array([35/384, 0, 500/1113, 125/192, -2187/6784, 11/84, 0])
_E = _B5 - np.array([5179/57600, 0, 7571/16695, 393/640,
                     -92097/339200, 187/2100, 1/40])
_P = np.array([
    [1, -8048581381/2820520608, 8663915743/2820520608, -12715105075/11282082432],
    [0, 0, 0, 0],
    [0, 131558114200/32700410799, -68118460800/10900136933, 87487479700/32700410799],
    [0, -1754552775/470086768, 14199869525/1410260304, -10690763975/1880347072],
    [0, 127303824393/49829197408, -318862633887/49829197408, 701980252875/199316789632],
    [0, -282668133/205662961, 2019193451/616988883, -1453857185/822651844],
    [0, 40617522/29380423, -110615467/29380423, 69997945/29380423]])


class NoLimitCycle(RuntimeError):
    """No two consistent section returns within the horizon."""

    def __init__(self, message, closest_recurrence=None):
        super().__init__(message)
        self.closest_recurrence = closest_recurrence


class EquilibriumDetected(RuntimeError):
    """The closed loop has settled; a period is undefined."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class StateLeftY(RuntimeError):
    """The trajectory exited the state box; the prefix is attached."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class StepFailure(RuntimeError):
    """The step controller underflowed the minimum step size."""


class Trajectory:
    """Sampled closed-loop run; optionally one detected period."""

    def __init__(self, times, states, controls, T_star=None, closure_error=None,
                 violations=()):
        self.times = np.asarray(times, float)
        self.states = np.atleast_2d(np.asarray(states, float))
        self.controls = np.atleast_2d(np.asarray(controls, float))
        self.T_star = None if T_star is None else float(T_star)
        self.closure_error = None if closure_error is None else float(closure_error)
        self.violations = list(violations)   # (time, worst box excess) pairs
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def y0(self):
        return self.states[0]

    def to_csv(self, fileobj):
        m = self.states.shape[1]
        n = self.controls.shape[1]
        header = ["t"] + [f"y{j+1}" for j in range(m)] + [f"u{j+1}" for j in range(n)]
        fileobj.write(",".join(header) + "\n")
        for k in range(len(self.times)):
            row = [self.times[k], *self.states[k], *self.controls[k]]
            fileobj.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def __repr__(self):
        period = f", T*={self.T_star:.6g}" if self.T_star is not None else ""
        return (f"Trajectory({len(self.times)} samples, "
                f"t in [{self.times[0]:.6g}, {self.times[-1]:.6g}]{period})")


class EmpiricalMoments:
    """Period averages (1/T) integral of h_i dt with box-scale normalization."""

    def __init__(self, values, scales):
        self.values = np.asarray(values, float)
        self.scales = np.asarray(scales, float)

    @property
    def normalized(self):
        return self.values / self.scales

    @property
    def max_normalized(self):
        return float(np.abs(self.normalized).max())

    def __repr__(self):
        return f"EmpiricalMoments(max normalized {self.max_normalized:.3e})"


class _DenseSegment:
    """One accepted step's quartic interpolant."""

    __slots__ = ("t0", "h", "y0", "Q")

    def __init__(self, t0, h, y0, Q):
        self.t0 = t0
        self.h = h
        self.y0 = y0
        self.Q = Q

    def __call__(self, t):
        x = (t - self.t0) / self.h
        return self.y0 + self.h * (self.Q @ np.array([x, x*x, x**3, x**4]))


class _Integration:
    """Stepper state: accepted samples plus dense segments when requested."""

    def __init__(self):
        self.times = []
        self.states = []
        self.segments = []

    def dense_eval(self, t):
        lo, hi = 0, len(self.segments) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.segments[mid].t0 <= t:
                lo = mid
            else:
                hi = mid - 1
        return self.segments[lo](t)


def _step_loop(rhs, y0, t_end, rtol, atol, dense, on_step=None):
    """Adaptive embedded RK5(4) from t=0 to t_end; returns _Integration."""
    out = _Integration()
    t = 0.0
    y = np.asarray(y0, float).copy()
    out.times.append(t)
    out.states.append(y.copy())
    if t_end <= 0.0:
        return out
    K = np.empty((7, y.size))
    K[0] = rhs(y)
    scale0 = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale0) ** 2))
    d1 = np.sqrt(np.mean((K[0] / scale0) ** 2))
    h = min(t_end, 0.01 * d0 / d1 if d1 > 1e-10 else 1e-6)
    h = max(h, t_end * _MIN_STEP_FACTOR)
    err_prev = 1.0
    for _ in range(_MAX_STEPS):
        h = min(h, t_end - t)
        for stage in range(1, 7):
            K[stage] = rhs(y + h * (_A[stage, :stage] @ K[:stage]))
        y1 = y + h * (_B5 @ K)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y1))
        err = np.sqrt(np.mean((h * (_E @ K) / scale) ** 2))
        if err <= 1.0:
            if dense:
                out.segments.append(_DenseSegment(t, h, y.copy(), K.T @ _P))
            t += h
            y = y1
            K[0] = K[6]              # first-same-as-last
            out.times.append(t)
            out.states.append(y.copy())
            if on_step is not None and on_step(out):
                return out
            if t >= t_end:
                return out
            err = max(err, 1e-10)
            fac = 0.9 * err ** -0.14 * err_prev ** 0.08
            err_prev = err
        else:
            fac = max(0.2, 0.9 * err ** -0.2)
            K[0] = rhs(y)            # discard FSAL stage of the rejected step
        h *= min(10.0, max(0.2, fac))
        if h < max(abs(t), t_end) * _MIN_STEP_FACTOR:
            raise StepFailure(f"step size underflow at t={t:.6g}")
    raise StepFailure(f"step budget exhausted at t={t:.6g}")


def _closed_loop_rhs(problem, law):
    def rhs(y):
        u = law.feedback_table(y[None])[0]
        return np.asarray(problem.dynamics(u, y), float)
    return rhs


def _sample(problem, law, integ, t_grid):
    states = np.array([integ.dense_eval(t) for t in t_grid])
    controls = law.feedback_table(states)
    return states, controls


def integrate_closed_loop(problem, law, y0, horizon, rtol=RTOL, atol=ATOL,
                          report_step=None):
    """Integrate y' = f(u(y), y) from y0; uniform reporting samples.

    The reporting grid defaults to horizon/4096.  A state leaving the box by
    more than the membership tolerance raises StateLeftY carrying the prefix
    trajectory; sub-tolerance excursions are recorded on the trajectory.
    """
    y0 = np.asarray(y0, float).reshape(-1)
    if not problem.state_box.contains(y0):
        j, amt = problem.state_box.violation(y0)
        raise StateLeftY(f"initial state outside box: axis {j} by {amt:.3g}")
    horizon = float(horizon)
    if horizon <= 0.0:
        u0 = law.feedback_table(y0[None])
        return Trajectory([0.0], y0[None], u0)
    rhs = _closed_loop_rhs(problem, law)
    box = problem.state_box
    exited = []

    def on_step(out):
        y = out.states[-1]
        _, amt = box.violation(y)
        if amt > BOX_TOL:
            exited.append((out.times[-1], amt))
            return True
        return False

    integ = _step_loop(rhs, y0, horizon, rtol, atol, dense=True, on_step=on_step)
    t_last = integ.times[-1]
    if report_step is None:
        report_step = horizon / 4096.0
    t_grid = np.arange(0.0, t_last + report_step * 0.5, report_step)
    t_grid = t_grid[t_grid <= t_last]
    if t_grid[-1] < t_last:
        t_grid = np.append(t_grid, t_last)
    states, controls = _sample(problem, law, integ, t_grid)
    violations = []
    for k, yk in enumerate(states):
        _, amt = box.violation(yk)
        if amt > 0.0:
            violations.append((float(t_grid[k]), amt))
    traj = Trajectory(t_grid, states, controls, violations=violations)
    if exited:
        t_exit, amt = exited[0]
        raise StateLeftY(
            f"state left the box at t={t_exit:.6g} by {amt:.3g}", trajectory=traj)
    return traj


class CycleConfig:
    """Limit-cycle detection parameters."""

    def __init__(self, warmup_fraction=0.5, eps_cycle=1e-5, min_period=1e-2,
                 max_returns=64):
        if not 0.0 <= warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        self.warmup_fraction = float(warmup_fraction)
        self.eps_cycle = float(eps_cycle)
        self.min_period = float(min_period)
        self.max_returns = int(max_returns)


def detect_limit_cycle(traj, problem, law, cfg=None, rtol=RTOL, atol=ATOL):
    """Locate the limit cycle behind a long trajectory; returns one period.

    The warmup prefix is discarded; the Poincare section passes through the
    post-warmup state with normal f(u(y_a), y_a).  Crossing times come from
    sign changes of the section function refined by bisection on the dense
    interpolant; the period is the gap between consecutive crossings once
    two consecutive return points agree within eps_cycle.  The returned
    slice is re-integrated from the refined section point.
    """
    cfg = cfg or CycleConfig()
    t_all = traj.times
    horizon = t_all[-1] - t_all[0]
    t_a = t_all[0] + cfg.warmup_fraction * horizon
    if horizon * (1.0 - cfg.warmup_fraction) < 4 * cfg.min_period:
        raise NoLimitCycle("post-warmup span shorter than 4 periods")
    k_a = int(np.searchsorted(t_all, t_a))
    y_a = traj.states[min(k_a, len(t_all) - 1)]
    rhs = _closed_loop_rhs(problem, law)
    normal = rhs(y_a)
    speed = float(np.linalg.norm(normal))
    if speed < EQUILIBRIUM_SPEED:
        raise EquilibriumDetected(
            f"|f| = {speed:.3e} at the warmup point; period undefined", point=y_a)
    normal = normal / speed

    # fresh dense integration from y_a over the remaining span
    span = t_all[-1] - t_all[min(k_a, len(t_all) - 1)]
    integ = _step_loop(rhs, y_a, span, rtol, atol, dense=True)
    times = np.asarray(integ.times)
    states = np.asarray(integ.states)
    s = (states - y_a) @ normal

    def section(t):
        return float((integ.dense_eval(t) - y_a) @ normal)

    crossings = []
    for k in range(len(times) - 1):
        if s[k] < 0.0 <= s[k + 1]:
            lo, hi = times[k], times[k + 1]
            while hi - lo > SECTION_TIME_TOL:
                mid = 0.5 * (lo + hi)
                if section(mid) < 0.0:
                    lo = mid
                else:
                    hi = mid
            t_c = 0.5 * (lo + hi)
            if t_c > cfg.min_period * 0.5:
                crossings.append(t_c)
            if len(crossings) >= cfg.max_returns:
                break

    returns = [integ.dense_eval(t) for t in crossings]
    closest = None
    for k in range(1, len(returns)):
        gap = float(np.linalg.norm(returns[k] - returns[k - 1]))
        period = crossings[k] - crossings[k - 1]
        if closest is None or gap < closest:
            closest = gap
        if gap <= cfg.eps_cycle and period >= cfg.min_period:
            y_star = returns[k]
            return _one_period(problem, law, y_star, period, rtol, atol)
    raise NoLimitCycle(
        "no two consistent section returns"
        + (f"; closest recurrence {closest:.3e}" if closest is not None else ""),
        closest_recurrence=closest)


def _one_period(problem, law, y_star, T, rtol, atol, samples=2048):
    integ = _step_loop(_closed_loop_rhs(problem, law), y_star, T, rtol, atol,
                       dense=True)
    t_grid = np.linspace(0.0, T, samples + 1)
    states, controls = _sample(problem, law, integ, t_grid)
    closure = float(np.linalg.norm(states[-1] - y_star))
    box = problem.state_box
    violations = [(float(t_grid[k]), amt)
                  for k, yk in enumerate(states)
                  for amt in [box.violation(yk)[1]] if amt > 0.0]
    return Trajectory(t_grid, states, controls, T_star=T, closure_error=closure,
                      violations=violations)


def _quadrature(problem, law, traj, integrand, width, rtol, atol):
    """Integrate [y; Q]' = [f(u(y), y); integrand(u, y)] over one period."""
    if traj.T_star is None:
        raise ValueError("trajectory has no detected period")
    m = problem.m

    def rhs(z):
        y = z[:m]
        u = law.feedback_table(y[None])[0]
        f = np.asarray(problem.dynamics(u, y), float)
        return np.concatenate([f, np.atleast_1d(integrand(u, y))])

    z0 = np.concatenate([traj.y0, np.zeros(width)])
    integ = _step_loop(rhs, z0, traj.T_star, rtol, atol, dense=False)
    return np.asarray(integ.states[-1])[m:]


def average_cost(traj, problem, law, rtol=RTOL, atol=ATOL):
    """(1/T*) integral of g over one period, with a tolerance-level estimate."""
    total = _quadrature(problem, law, traj,
                        lambda u, y: problem.cost(u, y), 1, rtol, atol)[0]
    mean = total / traj.T_star
    err_est = rtol * abs(mean) + atol + 10.0 * (traj.closure_error or 0.0)
    return float(mean), float(err_est)


def empirical_moments(traj, basis, law, rtol=RTOL, atol=ATOL, scale_res=17):
    """(1/T*) integral of each h_i over one period; zero for exact cycles.

    Normalization divides by the per-index max |h_i| over a coarse box grid,
    matching the row equilibration used by the LP side.
    """
    problem = basis.problem

    def integrand(u, y):
        return basis.h_table(u[None], y[None])[0]

    totals = _quadrature(problem, law, traj, integrand, basis.N, rtol, atol)
    values = totals / traj.T_star
    Ug = problem.control_box.grid([scale_res] * problem.n)
    Yg = problem.state_box.grid([scale_res] * problem.m)
    uu = np.repeat(Ug, len(Yg), axis=0)
    yy = np.tile(Yg, (len(Ug), 1))
    scales = np.abs(basis.h_table(uu, yy)).max(axis=0)
    scales[scales == 0.0] = 1.0
    return EmpiricalMoments(values, scales)
