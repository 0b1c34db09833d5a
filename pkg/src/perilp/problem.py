"""Control problems: dynamics, running cost, and the compact constraint boxes.

A problem is the pair of evaluators

    f(u, y) -> dy/dt      (control_dim n inputs, state_dim m outputs)
    g(u, y) -> running cost

restricted to axis-aligned boxes U and Y.  Both evaluators are vectorized:
u has shape (..., n), y has shape (..., m), results broadcast over the
leading axes.  Problems are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import sys

import numpy as np

from . import exprs

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

BOX_TOL = 1e-9          # absolute box-membership tolerance


class DomainError(ValueError):
    """A point violates its constraint box."""


class ConfigError(ValueError):
    """A problem configuration document is invalid."""


class Box:
    """Axis-aligned box [lower, upper] in R^dim."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, float))
        self.upper = np.atleast_1d(np.asarray(upper, float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ConfigError("box bounds must be 1-d arrays of equal length")
        if self.lower.size < 1:
            raise ConfigError("box dimension must be >= 1")
        if not (np.isfinite(self.lower).all() and np.isfinite(self.upper).all()):
            raise ConfigError("box bounds must be finite (compactness)")
        if np.any(self.lower > self.upper):
            j = int(np.argmax(self.lower > self.upper))
            raise ConfigError(f"box lower[{j}]={self.lower[j]} > upper[{j}]={self.upper[j]}")

    @property
    def dim(self):
        return self.lower.size

    @property
    def widths(self):
        return self.upper - self.lower

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol=BOX_TOL):
        x = np.asarray(x, float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def violation(self, x):
        """(index, amount) of the worst bound violation, amount 0 if inside."""
        x = np.asarray(x, float)
        under = self.lower - x
        over = x - self.upper
        worst = np.maximum(under, over)
        j = int(np.argmax(worst))
        return j, float(max(worst[j], 0.0))

    def clip(self, x):
        return np.clip(np.asarray(x, float), self.lower, self.upper)

    def axis_nodes(self, res):
        """Per-axis uniform nodes including both endpoints."""
        res = np.broadcast_to(np.asarray(res, int), (self.dim,))
        if np.any(res < 1):
            raise ConfigError("grid resolution must be >= 1 per axis")
        return [np.linspace(self.lower[j], self.upper[j], res[j]) for j in range(self.dim)]

    def grid(self, res):
        """Uniform product grid, shape (prod(res), dim), first axis slowest."""
        nodes = self.axis_nodes(res)
        mesh = np.meshgrid(*nodes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def sample(self, count, rng):
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


class AffineStructure:
    """Certifies f(u,y) = a(y) + B(y) u and g(u,y) = u^T R u + q(y).

    drift(y) -> (..., m); input_matrix(y) -> (..., m, n); control_weight is
    the positive diagonal of R, shape (n,); state_cost(y) -> (...).
    """

    def __init__(self, drift, input_matrix, control_weight, state_cost):
        self.drift = drift
        self.input_matrix = input_matrix
        self.control_weight = np.asarray(control_weight, float)
        self.state_cost = state_cost
        if np.any(self.control_weight <= 0):
            raise ValueError("control_weight diagonal must be positive")


class ControlProblem:
    def __init__(self, m, n, dynamics, cost, control_box, state_box,
                 name="custom", affine_structure=None):
        if m < 1 or n < 1:
            raise ConfigError("state and control dimensions must be >= 1")
        if control_box.dim != n:
            raise ConfigError(f"control box has dim {control_box.dim}, expected n={n}")
        if state_box.dim != m:
            raise ConfigError(f"state box has dim {state_box.dim}, expected m={m}")
        self.m = m
        self.n = n
        self.dynamics = dynamics
        self.cost = cost
        self.control_box = control_box
        self.state_box = state_box
        self.name = name
        self.affine_structure = affine_structure

    def _check_point(self, u, y):
        u = np.asarray(u, float).reshape(-1)
        y = np.asarray(y, float).reshape(-1)
        if u.size != self.n:
            raise DomainError(f"control has {u.size} components, expected {self.n}")
        if y.size != self.m:
            raise DomainError(f"state has {y.size} components, expected {self.m}")
        if not self.control_box.contains(u):
            j, amt = self.control_box.violation(u)
            raise DomainError(
                f"u[{j}]={u[j]:.12g} outside [{self.control_box.lower[j]:g}, "
                f"{self.control_box.upper[j]:g}] by {amt:.3g}")
        if not self.state_box.contains(y):
            j, amt = self.state_box.violation(y)
            raise DomainError(
                f"y[{j}]={y[j]:.12g} outside [{self.state_box.lower[j]:g}, "
                f"{self.state_box.upper[j]:g}] by {amt:.3g}")
        return u, y

    def eval_dynamics(self, u, y):
        """f(u, y) for a single in-box point, with box validation."""
        u, y = self._check_point(u, y)
        return np.asarray(self.dynamics(u, y), float)

    def eval_cost(self, u, y):
        """g(u, y) for a single in-box point, with box validation."""
        u, y = self._check_point(u, y)
        return float(self.cost(u, y))

    def __repr__(self):
        return (f"ControlProblem({self.name!r}, m={self.m}, n={self.n}, "
                f"U={self.control_box}, Y={self.state_box})")


def pendulum():
    """Damped forced pendulum benchmark.

    f = (y2, u - 0.3 y2 - 4 sin y1),  g = u^2 - y1^2,
    U = [-1, 1],  Y = [-1.7, 1.7] x [-4, 4].
    """
    def dynamics(u, y):
        u = np.asarray(u, float)
        y = np.asarray(y, float)
        return np.stack([y[..., 1],
                         u[..., 0] - 0.3 * y[..., 1] - 4.0 * np.sin(y[..., 0])], axis=-1)

    def cost(u, y):
        u = np.asarray(u, float)
        y = np.asarray(y, float)
        return u[..., 0] ** 2 - y[..., 0] ** 2

    def drift(y):
        y = np.asarray(y, float)
        return np.stack([y[..., 1], -0.3 * y[..., 1] - 4.0 * np.sin(y[..., 0])], axis=-1)

    def input_matrix(y):
        y = np.asarray(y, float)
        B = np.zeros(y.shape[:-1] + (2, 1))
        B[..., 1, 0] = 1.0
        return B

    def state_cost(y):
        y = np.asarray(y, float)
        return -y[..., 0] ** 2

    affine = AffineStructure(drift, input_matrix, np.array([1.0]), state_cost)
    return ControlProblem(
        m=2, n=1, dynamics=dynamics, cost=cost,
        control_box=Box([-1.0], [1.0]),
        state_box=Box([-1.7, -4.0], [1.7, 4.0]),
        name="pendulum", affine_structure=affine)


_BUILTINS = {"pendulum": pendulum}


def _expr_evaluator(asts, stack_axis):
    if stack_axis:
        def dynamics(u, y):
            u = np.asarray(u, float)
            y = np.asarray(y, float)
            parts = [np.broadcast_to(np.asarray(exprs.evaluate(a, u, y), float),
                                     np.broadcast_shapes(u.shape[:-1], y.shape[:-1]))
                     for a in asts]
            return np.stack(parts, axis=-1)
        return dynamics

    ast = asts
    def cost(u, y):
        u = np.asarray(u, float)
        y = np.asarray(y, float)
        out = np.asarray(exprs.evaluate(ast, u, y), float)
        return np.broadcast_to(out, np.broadcast_shapes(u.shape[:-1], y.shape[:-1]))
    return cost


def _validate_vars(asts, m, n, what):
    used = set()
    for ast in asts:
        used |= exprs.used_vars(ast)
    for kind, idx in sorted(used):
        dim = n if kind == "u" else m
        if idx >= dim:
            raise ConfigError(
                f"{what} references {kind}{idx + 1} but "
                f"{'n' if kind == 'u' else 'm'} = {dim}")


def detect_affine(problem, samples=1000, rel_tol=1e-12, seed=0):
    """Probe for f = a(y) + B(y) u and g = u^T R u + q(y); verify on samples.

    Central differences at the control-box center are exact for the affine
    and diagonal-quadratic forms; any mismatch shows up in the verification
    pass and rejects the structure.  Returns AffineStructure or None.
    """
    n, m = problem.n, problem.m
    uc = problem.control_box.center
    du = problem.control_box.widths / 4.0
    du = np.where(du > 0, du, 1.0)
    f, g = problem.dynamics, problem.cost

    def input_matrix(y):
        y = np.asarray(y, float)
        cols = []
        for j in range(n):
            up = uc.copy(); up[j] += du[j]
            um = uc.copy(); um[j] -= du[j]
            cols.append((f(up, y) - f(um, y)) / (2 * du[j]))
        return np.stack(cols, axis=-1)                       # (..., m, n)

    def drift(y):
        y = np.asarray(y, float)
        return f(uc, y) - input_matrix(y) @ uc

    R = np.zeros(n)
    y0 = problem.state_box.center
    g0 = g(uc, y0)
    for j in range(n):
        up = uc.copy(); up[j] += du[j]
        um = uc.copy(); um[j] -= du[j]
        R[j] = (g(up, y0) + g(um, y0) - 2 * g0) / (2 * du[j] ** 2)
    if np.any(R <= 0):
        return None

    def state_cost(y):
        y = np.asarray(y, float)
        return g(uc, y) - float(uc @ (R * uc))

    candidate = AffineStructure(drift, input_matrix, R, state_cost)

    rng = np.random.default_rng(seed)
    U = problem.control_box.sample(samples, rng)
    Y = problem.state_box.sample(samples, rng)
    f_true = f(U, Y)
    f_rec = candidate.drift(Y) + np.einsum("...ij,...j->...i", candidate.input_matrix(Y), U)
    g_true = g(U, Y)
    g_rec = candidate.state_cost(Y) + np.einsum("...j,...j->...", U * R, U)
    scale_f = np.maximum(1.0, np.abs(f_true))
    scale_g = np.maximum(1.0, np.abs(g_true))
    if (np.abs(f_rec - f_true) / scale_f).max() > rel_tol:
        return None
    if (np.abs(g_rec - g_true) / scale_g).max() > rel_tol:
        return None
    return candidate


def _finite_check(problem, seed=0):
    rng = np.random.default_rng(seed)
    U = np.vstack([problem.control_box.sample(256, rng),
                   problem.control_box.grid([3] * problem.n)[:256]])
    Y = np.vstack([problem.state_box.sample(256, rng),
                   problem.state_box.grid([3] * problem.m)[:256]])
    k = min(len(U), len(Y))
    fv = problem.dynamics(U[:k], Y[:k])
    gv = problem.cost(U[:k], Y[:k])
    if not (np.isfinite(fv).all() and np.isfinite(gv).all()):
        raise ConfigError("dynamics or cost evaluate to non-finite values on the boxes")


def load_problem(config_text):
    """Build a ControlProblem from a TOML document.

    Schema (all on the top level):
        name       optional string; a bare known name loads a built-in problem
        m, n       state / control dimensions (required for expression problems)
        u_min, u_max, y_min, y_max   box bounds as arrays
        f          array of m expression strings (grammar in perilp.exprs)
        g          one expression string
    """
    try:
        doc = _toml.loads(config_text)
    except _toml.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from None

    name = doc.get("name")
    has_exprs = "f" in doc or "g" in doc
    if name is not None and not has_exprs:
        if name in _BUILTINS:
            return _BUILTINS[name]()
        raise ConfigError(f"unknown built-in problem {name!r} and no f/g given")

    for key in ("m", "n", "u_min", "u_max", "y_min", "y_max", "f", "g"):
        if key not in doc:
            raise ConfigError(f"missing config key {key!r}")
    m = int(doc["m"])
    n = int(doc["n"])
    control_box = Box(doc["u_min"], doc["u_max"])
    state_box = Box(doc["y_min"], doc["y_max"])

    f_src = doc["f"]
    if isinstance(f_src, str):
        f_src = [f_src]
    if len(f_src) != m:
        raise ConfigError(f"f must give {m} component expressions, got {len(f_src)}")
    try:
        f_asts = [exprs.parse(s) for s in f_src]
        g_ast = exprs.parse(doc["g"])
    except exprs.ExprError as e:
        raise ConfigError(str(e)) from None
    _validate_vars(f_asts, m, n, "f")
    _validate_vars([g_ast], m, n, "g")

    problem = ControlProblem(
        m=m, n=n,
        dynamics=_expr_evaluator(f_asts, stack_axis=True),
        cost=_expr_evaluator(g_ast, stack_axis=False),
        control_box=control_box, state_box=state_box,
        name=name or "custom")
    _finite_check(problem)
    problem.affine_structure = detect_affine(problem)
    return problem
