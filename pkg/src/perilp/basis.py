"""Monomial test functions, their gradients, and the moment functions h_i.

The basis holds N multi-indices alpha with 1 <= |alpha|, ordered graded
lexicographically (total degree first, then lexicographic on the exponent
tuple).  Monomials are evaluated either in raw state coordinates or, by
default, in box-scaled coordinates z_j = (2 y_j - lo_j - hi_j)/(hi_j - lo_j)
mapping the state box onto [-1, 1]^m; gradients are chain-ruled back to y.

h_i(u, y) = grad(phi_i)(y) . f(u, y) are the moment functions whose zero
integrals characterize occupational measures of periodic regimes.
"""

from __future__ import annotations

import numpy as np

from .problem import BOX_TOL, ConfigError, DomainError


class BasisSizeError(ValueError):
    """Requested basis exceeds the configured size cap."""


class BasisMode:
    """tensor(J): all exponents <= J per axis; total_degree(J): |alpha| <= J."""

    def __init__(self, kind, degree):
        if kind not in ("tensor", "total_degree"):
            raise ConfigError(f"unknown basis mode {kind!r}")
        if degree < 1:
            raise ConfigError("basis degree must be >= 1")
        self.kind = kind
        self.degree = int(degree)

    def __repr__(self):
        return f"{self.kind}({self.degree})"

    def __eq__(self, other):
        return (isinstance(other, BasisMode)
                and (self.kind, self.degree) == (other.kind, other.degree))


def tensor(J):
    return BasisMode("tensor", J)


def total_degree(J):
    return BasisMode("total_degree", J)


def _graded_lex(indices):
    idx = np.asarray(indices, int)
    keys = tuple(idx[:, j] for j in reversed(range(idx.shape[1]))) + (idx.sum(axis=1),)
    return idx[np.lexsort(keys)]


def _enumerate_indices(mode, m):
    J = mode.degree
    grids = np.meshgrid(*([np.arange(J + 1)] * m), indexing="ij")
    idx = np.stack(grids, axis=-1).reshape(-1, m)
    deg = idx.sum(axis=1)
    if mode.kind == "tensor":
        keep = deg >= 1
    else:
        keep = (deg >= 1) & (deg <= J)
    return _graded_lex(idx[keep])


class MonomialBasis:
    """Monomial family phi_i over a problem's state box.  Built by build_basis."""

    def __init__(self, problem, indices, scaling_enabled, mode=None):
        self.problem = problem
        self.indices = np.asarray(indices, int)
        self.N = len(self.indices)
        self.m = problem.m
        self.scaling_enabled = bool(scaling_enabled)
        self.mode = mode
        lo = problem.state_box.lower
        hi = problem.state_box.upper
        if scaling_enabled and np.any(hi - lo <= 0):
            raise ConfigError("state box must have positive widths for scaled basis")
        # z = shift + slope*y, with dz/dy = slope
        if scaling_enabled:
            self._slope = 2.0 / (hi - lo)
            self._shift = -(lo + hi) / (hi - lo)
        else:
            self._slope = np.ones(self.m)
            self._shift = np.zeros(self.m)
        self._max_exp = int(self.indices.max())

    # -- batched tables (no box validation; internal hot paths) --

    def _coords(self, Y):
        Y = np.asarray(Y, float)
        return self._shift + self._slope * Y

    def _power_table(self, Z):
        # P[..., j, d] = Z[..., j]**d for d = 0..max_exp
        d = np.arange(self._max_exp + 1)
        return Z[..., None] ** d

    def phi_table(self, Y):
        """phi_i at each row of Y; shape (L, N)."""
        P = self._power_table(self._coords(np.atleast_2d(Y)))
        cols = np.arange(self.m)
        return P[:, cols, self.indices].prod(axis=-1)

    def grad_table(self, Y):
        """grad phi_i in y-coordinates at each row of Y; shape (L, N, m)."""
        Z = self._coords(np.atleast_2d(Y))
        P = self._power_table(Z)
        cols = np.arange(self.m)
        E = self.indices
        out = np.empty((Z.shape[0], self.N, self.m))
        full = P[:, cols, E]                                # (L, N, m) monomial factors
        for j in range(self.m):
            Ej = E[:, j]
            fac = np.where(Ej > 0, Ej, 0)[None, :] * P[:, j, np.maximum(Ej - 1, 0)]
            others = np.delete(full, j, axis=2).prod(axis=2)
            out[:, :, j] = fac * others * self._slope[j]
        return out

    def h_table(self, U, Y):
        """h_i(u, y) = grad phi_i . f for paired rows of U, Y; shape (L, N)."""
        G = self.grad_table(Y)
        F = np.asarray(self.problem.dynamics(np.atleast_2d(U), np.atleast_2d(Y)), float)
        return np.einsum("lnc,lc->ln", G, F)

    def grad_psi(self, lam, Y):
        """grad of psi = sum_i lam_i phi_i at each row of Y; shape (L, m)."""
        return np.einsum("lnc,n->lc", self.grad_table(Y), np.asarray(lam, float))

    def psi(self, lam, Y):
        return self.phi_table(Y) @ np.asarray(lam, float)

    # -- validated single-point API --

    def _check_index(self, i):
        if not 0 <= i < self.N:
            raise IndexError(f"basis index {i} out of range 0..{self.N - 1}")

    def _check_state(self, y):
        y = np.asarray(y, float).reshape(-1)
        box = self.problem.state_box
        if y.size != self.m or not box.contains(y, BOX_TOL):
            j, amt = box.violation(y)
            raise DomainError(
                f"y[{j}]={y[j]:.12g} outside [{box.lower[j]:g}, {box.upper[j]:g}] by {amt:.3g}"
                if y.size == self.m else f"state has {y.size} components, expected {self.m}")
        return y

    def eval_phi(self, i, y):
        self._check_index(i)
        y = self._check_state(y)
        return float(self.phi_table(y[None])[0, i])

    def eval_grad_phi(self, i, y):
        self._check_index(i)
        y = self._check_state(y)
        return self.grad_table(y[None])[0, i]

    def eval_h(self, i, u, y):
        self._check_index(i)
        f = self.problem.eval_dynamics(u, y)
        return float(self.eval_grad_phi(i, y) @ f)

    def index_of(self, exponents):
        """Ordinal position of a multi-index; raises KeyError when absent."""
        tgt = np.asarray(exponents, int)
        hit = np.nonzero((self.indices == tgt).all(axis=1))[0]
        if hit.size == 0:
            raise KeyError(f"multi-index {tuple(tgt)} not in basis")
        return int(hit[0])

    def gradient_independence(self, samples=400, seed=0):
        """Smallest singular value of the row-normalized gradient sample matrix.

        Rows are the per-index gradient samples stacked over a random interior
        cloud; a value at numerical-zero scale flags a linearly dependent
        gradient family (degenerate configuration).
        """
        rng = np.random.default_rng(seed)
        Y = self.problem.state_box.sample(samples, rng)
        G = self.grad_table(Y)                              # (L, N, m)
        S = G.transpose(1, 0, 2).reshape(self.N, -1)
        norms = np.linalg.norm(S, axis=1, keepdims=True)
        if np.any(norms == 0):
            return 0.0
        return float(np.linalg.svd(S / norms, compute_uv=False)[-1])


def build_basis(problem, mode, scaling_enabled=True, cap=2000):
    """Enumerate the monomial family for a mode; deterministic graded-lex order."""
    indices = _enumerate_indices(mode, problem.m)
    if len(indices) > cap:
        raise BasisSizeError(f"basis size {len(indices)} exceeds cap {cap}")
    basis = MonomialBasis(problem, indices, scaling_enabled, mode=mode)
    if basis.gradient_independence() <= 1e-10:
        raise ConfigError("basis gradient family is numerically linearly dependent")
    return basis
