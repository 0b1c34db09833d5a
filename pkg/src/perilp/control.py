"""Value polynomial, feedback synthesis, and certificate checks.

The dual vector lam of a converged master defines psi(y) = sum_i lam_i
phi_i(y).  Its gradient drives the pointwise control minimization

    H(grad psi(y), y) = min over u in U of grad psi(y).f(u, y) + g(u, y)

whose level is the certified objective G: the minimum of H - G over the
state box reports how far the certificate is from a true subsolution.

For control-affine dynamics with a strictly positive diagonal quadratic
control cost the inner minimizer has the closed form

    u*(y) = clip(-1/2 R^{-1} B(y)^T grad psi(y), U)

componentwise; otherwise a control-box grid scan plus pattern polish
certifies the minimum to EPS_U.  Feedback laws are immutable and their
evaluation is pure, so trajectory batches may share one law.
"""

from __future__ import annotations

import numpy as np

from .basis import BasisMode, build_basis
from .problem import ConfigError, DomainError

EPS_U = 1e-7            # control-minimization certification tolerance
NUMERIC_RES = 128       # default grid nodes per control axis in numeric mode
_TIE_BAND = 1e-12       # exact-tie band for the lexicographic rule
_MM_BAND = 1e-9         # value band defining competing numeric minimizers
_MM_SPREAD = 1e-3       # box-relative spread that flags multimodality


class ValuePolynomial:
    """psi(y) = sum_i lam_i phi_i(y) over a fixed monomial basis."""

    def __init__(self, basis, coefficients):
        coefficients = np.asarray(coefficients, float)
        if coefficients.shape != (basis.N,):
            raise ConfigError(
                f"coefficient vector has shape {coefficients.shape}, "
                f"basis needs ({basis.N},)")
        if not np.isfinite(coefficients).all():
            raise ConfigError("coefficients must be finite")
        self.basis = basis
        self.coefficients = coefficients
        self.coefficients.setflags(write=False)

    def values(self, Y):
        """psi at each row of Y; shape (L,)."""
        return self.basis.psi(self.coefficients, np.atleast_2d(Y))

    def gradients(self, Y):
        """grad psi at each row of Y; shape (L, m)."""
        return self.basis.grad_psi(self.coefficients, np.atleast_2d(Y))

    def value(self, y):
        return float(self.values(np.asarray(y, float)[None])[0])

    def gradient(self, y):
        return self.gradients(np.asarray(y, float)[None])[0]

    def __repr__(self):
        return (f"ValuePolynomial(N={self.basis.N}, "
                f"mode={self.basis.mode}, scaled={self.basis.scaling_enabled})")


class FeedbackLaw:
    """Minimizer map y -> argmin_u grad psi(y).f(u,y) + g(u,y).

    mode "closed_form" needs the problem's affine structure (positive
    diagonal R); "numeric" scans the control box; "auto" picks closed form
    when the structure is present.  Ties resolve to the lexicographically
    smallest control; numeric points with well-separated near-optimal
    controls are flagged multimodal.
    """

    def __init__(self, problem, psi, mode="auto", numeric_res=NUMERIC_RES):
        if mode not in ("auto", "closed_form", "numeric"):
            raise ConfigError(f"unknown feedback mode {mode!r}")
        if mode == "auto":
            mode = "closed_form" if problem.affine_structure is not None else "numeric"
        if mode == "closed_form":
            aff = problem.affine_structure
            if aff is None:
                raise ConfigError("closed_form feedback needs an affine structure")
            if np.any(aff.control_weight <= 0):
                raise ConfigError("closed_form feedback needs strictly positive R")
        self.problem = problem
        self.psi = psi
        self.mode = mode
        self.numeric_res = int(numeric_res)
        if self.numeric_res < 2:
            raise ConfigError("numeric feedback needs >= 2 grid nodes per axis")

    # -- batched evaluation (hot path for verification and integration) --

    def feedback_table(self, Y):
        """Minimizing controls for each row of Y; shape (L, n)."""
        Y = np.atleast_2d(np.asarray(Y, float))
        if self.mode == "closed_form":
            return self._closed_table(Y)
        return self._numeric_table(Y)[0]

    def hamiltonian_table(self, Y):
        """H(grad psi(y), y) for each row of Y; shape (L,)."""
        Y = np.atleast_2d(np.asarray(Y, float))
        if self.mode == "closed_form":
            U = self._closed_table(Y)
            grads = self.psi.gradients(Y)
            F = np.asarray(self.problem.dynamics(U, Y), float)
            return np.einsum("lc,lc->l", grads, F) + self.problem.cost(U, Y)
        return self._numeric_table(Y)[1]

    def _closed_table(self, Y):
        aff = self.problem.affine_structure
        grads = self.psi.gradients(Y)                        # (L, m)
        B = np.asarray(aff.input_matrix(Y), float)           # (L, m, n)
        raw = -0.5 * np.einsum("lmc,lm->lc", B, grads) / aff.control_weight
        box = self.problem.control_box
        return np.clip(raw, box.lower, box.upper)

    def _numeric_table(self, Y, chunk=4096):
        box = self.problem.control_box
        Ug = box.grid([self.numeric_res] * self.problem.n)   # (K, n)
        L = len(Y)
        U_out = np.empty((L, self.problem.n))
        H_out = np.empty(L)
        flags = np.zeros(L, dtype=bool)
        spread_tol = _MM_SPREAD * box.widths
        for s in range(0, L, max(1, chunk // max(len(Ug), 1))):
            Yc = Y[s:s + max(1, chunk // max(len(Ug), 1))]
            vals = self._objective(Ug[None, :, :], Yc[:, None, :])   # (l, K)
            best = np.argmin(vals, axis=1)                   # first index = lex smallest
            vmin = np.take_along_axis(vals, best[:, None], axis=1)[:, 0]
            scale = np.maximum(1.0, np.abs(vmin))
            near = vals <= (vmin + _MM_BAND * scale)[:, None]
            for j in range(self.problem.n):
                uj = Ug[:, j]
                hi = np.where(near, uj[None, :], -np.inf).max(axis=1)
                lo = np.where(near, uj[None, :], np.inf).min(axis=1)
                flags[s:s + len(Yc)] |= (hi - lo) > spread_tol[j]
            U0 = Ug[best]
            step0 = box.widths / (self.numeric_res - 1) / 2.0
            Up, vp = self._polish(U0, Yc, step0)
            U_out[s:s + len(Yc)] = Up
            H_out[s:s + len(Yc)] = vp
        return U_out, H_out, flags

    def _objective(self, U, Y):
        """grad psi(y).f(u,y) + g(u,y), broadcasting over leading axes."""
        lead = np.broadcast_shapes(U.shape[:-1], Y.shape[:-1])
        U = np.broadcast_to(U, lead + (self.problem.n,))
        Y = np.broadcast_to(Y, lead + (self.problem.m,))
        grads = self.psi.gradients(Y.reshape(-1, self.problem.m))
        grads = grads.reshape(lead + (self.problem.m,))
        F = np.asarray(self.problem.dynamics(U, Y), float)
        return np.einsum("...c,...c->...", grads, F) + self.problem.cost(U, Y)

    def _polish(self, U, Y, step0, floor=1e-8):
        """Coordinate pattern descent inside the box, lockstep over rows."""
        box = self.problem.control_box
        U = U.copy()
        v = self._objective(U, Y)
        step = np.broadcast_to(step0, U.shape).copy()
        while step.max() > floor:
            improved = np.zeros(len(U), dtype=bool)
            for j in range(self.problem.n):
                for sgn in (-1.0, 1.0):                       # minus first: lex tie rule
                    Ut = U.copy()
                    Ut[:, j] = np.clip(Ut[:, j] + sgn * step[:, j],
                                       box.lower[j], box.upper[j])
                    vt = self._objective(Ut, Y)
                    better = vt < v - _TIE_BAND
                    U[better] = Ut[better]
                    v[better] = vt[better]
                    improved |= better
            step[~improved] *= 0.5
        return U, v

    # -- validated single-point API --

    def feedback(self, y):
        """Minimizing control at one in-box state."""
        y = self._check_state(y)
        return self.feedback_table(y[None])[0]

    def hamiltonian(self, y):
        y = self._check_state(y)
        return float(self.hamiltonian_table(y[None])[0])

    def minimize(self, y):
        """(control, objective value, multimodal flag) at one state."""
        y = self._check_state(y)
        if self.mode == "closed_form":
            u = self.feedback_table(y[None])[0]
            return u, self.hamiltonian(y), False
        U, H, flags = self._numeric_table(y[None])
        return U[0], float(H[0]), bool(flags[0])

    def _check_state(self, y):
        y = np.asarray(y, float).reshape(-1)
        box = self.problem.state_box
        if y.size != self.problem.m:
            raise DomainError(f"state has {y.size} components, expected {self.problem.m}")
        if not box.contains(y):
            j, amt = box.violation(y)
            raise DomainError(
                f"y[{j}]={y[j]:.12g} outside [{box.lower[j]:g}, "
                f"{box.upper[j]:g}] by {amt:.3g}")
        return y

    def __call__(self, y):
        return self.feedback(y)

    def __repr__(self):
        return f"FeedbackLaw({self.problem.name!r}, mode={self.mode!r})"


def hamiltonian(problem, psi, y, mode="auto"):
    """min over u in U of grad psi(y).f(u,y) + g(u,y) at one state."""
    return FeedbackLaw(problem, psi, mode=mode).hamiltonian(y)


def feedback(law, y):
    return law.feedback(y)


class HJBReport:
    """State-box scan of the residual H(grad psi(y), y) - G."""

    def __init__(self, minimum, argmin, violation_fraction, resolution, tol):
        self.minimum = float(minimum)
        self.argmin = np.asarray(argmin, float)
        self.violation_fraction = float(violation_fraction)
        self.resolution = resolution
        self.tol = float(tol)

    @property
    def passed(self):
        return self.minimum >= -self.tol

    def summary(self):
        state = "pass" if self.passed else "FAIL"
        return (f"hjb {state}: min residual {self.minimum:.6e} at "
                f"y={np.array2string(self.argmin, precision=6)} "
                f"(tol {self.tol:.3e}, {self.violation_fraction:.4%} of "
                f"{self.resolution} sample below -tol)")


def verify_hjb(problem, psi, G, resolution=201, tol=1e-6, mode="auto"):
    """Scan H - G over a uniform state-box sample.

    A converged certificate keeps the minimum above -tol; the report carries
    the minimum, its argmin, and the fraction of sample points below -tol.
    """
    law = FeedbackLaw(problem, psi, mode=mode)
    Y = problem.state_box.grid(resolution)
    resid = law.hamiltonian_table(Y) - G
    k = int(np.argmin(resid))
    frac = float(np.mean(resid < -tol))
    return HJBReport(resid[k], Y[k], frac, len(Y), tol)


class OptimalityReport:
    """Residuals of the two pointwise optimality identities along a cycle."""

    def __init__(self, pointwise_max, hamiltonian_max, samples, degenerate):
        self.pointwise_max = float(pointwise_max)
        self.hamiltonian_max = float(hamiltonian_max)
        self.samples = int(samples)
        self.degenerate = bool(degenerate)

    def summary(self):
        if self.degenerate:
            return "optimality: degenerate trajectory (period below minimum)"
        return (f"optimality: max |grad psi.f + g - G| = {self.pointwise_max:.3e}, "
                f"max H - G = {self.hamiltonian_max:.3e} over {self.samples} samples")


def check_optimality_conditions(problem, psi, G, trajectory, min_period=1e-2,
                                mode="auto"):
    """Along a detected cycle: the running identity grad psi.f + g = G and
    the pointwise minimization H = G both hold for an exact optimal pair;
    their maximal residuals measure certificate quality."""
    T = getattr(trajectory, "T_star", None)
    if T is None or T < min_period:
        return OptimalityReport(np.inf, np.inf, 0, degenerate=True)
    Y = np.atleast_2d(trajectory.states)
    U = np.atleast_2d(trajectory.controls)
    grads = psi.gradients(Y)
    F = np.asarray(problem.dynamics(U, Y), float)
    run = np.einsum("lc,lc->l", grads, F) + problem.cost(U, Y) - G
    law = FeedbackLaw(problem, psi, mode=mode)
    ham = law.hamiltonian_table(Y) - G
    return OptimalityReport(np.abs(run).max(), ham.max(), len(Y), degenerate=False)


# ---------------------------------------------------------------------------
# certificate files


def certificate_text(psi, meta=None):
    """Serialize coefficients plus basis metadata; bit-exact round trip.

    Floats are written in C99 hex with a decimal comment; metadata keys are
    emitted sorted, so identical inputs yield identical bytes.
    """
    basis = psi.basis
    if basis.mode is None:
        raise ConfigError("certificate needs a basis built with a named mode")
    lines = ["# perilp certificate", "format = 1"]
    lines.append(f"problem = {basis.problem.name}")
    lines.append(f"state_dim = {basis.problem.m}")
    lines.append(f"control_dim = {basis.problem.n}")
    lines.append(f"basis = {basis.mode.kind}")
    lines.append(f"degree = {basis.mode.degree}")
    lines.append(f"scaling = {'on' if basis.scaling_enabled else 'off'}")
    for key in sorted(meta or {}):
        val = (meta or {})[key]
        if isinstance(val, float):
            lines.append(f"meta {key} = {float(val).hex()}  # {val:.17g}")
        else:
            lines.append(f"meta {key} = {val}")
    lines.append(f"n_coefficients = {basis.N}")
    for i, c in enumerate(psi.coefficients):
        lines.append(f"c {i} = {float(c).hex()}  # {c:.17g}")
    return "\n".join(lines) + "\n"


def parse_certificate(text):
    """Parse certificate text into a plain dict (no basis reconstruction)."""
    fields = {}
    meta = {}
    coeffs = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"certificate line not key = value: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key.startswith("c "):
            coeffs[int(key[2:])] = float.fromhex(val)
        elif key.startswith("meta "):
            try:
                meta[key[5:]] = float.fromhex(val)
            except ValueError:
                meta[key[5:]] = val
        else:
            fields[key] = val
    for need in ("format", "problem", "basis", "degree", "scaling",
                 "n_coefficients"):
        if need not in fields:
            raise ConfigError(f"certificate missing field {need!r}")
    n = int(fields["n_coefficients"])
    if sorted(coeffs) != list(range(n)):
        raise ConfigError("certificate coefficient list incomplete")
    fields["coefficients"] = np.array([coeffs[i] for i in range(n)])
    fields["meta"] = meta
    return fields


def load_certificate(text, problem):
    """Rebuild the value polynomial against a problem; verify compatibility."""
    fields = parse_certificate(text)
    if fields["problem"] != problem.name:
        raise ConfigError(
            f"certificate is for problem {fields['problem']!r}, got {problem.name!r}")
    if int(fields.get("state_dim", problem.m)) != problem.m:
        raise ConfigError("certificate state dimension mismatch")
    if int(fields.get("control_dim", problem.n)) != problem.n:
        raise ConfigError("certificate control dimension mismatch")
    mode = BasisMode(fields["basis"], int(fields["degree"]))
    basis = build_basis(problem, mode,
                        scaling_enabled=fields["scaling"] == "on")
    if basis.N != int(fields["n_coefficients"]):
        raise ConfigError(
            f"certificate has {fields['n_coefficients']} coefficients, "
            f"basis yields {basis.N}")
    return ValuePolynomial(basis, fields["coefficients"]), fields["meta"]
