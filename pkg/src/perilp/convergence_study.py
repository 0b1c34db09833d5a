"""Degree and resolution sweeps over the averaged-cost solver.

Two experiment drivers live here.  ``sweep_degree`` re-solves one problem
for an increasing list of basis degrees and checks that the reported
optimum is nondecreasing in the degree (larger bases tighten the dual
feasible set, so the maximin value can only move up).  The allowed
backslide per adjacent pair is twice the combined gap and pricing
tolerance, never an invented constant.  ``sweep_oracle_resolution`` holds
the degree fixed and re-solves the dense-grid reference at finer and
finer grids; those objectives decrease weakly and stay above the
column-generation value, which prices over the continuum instead of a
fixed grid.

Results land in a ``SweepResult``: entries sorted by the swept parameter,
with a CSV emitter and a short text summary.  A failed member run aborts
the sweep but the completed prefix is preserved on the raised error.
"""

from dataclasses import dataclass
import math
import time

from .basis import BasisMode, build_basis
from .colgen import ColGenConfig, ColGenError, run_colgen
from .lp import dense_grid_oracle
from .problem import ConfigError


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


@dataclass(frozen=True)
class SweepEntry:
    """One member run: swept parameter plus the solve outcome."""

    param: int
    N: int
    G: float
    gap: float | None
    iterations: int | None
    wall_time: float


class SweepResult:
    """Ordered sweep outcomes plus the assertion slack actually used."""

    def __init__(self, kind, entries, reference=None):
        entries = sorted(entries, key=lambda e: e.param)
        params = [e.param for e in entries]
        if len(set(params)) != len(params):
            raise ConfigError("duplicate swept parameter")
        self.kind = kind
        self.entries = tuple(entries)
        self.reference = reference

    @property
    def params(self):
        return [e.param for e in self.entries]

    @property
    def values(self):
        return [e.G for e in self.entries]

    def to_csv(self, fileobj):
        param_name = "J" if self.kind == "degree" else "resolution"
        fileobj.write(f"{param_name},N,G,gap,iterations,wall_s\n")
        for e in self.entries:
            row = [e.param, e.N, e.G, e.gap, e.iterations, e.wall_time]
            fileobj.write(",".join(_fmt(v) for v in row) + "\n")

    def summary(self):
        param_name = "J" if self.kind == "degree" else "resolution"
        lines = [f"sweep over {param_name}: {len(self.entries)} runs"]
        for e in self.entries:
            lines.append(
                f"  {param_name}={e.param:<4d} N={e.N:<5d} G={e.G:.10f}"
                + (f" gap={e.gap:.3e}" if e.gap is not None else "")
                + (f" iters={e.iterations}" if e.iterations is not None else "")
            )
        if self.reference is not None:
            lines.append(f"  colgen reference G={self.reference:.10f}")
        return "\n".join(lines)


class SweepError(RuntimeError):
    """A member run failed or an ordering assertion broke.

    ``partial`` holds the completed prefix so a long sweep is not lost.
    """

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def degree_slack(g_prev, g_next, cfg):
    # Two solves contribute: each G is only trusted to its own gap plus
    # pricing tolerance, hence the factor two on the larger magnitude.
    scale = max(1.0, abs(g_prev), abs(g_next))
    return 2.0 * (cfg.eps_gap * scale + cfg.eps_price)


def sweep_degree(problem, J_list, cfg=None, mode="tensor", scaling=True):
    """Solve ``problem`` at each degree in ``J_list``; assert monotone G.

    Returns a SweepResult sorted by degree.  Raises SweepError carrying
    the completed entries if a member fails or the ordering breaks.
    """
    if cfg is None:
        cfg = ColGenConfig()
    J_sorted = sorted(int(J) for J in J_list)
    if not J_sorted:
        raise ConfigError("empty degree list")
    entries = []
    for J in J_sorted:
        basis = build_basis(problem, BasisMode(mode, J), scaling_enabled=scaling)
        t0 = time.perf_counter()
        try:
            state, measure, dual, G = run_colgen(problem, basis, cfg)
        except ColGenError as exc:
            partial = SweepResult("degree", entries)
            raise SweepError(f"degree {J} failed: {exc}", partial) from exc
        wall = time.perf_counter() - t0
        entries.append(SweepEntry(J, basis.N, G, state.gaps[-1],
                                  state.iterations, wall))
    for prev, nxt in zip(entries, entries[1:]):
        slack = degree_slack(prev.G, nxt.G, cfg)
        if nxt.G < prev.G - slack:
            partial = SweepResult("degree", entries)
            raise SweepError(
                f"G decreased from degree {prev.param} to {nxt.param}: "
                f"{prev.G:.10f} -> {nxt.G:.10f} (slack {slack:.3e})",
                partial)
    return SweepResult("degree", entries)


def sweep_oracle_resolution(problem, J, resolution_list, cfg=None,
                            mode="tensor", scaling=True):
    """Dense-grid objectives at increasing resolutions, against colgen.

    The grid objectives must decrease weakly as the grid refines (every
    coarse grid is a subset of none of the finer ones here, but the LP
    over a finer uniform grid relaxes the coarse one in value because the
    coarse optimum is a feasible competitor up to interpolation; the
    observed ordering is asserted at LP tolerance).  Each must also sit
    above the column-generation value by at least -1e-6: a fixed grid
    cannot beat a continuum pricer by more than tolerance.
    """
    if cfg is None:
        cfg = ColGenConfig()
    res_list = [int(r) for r in resolution_list]
    if res_list != sorted(res_list) or len(set(res_list)) != len(res_list):
        raise ConfigError("resolutions must be strictly increasing")
    if not res_list:
        raise ConfigError("empty resolution list")
    basis = build_basis(problem, BasisMode(mode, J), scaling_enabled=scaling)
    try:
        state, measure, dual, G_ref = run_colgen(problem, basis, cfg)
    except ColGenError as exc:
        raise SweepError(f"reference colgen run failed: {exc}",
                         SweepResult("oracle_resolution", [])) from exc
    entries = []
    for res in res_list:
        t0 = time.perf_counter()
        try:
            _, G = dense_grid_oracle(problem, basis, res)
        except (ConfigError, RuntimeError) as exc:
            partial = SweepResult("oracle_resolution", entries, reference=G_ref)
            raise SweepError(f"resolution {res} failed: {exc}", partial) from exc
        wall = time.perf_counter() - t0
        entries.append(SweepEntry(res, basis.N, G, None, None, wall))
    lp_tol = 1e-8
    for prev, nxt in zip(entries, entries[1:]):
        slack = lp_tol * max(1.0, abs(prev.G), abs(nxt.G))
        if nxt.G > prev.G + slack:
            partial = SweepResult("oracle_resolution", entries, reference=G_ref)
            raise SweepError(
                f"oracle objective rose from resolution {prev.param} to "
                f"{nxt.param}: {prev.G:.10f} -> {nxt.G:.10f}", partial)
    for e in entries:
        if e.G < G_ref - 1e-6:
            partial = SweepResult("oracle_resolution", entries, reference=G_ref)
            raise SweepError(
                f"oracle at resolution {e.param} beat colgen by "
                f"{G_ref - e.G:.3e}", partial)
    if any(not math.isfinite(e.G) for e in entries):
        raise SweepError("non-finite oracle objective",
                         SweepResult("oracle_resolution", entries, reference=G_ref))
    return SweepResult("oracle_resolution", entries, reference=G_ref)
