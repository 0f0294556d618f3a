"""Adaptive loop: SOLVE -> ESTIMATE -> MARK -> REFINE, with a per-iteration trace."""

import csv
import io
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import AllZero, InsufficientData, ValidationError
from .estimator import estimate
from .mesh import bisect, check_grading, extrude, graded_interval, initial_mesh, uniform_refine
from .optimizer import DiscreteSystem, ProblemData, active_set_solve, inherit, objective

TRACE_COLUMNS = ("iter", "nT_base", "nT_cyl", "dofs", "Y", "M", "E_V", "E_P", "E_Z",
                 "E_Lambda", "osc", "total", "J", "as_iters", "seconds")
INT_COLUMNS = {"iter", "nT_base", "nT_cyl", "dofs", "M", "as_iters"}


@dataclass
class AfemConfig:
    """Settings of one adaptive run.

    ``log_base`` selects the logarithm of the truncation rule
    ``Y = 1 + log(#T) / 3`` (``"e"`` or ``"10"``). ``gamma_margin`` is the
    relative excess of the grading exponent over ``3 / (2s)``.
    """

    problem: ProblemData
    domain: object = "l-shape"
    max_iterations: int = 10
    initial_refinements: int = 0
    enforce_grading: bool = False
    grading_C: float = 10.0
    gamma_margin: float = 0.1
    log_base: str = "e"
    m_growth: int = 1
    interior_stars_only: bool = False
    record_time: bool = False

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError(f"theta must lie in [0, 1], got {self.theta}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ValidationError("max_iterations must be a positive integer")
        if int(self.initial_refinements) != self.initial_refinements or self.initial_refinements < 0:
            raise ValidationError("initial_refinements must be a nonnegative integer")
        if not self.grading_C > 0:
            raise ValidationError("grading_C must be positive")
        if not self.gamma_margin > 0:
            raise ValidationError("gamma_margin must be positive (the grading needs gamma > 3/(2s))")
        if self.log_base not in ("e", "10"):
            raise ValidationError(f"log_base must be 'e' or '10', got {self.log_base!r}")
        if int(self.m_growth) != self.m_growth or self.m_growth < 1:
            raise ValidationError("m_growth must be a positive integer")

    @property
    def theta(self):
        return self.problem.theta

    @property
    def gamma(self):
        return 3.0 / (2.0 * self.problem.s) * (1.0 + self.gamma_margin)


@dataclass
class AfemTrace:
    """Rows of per-iteration data; ``final`` holds the last mesh and solution."""

    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict, repr=False)

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None):
        text = format_trace(self.rows)
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return cls(parse_trace(fh.read()))


def _fmt(name, value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if name in INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


def format_row(row):
    return ",".join(_fmt(c, row.get(c)) for c in TRACE_COLUMNS) + "\n"


def format_trace(rows):
    return ",".join(TRACE_COLUMNS) + "\n" + "".join(format_row(r) for r in rows)


def parse_trace(text):
    reader = csv.reader(io.StringIO(text))
    header = next((rec for rec in reader if rec), None)
    if header is None:
        raise InsufficientData("empty trace")
    if tuple(header) != TRACE_COLUMNS:
        raise ValidationError(f"unexpected trace header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        row = {}
        for name, val in zip(TRACE_COLUMNS, rec):
            if val == "":
                row[name] = None
            elif name in INT_COLUMNS:
                row[name] = int(val)
            else:
                row[name] = float(val)
        rows.append(row)
    return rows


# ----------------------------------------------------------------- modules


def mark_maximum(indicators, theta):
    """Indices ``K`` with ``E_K >= theta * max E``.

    Raises :class:`AllZero` when every indicator vanishes.
    """
    E = np.asarray(indicators, dtype=float)
    if not 0.0 <= theta <= 1.0:
        raise ValidationError(f"theta must lie in [0, 1], got {theta}")
    if E.size == 0 or not np.any(E > 0):
        raise AllZero("all indicators are zero")
    return np.flatnonzero(E >= theta * E.max())


def truncation_height(n_triangles, log_base="e"):
    log = math.log if log_base == "e" else math.log10
    return 1.0 + log(n_triangles) / 3.0


def choose_levels(base, Y, gamma, alpha, config):
    """``M = ceil(sqrt(#T))``, raised until the grading check passes if enforced."""
    M = int(math.ceil(math.sqrt(base.n_triangles)))
    mesh = extrude(base, graded_interval(Y, M, gamma), alpha)
    if config.enforce_grading:
        while not check_grading(mesh, config.grading_C):
            M += int(config.m_growth)
            mesh = extrude(base, graded_interval(Y, M, gamma), alpha)
    return mesh


def build_mesh(base, config):
    """Extruded mesh over ``base`` with ``Y`` and ``M`` from the refinement rules."""
    Y = truncation_height(base.n_triangles, config.log_base)
    return choose_levels(base, Y, config.gamma, config.problem.alpha, config)


def refine_step(mesh, marked, config):
    """Bisect ``marked`` base triangles and rebuild the extruded mesh."""
    marked = np.asarray(marked)
    if marked.size == 0:
        raise ValidationError("refine_step needs at least one marked triangle")
    return build_mesh(bisect(mesh.base, marked), config)


def fit_rate(trace, window=5, column="total"):
    """Least-squares slope of ``log(column)`` against ``log(nT_cyl)`` over the last rows."""
    rows = trace.rows if isinstance(trace, AfemTrace) else list(trace)
    if window < 3:
        raise InsufficientData("the window needs at least three rows")
    rows = rows[-window:]
    if len(rows) < window:
        raise InsufficientData(f"need {window} rows, trace has {len(rows)}")
    x = np.array([r["nT_cyl"] for r in rows], dtype=float)
    y = np.array([r[column] for r in rows], dtype=float)
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise InsufficientData(f"column {column!r} needs positive values in the window")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)


def run_afem(config, jobs=1, on_row=None, observer=None):
    """Run the adaptive loop.

    Parameters
    ----------
    config : AfemConfig
    jobs : int
        Worker threads of the estimator.
    on_row : callable, optional
        Called with each trace row as soon as it is complete.
    observer : callable, optional
        Called as ``observer(row, mesh, system, quad, est)`` every iteration.

    Returns
    -------
    AfemTrace
        ``trace.final`` holds ``mesh``, ``quad``, ``estimate``, ``system``.

    Exceptions raised inside an iteration carry the partial trace in their
    ``trace`` attribute.
    """
    data = config.problem
    trace = AfemTrace()
    base = uniform_refine(initial_mesh(config.domain), int(config.initial_refinements))
    mesh = build_mesh(base, config)
    Z0 = None
    try:
        for it in range(1, int(config.max_iterations) + 1):
            t0 = time.perf_counter()
            system = DiscreteSystem(mesh, data)
            quad, as_iters = active_set_solve(data, mesh, init=Z0, system=system)
            est = estimate(system, quad, data, jobs=jobs,
                           interior_stars_only=config.interior_stars_only)
            g = est.globals()
            row = {
                "iter": it,
                "nT_base": mesh.base.n_triangles,
                "nT_cyl": mesh.n_cells,
                "dofs": mesh.n_dofs,
                "Y": mesh.Y,
                "M": mesh.M,
                **g,
                "J": objective(quad, data, mesh, system),
                "as_iters": as_iters,
                "seconds": (time.perf_counter() - t0) if config.record_time else None,
            }
            trace.append(row)
            trace.final = {"mesh": mesh, "quad": quad, "estimate": est, "system": system}
            if on_row is not None:
                on_row(row)
            if observer is not None:
                observer(row, mesh, system, quad, est)
            if it == config.max_iterations:
                break
            try:
                marked = mark_maximum(est.element_indicators(mesh.base), config.theta)
            except AllZero:
                break
            mesh = refine_step(mesh, marked, config)
            Z0 = inherit(quad, mesh.base)
    except Exception as exc:
        exc.trace = trace
        raise
    return trace


def config_fields():
    return [f.name for f in fields(AfemConfig)]
