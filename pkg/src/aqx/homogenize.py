"""Cell problems, the homogenized density and functional, field-class membership and relaxation checks.

The scale-``n`` cell problem at a frozen point ``x`` minimizes
``mean_y f(x, n y, xi + w(y))`` over the constraint class at ``x``.  Scales
run along the dyadic chain ``1, 2, 4, ...``; the scale-``n`` problem uses a
micro grid of ``r n`` points per axis (``r`` points per period of the
integrand), and the scale-``2n`` problem receives the replicated scale-``n``
minimizer ``y -> w(2y)`` as an extra start.  Replication is exact on these
nested grids, so traces are non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .envelope import (
    EnvelopeOptions,
    EnvelopeResult,
    _check_integrand,
    assemble,
    envelope_batch,
    make_problem,
    pointwise_envelope_field,
    solve_problems,
)
from .errors import GridIncompatible
from .integrand import IntegrandSpec
from .operator import OperatorSpec, apply_A_macro, symbol_table
from .spectral import Grid, PeriodicField, hneg_norm, hneg_weights
from .twoscale import TwoScaleField, generate_sequence, macro_residuals, parse_eps


@dataclass
class CellTrace:
    x: tuple[float, ...]
    xi: tuple[float, ...]
    n_list: list[int]
    values: list[float]
    grids: list[tuple[int, ...]]
    gnorms: list[float] = field(default_factory=list)
    minimizers: list[PeriodicField] = field(default_factory=list, repr=False)

    @property
    def fhom_estimate(self) -> float:
        return min(self.values)

    def is_monotone(self, tol: float = 1e-9) -> bool:
        return all(b <= a + tol for a, b in zip(self.values, self.values[1:]))

    def as_dict(self) -> dict:
        return {"x": list(self.x), "xi": list(self.xi), "n": self.n_list, "values": self.values,
                "grids": [list(g) for g in self.grids], "fhom": self.fhom_estimate}


@dataclass
class FieldClassReport:
    tag: str
    residuals: dict
    tol: float

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.residuals.values())

    def as_dict(self) -> dict:
        return {"class": self.tag, "residuals": self.residuals, "tol": self.tol, "passed": self.passed}


# --- cell problems ------------------------------------------------------------

def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def cell_samples(grid: Grid, n: int) -> np.ndarray:
    """``n y`` reduced into ``Q`` at every micro node."""
    z = n * grid.coords()
    return z - np.floor(z + 0.5)


def _check_scale(f: IntegrandSpec, grid: Grid, n: int) -> None:
    if not _is_power_of_two(n):
        raise GridIncompatible(f"oscillation scale n={n} must be a positive power of 2")
    for m in grid.dims:
        if m % n:
            raise GridIncompatible(f"n={n} does not divide micro grid size {m}")
    band = f.y_bandwidth()
    if band and n * band >= min(grid.dims) // 2:
        raise GridIncompatible(
            f"n * (y-bandwidth {band}) = {n * band} is not resolved below Nyquist {min(grid.dims) // 2}"
        )


def replicate(w: PeriodicField, factor: int = 2) -> np.ndarray:
    """Values of ``y -> w(factor * y)`` on the grid refined ``factor`` times."""
    vals = w.values
    for axis, m in enumerate(w.grid.dims):
        reps = [1] * vals.ndim
        reps[axis] = factor
        vals = np.tile(vals, reps)
        # node k of the fine grid sits at factor*y_k = node (k - (factor-1) m/2) of the coarse grid
        vals = np.roll(vals, (factor - 1) * m // 2, axis=axis)
    return vals


def _cell_batch(op, f, xs, xis, n, grid, opts, extra=None) -> list[EnvelopeResult]:
    if not f.depends_on_y:
        return envelope_batch(op, f, xs, xis, replace(opts, grid=grid.dims), None, extra)
    _check_scale(f, grid, n)
    y = cell_samples(grid, n)
    problems = [make_problem(op, f, x, xi, grid, opts, y, "envelope", None if extra is None else extra[k])
                for k, (x, xi) in enumerate(zip(xs, xis))]
    runs = solve_problems(f, problems, opts)
    results = [assemble(pb, r) for pb, r in zip(problems, runs)]
    for res, pb in zip(results, problems):
        X = np.broadcast_to(pb.x, grid.dims + (op.N,))
        XI = np.broadcast_to(pb.xi, grid.dims + (op.d,))
        res.baseline = float(np.mean(f.value(X, y, XI)))
    return results


def cell_problem(op: OperatorSpec, f: IntegrandSpec, x, xi, n: int,
                 opts: EnvelopeOptions = EnvelopeOptions(), extra_starts=None) -> EnvelopeResult:
    """Scale-``n`` cell infimum on the micro grid ``opts.grid``."""
    grid = Grid.micro(opts.grid)
    if f.depends_on_y:
        _check_scale(f, grid, n)
    return _cell_batch(op, f, [x], [xi], n, grid, opts, None if extra_starts is None else [extra_starts])[0]


def _scale_list(n_max: int) -> list[int]:
    if not _is_power_of_two(n_max):
        raise GridIncompatible(f"n_max={n_max} must be a power of 2")
    out, n = [], 1
    while n <= n_max:
        out.append(n)
        n *= 2
    return out


def fhom_batch(op: OperatorSpec, f: IntegrandSpec, xs, xis, n_max: int = 8,
               opts: EnvelopeOptions = EnvelopeOptions(), resolution: int | None = None,
               keep_minimizers: bool = False) -> list[CellTrace]:
    """Dyadic cell traces at every pair ``(xs[k], xis[k])``.

    ``resolution`` is the number of micro nodes per period of the scale-``n``
    integrand (default ``opts.grid // n_max``), so the scale-``n`` grid has
    ``resolution * n`` nodes per axis.
    """
    _check_integrand(op, f)
    scales = _scale_list(n_max)
    xs = [tuple(map(float, np.atleast_1d(x))) for x in xs]
    xis = [tuple(map(float, np.atleast_1d(xi))) for xi in xis]
    traces = [CellTrace(x, xi, [], [], []) for x, xi in zip(xs, xis)]
    if not f.depends_on_y:
        results = envelope_batch(op, f, xs, xis, opts)
        for tr, res in zip(traces, results):
            for n in scales:
                tr.n_list.append(n)
                tr.values.append(res.value)
                tr.grids.append(tuple(opts.grid))
                tr.gnorms.append(res.gnorm)
                if keep_minimizers:
                    tr.minimizers.append(res.minimizer)
        return traces
    if resolution is None:
        resolution = max(4, min(opts.grid) // n_max)
        resolution += resolution % 2
    prev = None
    for n in scales:
        grid = Grid.micro((resolution * n,) * op.N)
        extra = None if prev is None else [[replicate(r.minimizer)] for r in prev]
        prev = _cell_batch(op, f, xs, xis, n, grid, opts, extra)
        for tr, res in zip(traces, prev):
            tr.n_list.append(n)
            tr.values.append(res.value)
            tr.grids.append(grid.dims)
            tr.gnorms.append(res.gnorm)
            if keep_minimizers:
                tr.minimizers.append(res.minimizer)
    return traces


def fhom(op: OperatorSpec, f: IntegrandSpec, x, xi, n_max: int = 8,
         opts: EnvelopeOptions = EnvelopeOptions(), resolution: int | None = None,
         keep_minimizers: bool = False) -> CellTrace:
    return fhom_batch(op, f, [x], [xi], n_max, opts, resolution, keep_minimizers)[0]


# --- membership -----------------------------------------------------------------

def _ay_residuals(op: OperatorSpec, w: TwoScaleField) -> np.ndarray:
    """H^-1 proxy of ``A_y(x_k) w(x_k, .)`` at every macro node (all modes)."""
    xs = w.macro.coords().reshape(-1, w.N)
    spectra = w.node_spectra()
    A = op.coefficients(xs)  # (K, N, l, d)
    lat = w.micro.lattice().astype(float)
    weights = hneg_weights(w.micro)
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        sym = np.einsum("...i,ild->...ld", lat, A[k])
        res = 2j * np.pi * np.einsum("...ld,...d->...l", sym, spectra[k])
        out[k] = np.sqrt(np.sum(np.sum(np.abs(res) ** 2, axis=-1) * weights))
    return out


def membership_check(op: OperatorSpec, fld, cls: str, tol: float = 1e-7) -> FieldClassReport:
    """Residuals for the classes ``U`` (macro A-free), ``W`` (mean-zero, A_y-free) and ``F`` (their sum)."""
    cls = cls.upper()
    if cls not in ("U", "W", "F"):
        raise ValueError(f"unknown field class {cls!r}")
    if cls == "U":
        if not isinstance(fld, PeriodicField):
            raise TypeError("class U expects a macro PeriodicField")
        return FieldClassReport("U", {"A_macro": hneg_norm(apply_A_macro(op, fld))}, tol)
    if not isinstance(fld, TwoScaleField):
        raise TypeError(f"class {cls} expects a TwoScaleField")
    if cls == "W":
        means = fld.cell_mean().values
        return FieldClassReport("W", {
            "mean": float(np.abs(means).max()),
            "A_y": float(_ay_residuals(op, fld).max()),
        }, tol)
    mean = fld.cell_mean()
    return FieldClassReport("F", {
        "A_macro": hneg_norm(apply_A_macro(op, mean)),
        "A_y": float(_ay_residuals(op, fld.fluctuation()).max()),
    }, tol)


# --- homogenized functional -------------------------------------------------------

@dataclass
class EhomResult:
    value: float
    feasible: bool
    membership: FieldClassReport
    traces: list[CellTrace] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"value": self.value if self.feasible else "inf", "feasible": self.feasible,
                "membership": self.membership.as_dict(), "traces": [t.as_dict() for t in self.traces]}


def ehom(op: OperatorSpec, f: IntegrandSpec, u: PeriodicField, n_max: int = 8,
         opts: EnvelopeOptions = EnvelopeOptions(), tol: float = 1e-7,
         resolution: int | None = None) -> EhomResult:
    """Midpoint integral of ``fhom(x, u(x))``, or ``inf`` when ``A u != 0``."""
    report = membership_check(op, u, "U", tol)
    if not report.passed:
        return EhomResult(float("inf"), False, report)
    xs = u.grid.coords().reshape(-1, u.grid.N)
    xis = u.values.reshape(-1, u.d)
    traces = fhom_batch(op, f, xs, xis, n_max, opts, resolution)
    value = float(np.mean([t.fhom_estimate for t in traces]))
    return EhomResult(value, True, report, traces)


# --- relaxation -----------------------------------------------------------------

@dataclass
class RelaxationReport:
    envelope_integral: float
    eps: list[str]
    energies: list[float]
    residuals: list[float]
    gaps: list[float]
    grid: tuple[int, ...]
    params: dict

    def as_dict(self) -> dict:
        return {"envelope_integral": self.envelope_integral, "eps": self.eps, "energies": self.energies,
                "residuals": self.residuals, "gaps": self.gaps, "grid": list(self.grid), "params": self.params}


def relaxation_check(op: OperatorSpec, f: IntegrandSpec, u: PeriodicField, eps_list,
                     opts: EnvelopeOptions = EnvelopeOptions(), out_dims=None, tol: float = 1e-7) -> RelaxationReport:
    """Energies of ``u_eps = u + w*(x, x/eps)`` against the integral of the envelope of ``f`` along ``u``.

    ``w*`` is the nodewise envelope minimizer on the grid of ``u`` (held
    constant on each macro cell of that grid).  The sequence lives on a fine
    grid whose default size ``m / eps_min`` per axis makes the finest scale
    sample every micro node exactly.
    """
    report = membership_check(op, u, "U", tol)
    if not report.passed:
        raise ValueError(f"u is not A-free: {report.residuals}")
    env_field, results = pointwise_envelope_field(op, f, u, opts)
    envelope_integral = float(np.mean(env_field.values))
    micro = Grid.micro(opts.grid)
    w = np.stack([r.minimizer.values for r in results]).reshape(u.grid.dims + micro.dims + (u.d,))
    base = u.values.reshape(u.grid.dims + (1,) * u.grid.N + (u.d,))
    v = TwoScaleField(u.grid, micro, base + w)
    eps_list = [parse_eps(e) for e in eps_list]
    if out_dims is None:
        K = max(e.denominator for e in eps_list)
        out_dims = tuple(m * K for m in micro.dims)
    out = Grid.macro(out_dims)
    bundle = generate_sequence(op, v, eps_list, out, tol=tol)
    xs = out.coords()
    energies = []
    for ue in bundle.fields:
        vals = f.value(xs, None, ue.values) if not f.depends_on_y else f.value(xs, np.zeros_like(xs), ue.values)
        energies.append(float(np.mean(vals)))
    residuals = macro_residuals(op, bundle)
    return RelaxationReport(
        envelope_integral=envelope_integral,
        eps=[str(e) for e in eps_list],
        energies=energies,
        residuals=residuals,
        gaps=[e - envelope_integral for e in energies],
        grid=out.dims,
        params={"macro": list(u.grid.dims), "micro": list(micro.dims), "options": opts.as_dict()},
    )
