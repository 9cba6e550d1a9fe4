"""Field-level projection ``Pi(x)`` onto the discrete constraint class at a frozen point.

``Pi(x)`` multiplies each Fourier mode ``lam != 0`` by ``P(x, lam)`` and
removes the mean.  Nyquist modes are removed as well: a mode with some
``lam_i = -M_i/2`` pairs with a stored frequency that is not ``-lam``, so a
modewise projector would break conjugate symmetry there.  With that
convention ``Pi(x)`` is an exact orthogonal projection in ``L^2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .operator import (
    OperatorSpec,
    ay_residual_norm,
    decompose_batch,
    lattice_directions,
    projector_table,
    projector_tables,
)
from .spectral import TWO_PI, Grid, PeriodicField, inverse_transform, lp_norm, remove_mean


def _key(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(x, float)))


def projector_multiplier(op: OperatorSpec, x, grid: Grid) -> np.ndarray:
    """``P(x, lam)`` with the zero mode and Nyquist modes set to zero, shape ``(*dims, d, d)``."""
    P = projector_table(op, _key(x), grid).P.copy()
    P[grid.nyquist_mask()] = 0.0
    return P


def project_spectrum(P: np.ndarray, spec: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", P, spec)


def project(op: OperatorSpec, x, psi: PeriodicField) -> PeriodicField:
    """``Pi(x) psi``: mean-zero, modewise kernel projection."""
    if psi.d != op.d:
        raise ValueError(f"field has {psi.d} components, operator expects {op.d}")
    P = projector_multiplier(op, x, psi.grid)
    out = inverse_transform(project_spectrum(P, psi.spectrum), psi.grid)
    return out


def deficiency_bound(op: OperatorSpec, x, grid: Grid | None = None, radius: int = 8) -> float:
    """``C(x) = sup |Q(x, lam/|lam|)|`` over lattice directions.

    Uses the frequencies of ``grid`` when given, otherwise all integer
    directions with entries up to ``radius``.  Returns ``0`` for an operator
    whose kernel is the whole space (no constraint).
    """
    if grid is not None:
        lat = grid.lattice().reshape(-1, grid.N)
        dirs = lat[np.any(lat != 0, axis=1)].astype(float)
        dirs = np.unique(np.round(dirs / np.linalg.norm(dirs, axis=1, keepdims=True), 12), axis=0)
    else:
        dirs = lattice_directions(op.N, radius)
    _, _, s = decompose_batch(op, np.asarray(x, float)[None, :], dirs)
    if s.shape[-1] == 0:
        return 0.0
    return float(np.max(1.0 / s[..., -1]))


def effective_constant(C: float) -> float:
    """Converts ``C(x)`` to the constant of the L^2 / H^-1 proxy deficiency estimate."""
    return C * np.sqrt(1.0 + TWO_PI**2) / TWO_PI


@dataclass(frozen=True)
class ProjectionReport:
    x: tuple[float, ...]
    grid: tuple[int, ...]
    p: float
    input_mean: float
    residual: float
    idempotency_gap: float
    deficiency_constant: float
    effective_constant: float
    deficiency_lhs: float
    deficiency_rhs: float
    bound_status: str
    # share of ||psi - mean|| in Nyquist modes, which the bound does not cover
    nyquist_fraction: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def bound_holds(self) -> bool:
        return self.deficiency_lhs <= self.deficiency_rhs * (1 + 1e-12) + 1e-14


def projection_report(op: OperatorSpec, x, psi: PeriodicField, p: float = 2.0) -> ProjectionReport:
    proj = project(op, x, psi)
    again = project(op, x, proj)
    scale = max(lp_norm(psi, 2), 1e-300)
    C = deficiency_bound(op, x, psi.grid)
    Ceff = effective_constant(C)
    # Nyquist modes have no conjugate partner, so A_y cannot control them: the
    # deficiency estimate is stated for the mean-zero, Nyquist-free part
    centered = remove_mean(psi)
    spec = centered.spectrum.copy()
    spec[psi.grid.nyquist_mask()] = 0.0
    band = inverse_transform(spec, psi.grid)
    nyq = lp_norm(centered - band, 2) / max(lp_norm(centered, 2), 1e-300)
    lhs = lp_norm(band - project(op, x, band), 2)
    rhs = Ceff * ay_residual_norm(op, x, band)
    return ProjectionReport(
        x=_key(x),
        grid=psi.grid.dims,
        p=float(p),
        input_mean=float(np.linalg.norm(psi.mean())),
        residual=ay_residual_norm(op, x, proj) / scale,
        idempotency_gap=lp_norm(again - proj, 2) / scale,
        deficiency_constant=C,
        effective_constant=Ceff,
        deficiency_lhs=lhs,
        deficiency_rhs=rhs,
        bound_status="certified" if p == 2 else "indicative",
        nyquist_fraction=nyq,
    )


def project_nodes(op: OperatorSpec, xs, values: np.ndarray, micro: Grid) -> np.ndarray:
    """Apply ``Pi(x_k)`` to ``values[k]`` (shape ``(K, *micro.dims, d)``) for every node ``x_k``."""
    xs = np.atleast_2d(np.asarray(xs, float))
    axes = tuple(range(1, micro.N + 1))
    phase = micro.phase()[None, ..., None]
    spec = np.fft.fftn(values, axes=axes) / micro.size * phase
    P = projector_tables(op, xs, micro)
    P[:, micro.nyquist_mask()] = 0.0
    out = np.einsum("k...ij,k...j->k...i", P, spec)
    vals = np.fft.ifftn(out / phase, axes=axes) * micro.size
    return vals.real


def project_two_scale(op: OperatorSpec, w):
    """Nodewise ``Pi(x_k) w(x_k, .)`` on a two-scale field."""
    macro, micro = w.macro, w.micro
    xs = macro.coords().reshape(-1, macro.N)
    vals = w.values.reshape((-1,) + micro.dims + (w.d,))
    out = project_nodes(op, xs, vals, micro)
    return type(w)(macro, micro, out.reshape(w.values.shape))
