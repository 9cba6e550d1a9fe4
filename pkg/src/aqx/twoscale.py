"""Two-scale fields, the unfolding operator and oscillating sequence generators.

A two-scale field ``w(x, y)`` lives on a macro grid over ``Omega = (0,1)^N``
times a micro grid over ``Q = (-1/2,1/2)^N``; its values have shape
``(*macro.dims, *micro.dims, d)``.  Scales are ``eps = 1/K`` with ``K`` an
integer dividing the macro grid size, so cells ``eps*floor(x/eps) + eps*Q'``
are unions of whole macro cells.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import IncompatibleEpsilon, NotAFreeField
from .operator import OperatorSpec, apply_A_macro, projector_tables
from .spectral import (
    Grid,
    PeriodicField,
    hneg_norm,
    interpolate_batched,
    lp_norm,
    resample,
    trig_interpolate,
)


@dataclass
class TwoScaleField:
    macro: Grid
    micro: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.macro.N != self.micro.N:
            raise ValueError("macro and micro grids must share the spatial dimension")
        expected = self.macro.dims + self.micro.dims
        if self.values.shape[:-1] != expected:
            raise ValueError(f"values of shape {self.values.shape} do not match grids {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("two-scale field values must be finite")

    @classmethod
    def from_function(cls, macro: Grid, micro: Grid, fn) -> TwoScaleField:
        """Sample ``fn(X, Y)`` where ``X``, ``Y`` broadcast to ``(*macro, *micro, N)``."""
        N = macro.N
        X = macro.coords().reshape(macro.dims + (1,) * N + (N,))
        Y = micro.coords().reshape((1,) * N + micro.dims + (N,))
        vals = np.asarray(fn(X, Y), float)
        return cls(macro, micro, np.broadcast_to(vals, macro.dims + micro.dims + vals.shape[-1:]).copy())

    @classmethod
    def from_macro(cls, u: PeriodicField, micro: Grid) -> TwoScaleField:
        N = u.grid.N
        vals = u.values.reshape(u.grid.dims + (1,) * N + (u.d,))
        return cls(u.grid, micro, np.broadcast_to(vals, u.grid.dims + micro.dims + (u.d,)).copy())

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @property
    def N(self) -> int:
        return self.macro.N

    def _micro_axes(self) -> tuple[int, ...]:
        return tuple(range(self.N, 2 * self.N))

    def cell_mean(self) -> PeriodicField:
        """``x -> int_Q w(x, y) dy`` as a macro field."""
        return PeriodicField(self.macro, self.values.mean(axis=self._micro_axes()))

    def fluctuation(self) -> TwoScaleField:
        mean = self.values.mean(axis=self._micro_axes(), keepdims=True)
        return TwoScaleField(self.macro, self.micro, self.values - mean)

    def node(self, idx) -> PeriodicField:
        return PeriodicField(self.micro, self.values[tuple(idx)])

    def node_spectra(self) -> np.ndarray:
        """Micro spectra at every macro node, shape ``(K, *micro.dims, d)``."""
        vals = self.values.reshape((-1,) + self.micro.dims + (self.d,))
        axes = tuple(range(1, self.N + 1))
        return np.fft.fftn(vals, axes=axes) / self.micro.size * self.micro.phase()[None, ..., None]

    def l2_norm(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.values**2, axis=-1))))

    def __add__(self, other: TwoScaleField) -> TwoScaleField:
        return TwoScaleField(self.macro, self.micro, self.values + other.values)

    def __sub__(self, other: TwoScaleField) -> TwoScaleField:
        return TwoScaleField(self.macro, self.micro, self.values - other.values)

    def __mul__(self, scalar: float) -> TwoScaleField:
        return TwoScaleField(self.macro, self.micro, self.values * scalar)

    __rmul__ = __mul__


@dataclass
class SequenceBundle:
    eps_list: list[Fraction]
    fields: list[PeriodicField]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise ValueError("eps_list must be strictly decreasing")


# --- scales -----------------------------------------------------------------

def parse_eps(value) -> Fraction:
    """Accepts ``Fraction``, ``"1/8"``, ``0.125`` or ``8`` (read as ``1/8`` when > 1)."""
    if isinstance(value, str):
        value = Fraction(value.strip())
    if isinstance(value, int) and value > 1:
        return Fraction(1, value)
    eps = Fraction(value).limit_denominator(1 << 20)
    if eps <= 0 or eps.numerator != 1:
        raise IncompatibleEpsilon(f"eps must be 1/k for a positive integer k, got {value}")
    return eps


def cells_per_axis(eps, grid: Grid) -> int:
    eps = parse_eps(eps)
    K = eps.denominator
    for m in grid.dims:
        if m % K:
            raise IncompatibleEpsilon(f"1/eps = {K} does not divide macro grid size {m}")
    return K


def aligned_micro(eps, macro: Grid) -> Grid:
    """Micro grid whose nodes map onto macro nodes under unfolding (smallest valid multiple)."""
    K = cells_per_axis(eps, macro)
    dims = []
    for m in macro.dims:
        per = m // K
        mult = per
        while mult < 4 or mult % 2:
            mult += per
        dims.append(mult)
    return Grid.micro(dims)


# --- unfolding --------------------------------------------------------------

def _unfold_indices(eps, macro: Grid, micro: Grid) -> list[np.ndarray]:
    """Per axis: macro index looked up for (macro node, micro node), shape ``(M_i, m_i)``."""
    K = cells_per_axis(eps, macro)
    out = []
    for i, (M, m) in enumerate(zip(macro.dims, micro.dims)):
        per = M // K
        cell = np.arange(M) // per
        y = micro.axis_coords(i)
        frac = y - np.floor(y)
        # position eps*frac in units of macro spacing; floor gives piecewise-constant lookup
        offset = np.floor(frac * per + 1e-9).astype(int)
        idx = cell[:, None] * per + offset[None, :]
        out.append(idx)
    return out


def unfold(u: PeriodicField, eps, micro: Grid | None = None) -> TwoScaleField:
    """``T_eps u(x, y) = u(eps*floor(x/eps) + eps*(y - floor(y)))`` on the product grid."""
    macro = u.grid
    micro = micro or aligned_micro(eps, macro)
    idx = _unfold_indices(eps, macro, micro)
    N = macro.N
    grids = []
    for i in range(N):
        shape = [1] * (2 * N)
        shape[i] = macro.dims[i]
        shape[N + i] = micro.dims[i]
        grids.append(idx[i].reshape(shape))
    vals = u.values[tuple(grids)]
    return TwoScaleField(macro, micro, vals)


def unfold_at(u, eps, x, y) -> np.ndarray:
    """Pointwise unfolding of a callable ``u`` (or a field, via interpolation), zero outside Omega."""
    eps = float(parse_eps(eps))
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    z = eps * np.floor(x / eps) + eps * (y - np.floor(y))
    if np.any(z < 0) or np.any(z >= 1):
        return np.zeros_like(np.atleast_1d(_call(u, np.zeros_like(z))))
    return _call(u, z)


def _call(u, z):
    if isinstance(u, PeriodicField):
        return trig_interpolate(u, z[None, :])[0]
    return np.asarray(u(*z), float)


def unfold_convergence(u: PeriodicField, eps_list, micro: Grid | None = None) -> list[float]:
    """``||u - T_eps u||`` on the product grid for each scale."""
    out = []
    N = u.grid.N
    for eps in eps_list:
        t = unfold(u, eps, micro)
        base = u.values.reshape(u.grid.dims + (1,) * N + (u.d,))
        diff = t.values - base
        out.append(float(np.sqrt(np.mean(np.sum(diff**2, axis=-1)))))
    return out


# --- generator --------------------------------------------------------------

def _coarse_lookup(out: Grid, src: Grid) -> np.ndarray:
    """Flat index into ``src`` of the cell containing each node of ``out`` (piecewise-constant in x)."""
    idx = []
    for M, m in zip(out.dims, src.dims):
        if M % m:
            raise IncompatibleEpsilon(f"output grid {out.dims} must refine field grid {src.dims}")
        idx.append(np.arange(M) // (M // m))
    mesh = np.meshgrid(*idx, indexing="ij")
    return np.ravel_multi_index(tuple(mesh), src.dims).reshape(-1)


def oscillating_part(op: OperatorSpec, v1: TwoScaleField, eps, out: Grid, chunk: int = 4096) -> np.ndarray:
    """``sum_lam P(x, lam) v1_hat(x, lam) exp(2 pi i lam . x/eps)`` at the nodes of ``out``."""
    eps = float(parse_eps(eps))
    spectra = v1.node_spectra()
    lookup = _coarse_lookup(out, v1.macro)
    xs = out.coords().reshape(-1, out.N)
    micro = v1.micro
    nyq = micro.nyquist_mask()
    if op.is_constant:
        # one projector for every point: project each coarse node once
        P = projector_tables(op, xs[:1], micro)[0]
        P[nyq] = 0.0
        spectra = np.einsum("...ij,k...j->k...i", P, spectra)
    result = np.empty((xs.shape[0], v1.d))
    for start in range(0, xs.shape[0], chunk):
        sl = slice(start, start + chunk)
        if op.is_constant:
            spec = spectra[lookup[sl]]
        else:
            P = projector_tables(op, xs[sl], micro)
            P[:, nyq] = 0.0
            spec = np.einsum("k...ij,k...j->k...i", P, spectra[lookup[sl]])
        y = xs[sl] / eps
        y = y - np.floor(y + 0.5)
        result[sl] = interpolate_batched(spec, micro, y)
    return result.reshape(out.dims + (v1.d,))


def generate_sequence(op: OperatorSpec, v: TwoScaleField, eps_list, out: Grid | None = None,
                      tol: float = 1e-7, check: bool = True) -> SequenceBundle:
    """``u_eps(x) = int_Q v(x, y) dy + Pi(x) v_1(x, x/eps)`` for every scale.

    ``out`` is the macro grid carrying ``u_eps``; it must refine the macro grid
    of ``v``, which is then read piecewise-constant in ``x``.
    """
    from .homogenize import membership_check

    if check:
        report = membership_check(op, v, "F", tol)
        if not report.passed:
            raise NotAFreeField(f"field is not A-free: residuals {report.residuals}")
    out = out or v.macro
    eps_list = [parse_eps(e) for e in eps_list]
    for e in eps_list:
        cells_per_axis(e, out)
    mean = v.cell_mean()
    if out.dims != v.macro.dims:
        mean = resample(mean, out.dims)
    fluct = v.fluctuation()
    fields = []
    for e in eps_list:
        osc = oscillating_part(op, fluct, e, out)
        fields.append(PeriodicField(out, mean.values + osc))
    params = {"operator": op.name, "macro": list(out.dims), "micro": list(v.micro.dims),
              "eps": [str(e) for e in eps_list]}
    return SequenceBundle(eps_list, fields, params)


def macro_residuals(op: OperatorSpec, bundle: SequenceBundle) -> list[float]:
    """``hneg_norm(A u_eps)`` per scale."""
    return [hneg_norm(apply_A_macro(op, u)) for u in bundle.fields]


# --- pairings and the test bank ---------------------------------------------

def real_modes(N: int, radius: float = 2.0) -> list[tuple[str, tuple[int, ...]]]:
    """Real Fourier modes ``cos/sin(2 pi lam . z)`` with ``|lam| <= radius``, one per +-lam pair."""
    R = int(np.floor(radius))
    out = [("cos", (0,) * N)]
    for lam in itertools.product(range(-R, R + 1), repeat=N):
        if not any(lam) or sum(l * l for l in lam) > radius**2:
            continue
        first = next(l for l in lam if l != 0)
        if first < 0:
            continue
        out.append(("cos", lam))
        out.append(("sin", lam))
    return out


def eval_mode(mode, z: np.ndarray) -> np.ndarray:
    kind, lam = mode
    arg = 2 * np.pi * (z @ np.asarray(lam, float))
    return np.cos(arg) if kind == "cos" else np.sin(arg)


@dataclass(frozen=True)
class SeparableTest:
    """``phi(x, y) = X(x) Y(y) e_c``."""

    x_mode: tuple
    y_mode: tuple
    component: int


def default_test_bank(N: int, d: int, radius: float = 2.0) -> list[SeparableTest]:
    modes = real_modes(N, radius)
    return [SeparableTest(mx, my, c) for mx in modes for my in modes for c in range(d)]


def twoscale_pairing(u_eps: PeriodicField, phi: TwoScaleField, eps) -> float:
    """``int_Omega u_eps(x) . phi(x, x/eps) dx`` with ``phi`` interpolated in ``y``."""
    if phi.macro.dims != u_eps.grid.dims:
        raise ValueError("test field must share the macro grid of the sequence")
    e = float(parse_eps(eps))
    xs = u_eps.grid.coords().reshape(-1, u_eps.grid.N)
    y = xs / e
    y = y - np.floor(y + 0.5)
    vals = interpolate_batched(phi.node_spectra(), phi.micro, y)
    return float(np.mean(np.sum(u_eps.values.reshape(-1, u_eps.d) * vals, axis=-1)))


def _separable_pairings(u_eps: PeriodicField, eps, bank) -> np.ndarray:
    xs = u_eps.grid.coords().reshape(-1, u_eps.grid.N)
    e = float(parse_eps(eps))
    y = xs / e
    y = y - np.floor(y + 0.5)
    vals = u_eps.values.reshape(-1, u_eps.d)
    cache_x, cache_y = {}, {}
    out = np.empty(len(bank))
    for k, t in enumerate(bank):
        if t.x_mode not in cache_x:
            cache_x[t.x_mode] = eval_mode(t.x_mode, xs)
        if t.y_mode not in cache_y:
            cache_y[t.y_mode] = eval_mode(t.y_mode, y)
        out[k] = np.mean(vals[:, t.component] * cache_x[t.x_mode] * cache_y[t.y_mode])
    return out


def _separable_targets(v: TwoScaleField, bank) -> np.ndarray:
    """``int int v . phi`` with the y-integral done after band-limited refinement (alias-free)."""
    radius = max(max(abs(l) for l in t.y_mode[1]) for t in bank)
    fine_dims = tuple(max(m, 2 * (m // 2 + radius) + 2) for m in v.micro.dims)
    fine_dims = tuple(m + (m % 2) for m in fine_dims)
    if fine_dims != v.micro.dims:
        flat = v.values.reshape((-1,) + v.micro.dims + (v.d,))
        fine = np.stack([resample(PeriodicField(v.micro, f), fine_dims).values for f in flat])
        micro = v.micro.with_dims(fine_dims)
    else:
        fine = v.values.reshape((-1,) + v.micro.dims + (v.d,))
        micro = v.micro
    ys = micro.coords().reshape(-1, micro.N)
    xs = v.macro.coords().reshape(-1, v.macro.N)
    fine = fine.reshape(fine.shape[0], -1, v.d)
    out = np.empty(len(bank))
    inner = {}
    for k, t in enumerate(bank):
        key = (t.y_mode, t.component)
        if key not in inner:
            inner[key] = np.mean(fine[:, :, t.component] * eval_mode(t.y_mode, ys)[None, :], axis=1)
        out[k] = np.mean(inner[key] * eval_mode(t.x_mode, xs))
    return out


@dataclass
class ResidualReport:
    eps: list[str]
    pairing_gap: list[float]
    strong_gap: list[float]

    def as_dict(self) -> dict:
        return {"eps": self.eps, "pairing_gap": self.pairing_gap, "strong_gap": self.strong_gap}


def strong_gap(u_eps: PeriodicField, v: TwoScaleField, eps) -> float:
    """``||T_eps u_eps - v||`` on the product grid of ``v`` (``u_eps`` must live on ``v.macro``)."""
    if u_eps.grid.dims != v.macro.dims:
        raise ValueError("sequence and limit must share the macro grid")
    t = unfold(u_eps, eps, v.micro)
    return (t - v).l2_norm()


def twoscale_residual(bundle: SequenceBundle, v: TwoScaleField, test_bank=None) -> ResidualReport:
    bank = test_bank if test_bank is not None else default_test_bank(v.N, v.d)
    targets = _separable_targets(v, bank)
    gaps, strong = [], []
    for e, u in zip(bundle.eps_list, bundle.fields):
        gaps.append(float(np.max(np.abs(_separable_pairings(u, e, bank) - targets))))
        strong.append(strong_gap(u, v, e) if u.grid.dims == v.macro.dims else float("nan"))
    return ResidualReport([str(e) for e in bundle.eps_list], gaps, strong)


def unfold_isometry_gap(u: PeriodicField, eps) -> float:
    """Relative difference of ``L^2`` norms of ``u`` and ``T_eps u``."""
    t = unfold(u, eps)
    nu = lp_norm(u, 2)
    return abs(t.l2_norm() - nu) / max(nu, 1e-300)
