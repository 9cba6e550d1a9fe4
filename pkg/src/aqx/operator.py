"""First-order operators with variable coefficients and their symbols.

An operator is ``A u = sum_i A^i(x) du/dx_i`` with ``A^i(x)`` real ``l x d``
matrices given by expressions in ``x1..xN``.  Its symbol at a frequency
``lam`` is ``A(x, lam) = sum_i A^i(x) lam_i``.  From a singular value
decomposition of the symbol at the unit direction ``lam/|lam|`` we build
the orthogonal projector ``P(x, lam)`` onto its kernel and the pseudo-inverse
``Q(x, lam)`` with ``Q A = I - P``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import ConfigError, ConstantRankViolation, RankDeficiencyDrift, ZeroFrequency
from .expr import Expr, evaluate, max_index, parse, to_string
from .spectral import TWO_PI, Grid, PeriodicField, hneg_norm_spectrum, inverse_transform

log = logging.getLogger(__name__)

RANK_RTOL = 1e-8


@dataclass(frozen=True)
class OperatorSpec:
    """Coefficient matrices ``coeffs[i][row][col]`` as expression strings.

    ``coeffs`` has shape ``(N, l, d)``.  The declaration is immutable and hashable
    so that projector tables can be cached per ``(op, x, grid)``.
    """

    N: int
    d: int
    l: int
    coeffs: tuple[tuple[tuple[str, ...], ...], ...]
    name: str = "custom"
    declared_rank: int | None = None

    def __post_init__(self):
        coeffs = tuple(tuple(tuple(str(c) for c in row) for row in mat) for mat in self.coeffs)
        object.__setattr__(self, "coeffs", coeffs)
        if len(coeffs) != self.N:
            raise ConfigError(f"operator {self.name}: expected {self.N} coefficient matrices, got {len(coeffs)}")
        for i, mat in enumerate(coeffs):
            if len(mat) != self.l or any(len(row) != self.d for row in mat):
                raise ConfigError(f"operator {self.name}: A^{i + 1} must have shape {self.l}x{self.d}")
        for e in self._exprs:
            if max_index(e, "y") or max_index(e, "xi"):
                raise ConfigError(f"operator {self.name}: coefficients may depend on x only, got {to_string(e)}")
            if max_index(e, "x") > self.N:
                raise ConfigError(f"operator {self.name}: coefficient {to_string(e)} exceeds N={self.N}")

    @cached_property
    def _exprs(self) -> list[Expr]:
        return [parse(c) for mat in self.coeffs for row in mat for c in row]

    @cached_property
    def is_constant(self) -> bool:
        return all(max_index(e, "x") == 0 for e in self._exprs)

    def coefficients(self, x) -> np.ndarray:
        """``A^i(x)`` stacked as ``(..., N, l, d)`` for points ``x`` of shape ``(..., N)``."""
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        env = {f"x{i + 1}": x[..., i] for i in range(self.N)}
        vals = [np.broadcast_to(np.asarray(evaluate(e, env), float), batch) for e in self._exprs]
        return np.stack(vals, axis=-1).reshape(batch + (self.N, self.l, self.d))

    @cached_property
    def _probes(self) -> np.ndarray:
        axes = np.meshgrid(*([np.arange(8) / 8.0] * self.N), indexing="ij")
        return np.stack(axes, -1).reshape(-1, self.N)

    @cached_property
    def reference_scale(self) -> float:
        """Largest coefficient norm ``sqrt(sum |A^i|_F^2)`` over a fixed probe grid, the absolute rank scale."""
        A = self.coefficients(self._probes)
        return float(np.sqrt(np.sum(A**2, axis=(1, 2, 3))).max())

    @cached_property
    def reference_rank(self) -> int:
        """Generic symbol rank: the largest rank over the probe grid and short lattice directions."""
        dirs = lattice_directions(self.N, 2)
        r = max(int(symbol_ranks(self, x, dirs).max()) for x in self._probes)
        if self.declared_rank is not None and self.declared_rank != r:
            log.warning("operator %s: declared rank %d, computed rank %d", self.name, self.declared_rank, r)
        return r

    def check_periodic(self, samples: int = 8, seed: int = 0) -> float:
        """Largest coefficient jump under unit shifts; logged when above 1e-12."""
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, (samples, self.N))
        base = self.coefficients(x)
        worst = 0.0
        for j in range(self.N):
            shifted = x.copy()
            shifted[:, j] += 1.0
            worst = max(worst, float(np.abs(self.coefficients(shifted) - base).max()))
        if worst > 1e-12:
            log.warning("operator %s: coefficients not periodic (jump %.3e)", self.name, worst)
        return worst

    def frozen_at(self, x0) -> OperatorSpec:
        """Constant-coefficient operator ``A(x0)``."""
        A = self.coefficients(np.asarray(x0, float))
        coeffs = tuple(tuple(tuple(repr(float(v)) for v in row) for row in mat) for mat in A)
        return OperatorSpec(self.N, self.d, self.l, coeffs, f"{self.name}@{tuple(map(float, x0))}",
                            self.declared_rank)

    def describe(self) -> dict:
        return {"name": self.name, "N": self.N, "d": self.d, "l": self.l,
                "coeffs": [[list(row) for row in mat] for mat in self.coeffs]}


# --- builders ---------------------------------------------------------------

def divergence_perturbed(a: str = "1") -> OperatorSpec:
    """``A u = a(x) du_1/dx_1 + du_2/dx_2`` on R^2 (d=2, l=1)."""
    return OperatorSpec(2, 2, 1, (((a, "0"),), (("0", "1"),)), "divergence_perturbed", 1)


def curl_perturbed(a1: str = "1") -> OperatorSpec:
    """Perturbed curl on R^2: ``A^i_{(j,k),q} = a_i (d_ij d_qk - d_ik d_qj)``, ``a_2 = 1`` (d=2, l=4).

    The kernel of the symbol at ``lam`` is spanned by ``(a1 lam_1, lam_2)``.
    """
    a = (a1, "1")
    mats = []
    for i in range(2):
        rows = []
        for j in range(2):
            for k in range(2):
                row = []
                for q in range(2):
                    coef = int(i == j and q == k) - int(i == k and q == j)
                    row.append("0" if coef == 0 else (a[i] if coef > 0 else f"-({a[i]})"))
                rows.append(tuple(row))
        mats.append(tuple(rows))
    return OperatorSpec(2, 2, 4, tuple(mats), "curl_perturbed")


def scaled_constant(m: str, A_c) -> OperatorSpec:
    """``A^i(x) = m(x) A_c^i``, a scalar multiple of the identity acting on constant coefficients."""
    A_c = np.asarray(A_c, float)
    N, l, d = A_c.shape
    mats = tuple(
        tuple(tuple("0" if v == 0 else f"({m})*{float(v)!r}" for v in row) for row in mat) for mat in A_c
    )
    return OperatorSpec(N, d, l, mats, "scaled_constant")


def custom(N: int, d: int, l: int, coeffs, declared_rank: int | None = None) -> OperatorSpec:
    return OperatorSpec(N, d, l, coeffs, "custom", declared_rank)


# --- symbol and pointwise projectors ---------------------------------------

def symbol(op: OperatorSpec, x, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if not np.any(lam):
        raise ZeroFrequency("symbol undefined at lambda = 0")
    A = op.coefficients(np.asarray(x, float))
    return np.einsum("i,ild->ld", lam, A)


def _symbol_batch(A: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """``A`` of shape ``(N, l, d)``, ``dirs`` of shape ``(K, N)`` -> ``(K, l, d)``."""
    return np.einsum("ki,ild->kld", dirs, A)


def _ranks(s: np.ndarray, scale: float) -> np.ndarray:
    if scale == 0.0:
        return np.zeros(s.shape[0], dtype=int)
    return np.sum(s > RANK_RTOL * scale, axis=-1)


def symbol_ranks(op: OperatorSpec, x, dirs) -> np.ndarray:
    A = op.coefficients(np.asarray(x, float))
    dirs = np.asarray(dirs, float)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    s = np.linalg.svd(_symbol_batch(A, dirs), compute_uv=False)
    return _ranks(s, op.reference_scale)


def decompose_batch(op: OperatorSpec, xs, lam: np.ndarray, chunk: int = 1 << 16):
    """``P``, ``Q`` and retained singular values for points ``xs`` (K, N) and frequencies ``lam`` (L, N).

    Returns arrays of shape ``(K, L, d, d)``, ``(K, L, d, l)`` and ``(K, L, r)``.
    """
    xs = np.atleast_2d(np.asarray(xs, float))
    lam = np.atleast_2d(np.asarray(lam, float))
    A = op.coefficients(xs)  # (K, N, l, d)
    scale = np.full(xs.shape[0], op.reference_scale)
    norms = np.linalg.norm(lam, axis=-1)
    dirs = lam / norms[:, None]
    r = op.reference_rank
    K, L = xs.shape[0], lam.shape[0]
    P = np.empty((K, L, op.d, op.d))
    Q = np.empty((K, L, op.d, op.l))
    S = np.empty((K, L, r))
    per = max(1, chunk // L)
    for k0 in range(0, K, per):
        sl = slice(k0, min(K, k0 + per))
        sym = np.einsum("li,kiad->klad", dirs, A[sl])
        U, s, Vh = np.linalg.svd(sym, full_matrices=True)
        sc = scale[sl][:, None, None]
        ranks = np.where(sc[..., 0] == 0.0, 0, np.sum(s > RANK_RTOL * sc, axis=-1))
        bad = np.argwhere(ranks != r)
        if bad.size:
            kk, ll = bad[0]
            raise RankDeficiencyDrift(xs[k0 + kk], lam[ll], int(ranks[kk, ll]), r)
        V = np.swapaxes(Vh, -1, -2)
        Vn = V[..., r:]
        P[sl] = Vn @ np.swapaxes(Vn, -1, -2)
        Q[sl] = (V[..., :r] / s[..., None, :r]) @ np.swapaxes(U[..., :r], -1, -2) / norms[None, :, None, None]
        S[sl] = s[..., :r]
    return P, Q, S


def _decompose(op: OperatorSpec, x, lam: np.ndarray):
    P, Q, S = decompose_batch(op, np.asarray(x, float)[None, :], lam)
    return P[0], Q[0], S[0]


def kernel_projector(op: OperatorSpec, x, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if not np.any(lam):
        raise ZeroFrequency("projector undefined at lambda = 0")
    return _decompose(op, x, lam[None, :])[0][0]


def pseudo_q(op: OperatorSpec, x, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if not np.any(lam):
        raise ZeroFrequency("pseudo-inverse undefined at lambda = 0")
    return _decompose(op, x, lam[None, :])[1][0]


def lattice_directions(N: int, radius: int = 4) -> np.ndarray:
    """Distinct unit directions of nonzero integer vectors with entries in ``[-radius, radius]``."""
    axes = np.meshgrid(*([np.arange(-radius, radius + 1)] * N), indexing="ij")
    pts = np.stack(axes, -1).reshape(-1, N)
    pts = pts[np.any(pts != 0, axis=1)]
    dirs = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return np.unique(np.round(dirs, 12), axis=0)


def direction_samples(N: int, count: int, seed: int = 0) -> np.ndarray:
    """Normalized lattice directions plus random directions on the unit sphere, ``count`` total."""
    lat = lattice_directions(N, 2)
    rng = np.random.default_rng(seed)
    if count <= len(lat):
        return lat[:count]
    extra = rng.standard_normal((count - len(lat), N))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.concatenate([lat, extra])


def probe_points(N: int, count: int = 32, seed: int = 0, per_axis: int = 8) -> np.ndarray:
    """Dyadic grid ``k / per_axis`` on ``[0, 1)^N`` followed by ``count`` uniform random points.

    The grid catches coefficients that vanish at simple rational points,
    which random sampling alone almost surely misses.
    """
    axis = np.arange(per_axis) / per_axis
    grid = np.stack(np.meshgrid(*([axis] * N), indexing="ij"), -1).reshape(-1, N)
    rng = np.random.default_rng(seed)
    return np.concatenate([grid, rng.uniform(0.0, 1.0, (count, N))])


def check_constant_rank(op: OperatorSpec, x_samples, lam_samples) -> int:
    """Generic (largest) rank over all samples; raises at the first sample where the rank drops."""
    x_samples = np.atleast_2d(np.asarray(x_samples, float))
    lam_samples = np.atleast_2d(np.asarray(lam_samples, float))
    if not len(x_samples) or not len(lam_samples):
        raise ValueError("sample sets must be nonempty")
    ranks = np.stack([symbol_ranks(op, x, lam_samples) for x in x_samples])
    ref = int(ranks.max())
    bad = np.argwhere(ranks != ref)
    if bad.size:
        i, k = bad[0]
        raise ConstantRankViolation(x_samples[i], lam_samples[k], int(ranks[i, k]), ref)
    if op.declared_rank is not None and op.declared_rank != ref:
        log.warning("operator %s: declared rank %d, computed rank %d", op.name, op.declared_rank, ref)
    return ref


# --- projector tables on grids ----------------------------------------------

@dataclass(frozen=True)
class PointProjector:
    """``P(x, lam)`` and ``Q(x, lam)`` on every lattice frequency of a grid (zero at ``lam = 0``)."""

    x: tuple[float, ...]
    grid: Grid
    P: np.ndarray  # (*dims, d, d)
    Q: np.ndarray  # (*dims, d, l)
    sigma_min: np.ndarray  # (*dims,) smallest nonzero singular value at the unit direction
    rank: int


@lru_cache(maxsize=256)
def projector_table(op: OperatorSpec, x: tuple[float, ...], grid: Grid) -> PointProjector:
    lat = grid.lattice().reshape(-1, grid.N).astype(float)
    nz = np.any(lat != 0, axis=1)
    P = np.zeros((lat.shape[0], op.d, op.d))
    Q = np.zeros((lat.shape[0], op.d, op.l))
    smin = np.full(lat.shape[0], np.inf)
    if nz.any():
        Pn, Qn, s = _decompose(op, np.asarray(x, float), lat[nz])
        P[nz] = Pn
        Q[nz] = Qn
        if s.shape[1]:
            smin[nz] = s[:, -1]
    for arr in (P, Q, smin):
        arr.setflags(write=False)
    dims = grid.dims
    return PointProjector(tuple(x), grid, P.reshape(dims + (op.d, op.d)), Q.reshape(dims + (op.d, op.l)),
                          smin.reshape(dims), op.reference_rank)


def projector_tables(op: OperatorSpec, xs, grid: Grid) -> np.ndarray:
    """Stacked ``P`` tables for many macro points, shape ``(K, *dims, d, d)``; zero at ``lam = 0``."""
    xs = np.atleast_2d(np.asarray(xs, float))
    lat = grid.lattice().reshape(-1, grid.N).astype(float)
    nz = np.any(lat != 0, axis=1)
    out = np.zeros((xs.shape[0], lat.shape[0], op.d, op.d))
    if op.is_constant:
        out[:, nz] = decompose_batch(op, xs[:1], lat[nz])[0]
    else:
        out[:, nz] = decompose_batch(op, xs, lat[nz])[0]
    return out.reshape((xs.shape[0],) + grid.dims + (op.d, op.d))


def _key(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(x, float)))


# --- differential operators on fields ---------------------------------------

def symbol_table(op: OperatorSpec, x, grid: Grid) -> np.ndarray:
    """``A(x, lam)`` on every lattice point, shape ``(*dims, l, d)``."""
    A = op.coefficients(np.asarray(x, float))
    return np.einsum("...i,ild->...ld", grid.lattice().astype(float), A)


def ay_spectrum(op: OperatorSpec, x, w: PeriodicField, keep_nyquist: bool = True) -> np.ndarray:
    spec = 2j * np.pi * np.einsum("...ld,...d->...l", symbol_table(op, x, w.grid), w.spectrum)
    if not keep_nyquist:
        spec[w.grid.nyquist_mask()] = 0.0
    return spec


def apply_Ay(op: OperatorSpec, x, w: PeriodicField) -> PeriodicField:
    """``sum_i A^i(x) dw/dy_i`` by spectral differentiation (Nyquist modes dropped to keep it real)."""
    return inverse_transform(ay_spectrum(op, x, w, keep_nyquist=False), w.grid)


def ay_residual_norm(op: OperatorSpec, x, w: PeriodicField) -> float:
    """H^-1 proxy norm of ``A_y(x) w`` over all modes, Nyquist included."""
    return hneg_norm_spectrum(ay_spectrum(op, x, w), w.grid)


def spectral_gradient(u: PeriodicField) -> np.ndarray:
    """``du/dx_i`` for each axis, shape ``(*dims, N, d)``; Nyquist modes dropped."""
    grid = u.grid
    lat = grid.lattice().astype(float)
    nyq = grid.nyquist_mask()
    raw = np.fft.fftn(u.values, axes=tuple(range(grid.N)))
    out = []
    for i in range(grid.N):
        mult = 2j * np.pi * lat[..., i]
        mult[nyq] = 0.0
        out.append(np.fft.ifftn(raw * mult[..., None], axes=tuple(range(grid.N))).real)
    return np.stack(out, axis=-2)


def apply_A_macro(op: OperatorSpec, u: PeriodicField) -> PeriodicField:
    """``sum_i A^i(x) du/dx_i`` with pointwise coefficients and spectral derivatives."""
    grad = spectral_gradient(u)
    A = op.coefficients(u.grid.coords())
    return PeriodicField(u.grid, np.einsum("...ild,...id->...l", A, grad))
