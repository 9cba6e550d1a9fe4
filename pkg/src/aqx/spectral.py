"""Periodic grids on the unit cube, discrete Fourier transforms and norms.

Two kinds of grids share this machinery.  Micro grids discretize the cell
``Q = (-1/2, 1/2)^N`` (``origin=-0.5``); macro grids discretize the periodic
unit cube ``Omega = (0, 1)^N`` (``origin=0.0``).  Node ``k`` along an axis of
size ``M`` sits at ``origin + k/M``.

Field values are stored as ``(*dims, d)`` arrays: node-major, last spatial
axis fastest, component index fastest within a node.  Spectra use the same
layout with the numpy FFT frequency ordering, so the lattice index along an
axis runs over ``[0, 1, ..., M/2-1, -M/2, ..., -1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import FieldFormatError, NonSymmetricSpectrum

TWO_PI = 2.0 * np.pi

AQXF_MAGIC = b"AQXF"
AQXF_VERSION = 1


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``dims[i]`` nodes along axis ``i``."""

    dims: tuple[int, ...]
    origin: float = -0.5

    def __post_init__(self):
        dims = tuple(int(m) for m in self.dims)
        object.__setattr__(self, "dims", dims)
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {len(dims)}")
        for m in dims:
            if m < 4 or m % 2:
                raise ValueError(f"grid sizes must be even and >= 4, got {dims}")

    @classmethod
    def micro(cls, dims) -> Grid:
        return cls(tuple(dims), -0.5)

    @classmethod
    def macro(cls, dims) -> Grid:
        return cls(tuple(dims), 0.0)

    @property
    def N(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def with_dims(self, dims) -> Grid:
        return Grid(tuple(dims), self.origin)

    def axis_coords(self, i: int) -> np.ndarray:
        m = self.dims[i]
        return self.origin + np.arange(m) / m

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(*dims, N)``."""
        axes = np.meshgrid(*(self.axis_coords(i) for i in range(self.N)), indexing="ij")
        return np.stack(axes, axis=-1)

    def frequencies(self, i: int) -> np.ndarray:
        m = self.dims[i]
        return np.rint(np.fft.fftfreq(m, 1.0 / m)).astype(int)

    def lattice(self) -> np.ndarray:
        """Integer frequency vectors in FFT order, shape ``(*dims, N)``."""
        axes = np.meshgrid(*(self.frequencies(i) for i in range(self.N)), indexing="ij")
        return np.stack(axes, axis=-1)

    def nyquist_mask(self) -> np.ndarray:
        lat = self.lattice()
        half = -np.asarray(self.dims) // 2
        return np.any(lat == half, axis=-1)

    def phase(self) -> np.ndarray:
        """``exp(-2 pi i origin . lambda)`` on the lattice."""
        lat = self.lattice().sum(axis=-1)
        if self.origin == -0.5:
            return np.where(lat % 2 == 0, 1.0, -1.0)
        if self.origin == 0.0:
            return np.ones(self.dims)
        return np.exp(-1j * TWO_PI * self.origin * lat)


class PeriodicField:
    """A ``d``-component real field sampled on a :class:`Grid`."""

    def __init__(self, grid: Grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape == grid.dims:
            values = values[..., None]
        if values.shape[:-1] != grid.dims:
            raise ValueError(f"values of shape {values.shape} do not match grid {grid.dims}")
        self.grid = grid
        self.values = values

    @classmethod
    def from_function(cls, grid: Grid, fn) -> PeriodicField:
        """Sample ``fn(*coords)``; ``fn`` returns an array or a list of component arrays."""
        c = grid.coords()
        out = fn(*(c[..., i] for i in range(grid.N)))
        if isinstance(out, (list, tuple)):
            out = np.stack([np.broadcast_to(np.asarray(o, float), grid.dims) for o in out], axis=-1)
        else:
            out = np.broadcast_to(np.asarray(out, float), grid.dims)
        return cls(grid, out)

    @classmethod
    def zeros(cls, grid: Grid, d: int) -> PeriodicField:
        return cls(grid, np.zeros(grid.dims + (d,)))

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @cached_property
    def spectrum(self) -> np.ndarray:
        return forward_transform(self)

    def mean(self) -> np.ndarray:
        return self.values.reshape(-1, self.d).mean(axis=0)

    def __add__(self, other: PeriodicField) -> PeriodicField:
        return PeriodicField(self.grid, self.values + other.values)

    def __sub__(self, other: PeriodicField) -> PeriodicField:
        return PeriodicField(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> PeriodicField:
        return PeriodicField(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"PeriodicField(dims={self.grid.dims}, d={self.d}, origin={self.grid.origin})"


def _spatial_axes(grid: Grid) -> tuple[int, ...]:
    return tuple(range(grid.N))


def forward_transform(field: PeriodicField) -> np.ndarray:
    """Fourier coefficients ``w_hat(lambda)`` normalized so ``w_hat(0)`` is the mean."""
    grid = field.grid
    spec = np.fft.fftn(field.values, axes=_spatial_axes(grid)) / grid.size
    return spec * grid.phase()[..., None]


def inverse_transform(spectrum: np.ndarray, grid: Grid) -> PeriodicField:
    spectrum = np.asarray(spectrum)
    if spectrum.ndim == grid.N:
        spectrum = spectrum[..., None]
    raw = spectrum / grid.phase()[..., None]
    vals = np.fft.ifftn(raw, axes=_spatial_axes(grid)) * grid.size
    scale = np.linalg.norm(vals)
    if np.linalg.norm(vals.imag) > 1e-9 * scale + 1e-12 * np.sqrt(vals.size):
        raise NonSymmetricSpectrum(
            f"reconstruction has imaginary part {np.linalg.norm(vals.imag):.3e} "
            f"(field norm {scale:.3e})"
        )
    return PeriodicField(grid, vals.real)


def lp_norm(field: PeriodicField, p: float = 2.0) -> float:
    """Midpoint-rule ``L^p(Q)`` norm of the pointwise Euclidean magnitude."""
    if not np.isfinite(p) or p < 1:
        raise ValueError(f"exponent must be finite and >= 1, got {p}")
    mag = np.sqrt(np.sum(field.values**2, axis=-1))
    return float(np.mean(mag**p) ** (1.0 / p))


def hneg_weights(grid: Grid) -> np.ndarray:
    lat = grid.lattice()
    return 1.0 / (1.0 + TWO_PI**2 * np.sum(lat**2, axis=-1))


def hneg_norm_spectrum(spectrum: np.ndarray, grid: Grid) -> float:
    power = np.sum(np.abs(spectrum) ** 2, axis=-1)
    return float(np.sqrt(np.sum(power * hneg_weights(grid))))


def hneg_norm(field: PeriodicField) -> float:
    """Periodic ``H^{-1}`` multiplier norm, the proxy for all ``W^{-1,p}`` norms."""
    return hneg_norm_spectrum(field.spectrum, field.grid)


def remove_mean(field: PeriodicField) -> PeriodicField:
    return PeriodicField(field.grid, field.values - field.mean())


def l2_inner(a: PeriodicField, b: PeriodicField) -> float:
    return float(np.mean(np.sum(a.values * b.values, axis=-1)))


def _interp_basis(grid: Grid, i: int, y: np.ndarray) -> np.ndarray:
    """Per-axis exponentials at points ``y``; the Nyquist column becomes a cosine."""
    m = grid.dims[i]
    freqs = grid.frequencies(i)
    basis = np.exp(1j * TWO_PI * np.outer(y, freqs))
    basis[:, m // 2] = np.cos(np.pi * m * y)
    return basis


def trig_interpolate(field: PeriodicField, points) -> np.ndarray:
    """Evaluate the real trigonometric interpolant of ``field`` at ``points``.

    ``points`` has shape ``(P, N)``; the result has shape ``(P, d)``.  The
    Nyquist coefficient is split evenly between ``+-M/2`` so the interpolant
    is real at every point, not only at nodes.
    """
    return trig_interpolate_spectrum(field.spectrum, field.grid, points)


def trig_interpolate_spectrum(spectrum: np.ndarray, grid: Grid, points, chunk: int = 4096) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty((points.shape[0], spectrum.shape[-1]))
    for start in range(0, points.shape[0], chunk):
        pts = points[start:start + chunk]
        acc = spectrum
        # contract the last spatial axis first, keeping the point axis in front
        acc = np.einsum("...jc,pj->p...c", acc, _interp_basis(grid, grid.N - 1, pts[:, -1]))
        for i in range(grid.N - 2, -1, -1):
            acc = np.einsum("p...jc,pj->p...c", acc, _interp_basis(grid, i, pts[:, i]))
        out[start:start + chunk] = acc.real
    return out


def interpolate_batched(spectra: np.ndarray, grid: Grid, points) -> np.ndarray:
    """Evaluate ``K`` interpolants at one point each.

    ``spectra`` has shape ``(K, *grid.dims, d)`` and ``points`` shape ``(K, N)``;
    row ``k`` of the result is the interpolant of ``spectra[k]`` at ``points[k]``.
    """
    points = np.asarray(points, dtype=float)
    acc = spectra
    for i in range(grid.N - 1, -1, -1):
        basis = _interp_basis(grid, i, points[:, i])
        basis = basis.reshape((basis.shape[0],) + (1,) * i + (basis.shape[1], 1))
        acc = np.matmul(np.swapaxes(acc, -1, -2), basis)[..., 0]
    return acc.real


def resample(field: PeriodicField, dims) -> PeriodicField:
    """Band-limited (Fourier zero-padding) embedding onto a finer grid."""
    dims = tuple(dims)
    grid = field.grid
    if any(new < old for new, old in zip(dims, grid.dims)):
        raise ValueError(f"resample only refines: {grid.dims} -> {dims}")
    spec = field.spectrum
    for i, (old, new) in enumerate(zip(grid.dims, dims)):
        if new == old:
            continue
        shape = list(spec.shape)
        shape[i] = new
        out = np.zeros(shape, dtype=complex)
        half = old // 2
        src_pos = [slice(None)] * spec.ndim
        dst_pos = [slice(None)] * spec.ndim
        src_pos[i] = slice(0, half)
        dst_pos[i] = slice(0, half)
        out[tuple(dst_pos)] = spec[tuple(src_pos)]
        src_pos[i] = slice(half + 1, old)
        dst_pos[i] = slice(new - half + 1, new)
        out[tuple(dst_pos)] = spec[tuple(src_pos)]
        src_pos[i] = slice(half, half + 1)
        nyq = spec[tuple(src_pos)] / 2.0
        dst_pos[i] = slice(half, half + 1)
        out[tuple(dst_pos)] = nyq
        dst_pos[i] = slice(new - half, new - half + 1)
        out[tuple(dst_pos)] = nyq
        spec = out
    return inverse_transform(spec, grid.with_dims(dims))


def write_aqxf(path, values: np.ndarray) -> None:
    """Write an array of shape ``(*dims, d)`` in the AQXF v1 binary format (any number of axes)."""
    values = np.asarray(values, dtype=float)
    dims = values.shape[:-1]
    header = AQXF_MAGIC + struct.pack(f"<{3 + len(dims)}I", AQXF_VERSION, len(dims), values.shape[-1], *dims)
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_aqxf(path) -> np.ndarray:
    """Inverse of :func:`write_aqxf`; returns an array of shape ``(*dims, d)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != AQXF_MAGIC:
        raise FieldFormatError(f"{path}: not an AQXF file")
    if len(raw) < 16:
        raise FieldFormatError(f"{path}: truncated header")
    version, n, d = struct.unpack_from("<3I", raw, 4)
    if version != AQXF_VERSION:
        raise FieldFormatError(f"{path}: unsupported AQXF version {version}")
    offset = 16 + 4 * n
    if len(raw) < offset:
        raise FieldFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{n}I", raw, 16)
    count = int(np.prod(dims)) * d
    if offset + 8 * count != len(raw):
        raise FieldFormatError(f"{path}: payload size does not match header")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return values.reshape(tuple(dims) + (d,)).astype(float)


def write_field(path, field: PeriodicField) -> None:
    """Write ``field`` in the AQXF v1 binary format."""
    write_aqxf(path, field.values)


def read_field(path, origin: float = -0.5) -> PeriodicField:
    values = read_aqxf(path)
    dims = values.shape[:-1]
    if not 1 <= len(dims) <= 3:
        raise FieldFormatError(f"{path}: a periodic field needs 1 to 3 axes, found {len(dims)}")
    return PeriodicField(Grid(tuple(dims), origin), values)
