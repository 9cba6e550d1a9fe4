import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqx.errors import FieldFormatError, NonSymmetricSpectrum
from aqx.spectral import (
    Grid,
    PeriodicField,
    forward_transform,
    hneg_norm,
    inverse_transform,
    lp_norm,
    read_aqxf,
    read_field,
    remove_mean,
    resample,
    trig_interpolate,
    write_aqxf,
    write_field,
)


def freq_index(grid, lam):
    return tuple(int(l) % m for l, m in zip(lam, grid.dims))


def random_field(seed, dims=(8, 6), d=2, origin=-0.5):
    rng = np.random.default_rng(seed)
    grid = Grid(dims, origin)
    return PeriodicField(grid, rng.standard_normal(grid.dims + (d,)))


class TestGrid:
    def test_rejects_odd_and_small(self):
        with pytest.raises(ValueError):
            Grid((7,))
        with pytest.raises(ValueError):
            Grid((2, 8))
        with pytest.raises(ValueError):
            Grid((4, 4, 4, 4))

    def test_lattice_half_open(self):
        g = Grid((8,))
        freqs = sorted(g.frequencies(0))
        assert freqs == list(range(-4, 4))

    def test_nodes(self):
        g = Grid.micro((4,))
        assert np.allclose(g.axis_coords(0), [-0.5, -0.25, 0.0, 0.25])
        assert np.allclose(Grid.macro((4,)).axis_coords(0), [0, 0.25, 0.5, 0.75])


class TestForwardTransform:
    def test_constant(self):
        g = Grid((8, 8))
        spec = forward_transform(PeriodicField(g, np.full(g.dims, 3.5)))
        assert spec[0, 0, 0] == pytest.approx(3.5)
        spec[0, 0, 0] = 0
        assert np.abs(spec).max() < 1e-14

    @pytest.mark.parametrize("origin", [-0.5, 0.0])
    def test_cosine(self, origin):
        g = Grid((8,), origin)
        spec = PeriodicField.from_function(g, lambda y: np.cos(2 * np.pi * y)).spectrum[:, 0]
        expected = np.zeros(8, complex)
        expected[1] = expected[-1] = 0.5
        assert np.allclose(spec, expected, atol=1e-14)

    def test_sine(self):
        g = Grid((16,))
        spec = PeriodicField.from_function(g, lambda y: np.sin(2 * np.pi * y)).spectrum[:, 0]
        assert spec[1] == pytest.approx(-0.5j)
        assert spec[-1] == pytest.approx(0.5j)

    def test_mean_is_zero_mode(self):
        f = random_field(0)
        assert np.allclose(f.spectrum[0, 0], f.mean())


class TestInverseTransform:
    def test_constant_roundtrip(self):
        g = Grid((4, 4))
        spec = np.zeros(g.dims + (1,), complex)
        spec[0, 0, 0] = 2.0
        assert np.allclose(inverse_transform(spec, g).values, 2.0)

    def test_cosine_from_coefficients(self):
        g = Grid((8,))
        spec = np.zeros((8, 1), complex)
        spec[1] = spec[-1] = 0.5
        out = inverse_transform(spec, g)
        assert np.allclose(out.values[:, 0], np.cos(2 * np.pi * g.axis_coords(0)), atol=1e-14)

    def test_random_roundtrip(self):
        f = random_field(1, dims=(8, 8, 4), d=3)
        back = inverse_transform(f.spectrum, f.grid)
        assert np.linalg.norm(back.values - f.values) <= 1e-12 * np.linalg.norm(f.values)

    def test_non_symmetric_rejected(self):
        g = Grid((8,))
        spec = np.zeros((8, 1), complex)
        spec[1] = 1.0
        with pytest.raises(NonSymmetricSpectrum):
            inverse_transform(spec, g)


class TestNorms:
    def test_lp_constant(self):
        f = PeriodicField(Grid((8, 8)), np.full((8, 8), 2.0))
        for p in (1.5, 2, 3, 7):
            assert lp_norm(f, p) == pytest.approx(2.0)

    def test_lp_sine(self):
        f = PeriodicField.from_function(Grid((32,)), lambda y: np.sin(2 * np.pi * y))
        assert lp_norm(f, 2) == pytest.approx(1 / np.sqrt(2), rel=1e-12)
        assert lp_norm(f, 4) == pytest.approx((3 / 8) ** 0.25, rel=1e-12)

    def test_lp_rejects_infinite(self):
        with pytest.raises(ValueError):
            lp_norm(random_field(0), np.inf)

    def test_hneg_zero(self):
        assert hneg_norm(PeriodicField.zeros(Grid((8, 8)), 1)) == 0.0

    def test_hneg_sine(self):
        f = PeriodicField.from_function(Grid((16, 16)), lambda y1, y2: np.sin(2 * np.pi * y1))
        expected = np.sqrt(1 / (2 * (1 + 4 * np.pi**2)))
        assert hneg_norm(f) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.11114, abs=1e-5)

    def test_hneg_decreases_with_frequency(self):
        g = Grid((32,))
        norms = [hneg_norm(PeriodicField.from_function(g, lambda y, k=k: np.sin(2 * np.pi * k * y)))
                 for k in range(1, 8)]
        assert all(a > b for a, b in zip(norms, norms[1:]))


class TestRemoveMean:
    def test_constant(self):
        out = remove_mean(PeriodicField(Grid((4, 4)), np.full((4, 4), 5.0)))
        assert np.abs(out.values).max() == 0.0

    def test_mean_zero_unchanged(self):
        g = Grid((16,))
        f = PeriodicField.from_function(g, lambda y: np.sin(2 * np.pi * y))
        assert np.allclose(remove_mean(f).values, f.values, atol=1e-16)

    def test_shifted_sine(self):
        g = Grid((16,))
        f = PeriodicField.from_function(g, lambda y: 1 + np.sin(2 * np.pi * y))
        out = remove_mean(f)
        assert np.allclose(out.values[:, 0], np.sin(2 * np.pi * g.axis_coords(0)), atol=1e-14)
        assert abs(out.mean()[0]) <= 1e-14


class TestInterpolation:
    def test_exact_at_nodes(self):
        f = random_field(3, dims=(8, 8))
        pts = f.grid.coords().reshape(-1, 2)
        vals = trig_interpolate(f, pts)
        assert np.allclose(vals, f.values.reshape(-1, 2), atol=1e-12)

    def test_band_limited_off_grid(self):
        g = Grid((8, 8))
        fn = lambda y1, y2: np.cos(2 * np.pi * y1) * np.sin(4 * np.pi * y2) + 0.3  # noqa: E731
        f = PeriodicField.from_function(g, fn)
        pts = np.random.default_rng(4).uniform(-2, 2, size=(50, 2))
        assert np.allclose(trig_interpolate(f, pts)[:, 0], fn(pts[:, 0], pts[:, 1]), atol=1e-12)

    def test_resample_matches_interpolation(self):
        f = random_field(5, dims=(8, 4), d=1)
        fine = resample(f, (16, 12))
        pts = fine.grid.coords().reshape(-1, 2)
        assert np.allclose(fine.values.reshape(-1, 1), trig_interpolate(f, pts), atol=1e-12)
        assert lp_norm(fine, 2) == pytest.approx(np.sqrt(np.sum(np.abs(fine.spectrum) ** 2)))


class TestAqxf:
    def test_roundtrip(self, tmp_path):
        f = random_field(6, dims=(4, 6), d=3)
        path = tmp_path / "f.aqxf"
        write_field(path, f)
        raw = path.read_bytes()
        assert raw[:4] == b"AQXF"
        assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 2, 3, 4, 6]
        # first node, components fastest
        assert np.allclose(np.frombuffer(raw[24:48], "<f8"), f.values[0, 0])
        back = read_field(path)
        assert np.array_equal(back.values, f.values)
        assert back.grid == f.grid

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.aqxf"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FieldFormatError):
            read_field(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.aqxf"
        f = random_field(1, dims=(4, 4), d=2)
        write_field(path, f)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FieldFormatError):
            read_field(path)

    def test_product_grid_roundtrip(self, tmp_path):
        path = tmp_path / "w.aqxf"
        vals = np.random.default_rng(0).standard_normal((4, 4, 6, 6, 2))
        write_aqxf(path, vals)
        assert np.array_equal(read_aqxf(path), vals)
        with pytest.raises(FieldFormatError):
            read_field(path)


fields = st.builds(
    lambda seed, d, dims: random_field(seed, dims=dims, d=d),
    st.integers(0, 2**31),
    st.integers(1, 3),
    st.sampled_from([(4,), (8,), (4, 6), (8, 8), (4, 4, 4)]),
)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(fields)
    def test_parseval(self, f):
        lhs = lp_norm(f, 2) ** 2
        rhs = float(np.sum(np.abs(f.spectrum) ** 2))
        assert abs(lhs - rhs) <= 1e-10 * rhs

    @settings(max_examples=50, deadline=None)
    @given(fields, st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    def test_linearity(self, f, a, b, seed):
        g = PeriodicField(f.grid, np.random.default_rng(seed).standard_normal(f.values.shape))
        combo = forward_transform(PeriodicField(f.grid, a * f.values + b * g.values))
        assert np.allclose(combo, a * f.spectrum + b * g.spectrum, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(fields)
    def test_hneg_below_l2(self, f):
        assert hneg_norm(f) <= lp_norm(f, 2) + 1e-14
