import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqx.operator import curl_perturbed, custom, divergence_perturbed, kernel_projector, projector_tables
from aqx.projection import (
    deficiency_bound,
    effective_constant,
    project,
    project_two_scale,
    projection_report,
)
from aqx.spectral import Grid, PeriodicField, inverse_transform, lp_norm, remove_mean
from aqx.twoscale import TwoScaleField

A_VAR = "3/4 + sin(2*pi*x1)/4"
DIV_VAR = divergence_perturbed(A_VAR)
CURL = curl_perturbed("3/4 + cos(2*pi*x2)/8")


def band_limited(grid, d, seed, band=None):
    rng = np.random.default_rng(seed)
    band = band or min(grid.dims) // 2 - 1
    lat = grid.lattice()
    mask = np.all(np.abs(lat) <= band, axis=-1)
    raw = rng.standard_normal(grid.dims + (d,))
    spec = np.fft.fftn(raw, axes=tuple(range(grid.N))) * mask[..., None]
    vals = np.fft.ifftn(spec, axes=tuple(range(grid.N))).real
    return PeriodicField(grid, vals)


class TestProject:
    def test_constant_vanishes(self):
        g = Grid((16, 16))
        out = project(DIV_VAR, [0.2, 0.0], PeriodicField(g, np.full(g.dims + (2,), 3.0)))
        assert np.abs(out.values).max() == 0.0

    def test_idempotent(self):
        g = Grid((16, 16))
        once = project(CURL, [0.1, 0.6], band_limited(g, 2, 0))
        twice = project(CURL, [0.1, 0.6], once)
        assert lp_norm(twice - once) <= 1e-12 * lp_norm(once)

    def test_single_mode_killed(self):
        g = Grid((16, 16))
        psi = PeriodicField.from_function(g, lambda y1, y2: [np.sin(2 * np.pi * y1), 0 * y1])
        assert np.abs(project(divergence_perturbed("1"), [0, 0], psi).values).max() < 1e-15

    def test_output_in_kernel_modewise(self):
        g = Grid((8, 8))
        out = project(DIV_VAR, [0.4, 0.0], band_limited(g, 2, 1))
        lat = g.lattice()
        spec = out.spectrum
        for idx in [(1, 2), (3, 7), (0, 1)]:
            P = kernel_projector(DIV_VAR, [0.4, 0.0], lat[idx])
            assert np.allclose(P @ spec[idx], spec[idx], atol=1e-14)

    def test_nyquist_removed(self):
        g = Grid((8,) * 2)
        psi = PeriodicField.from_function(g, lambda y1, y2: [np.cos(8 * np.pi * y1), 0 * y1])
        assert np.abs(project(divergence_perturbed("1"), [0, 0], psi).values).max() < 1e-15


class TestDeficiency:
    @pytest.mark.parametrize("a, expected", [("1/2", 2.0), ("1", 1.0)])
    def test_closed_form(self, a, expected):
        assert deficiency_bound(divergence_perturbed(a), [0, 0]) == pytest.approx(expected, rel=1e-12)

    def test_injective_symbol(self):
        # full gradient of a scalar: d=1, l=2, kernel {0}
        op = custom(2, 1, 2, [[["1"], ["0"]], [["0"], ["1"]]])
        assert np.isfinite(deficiency_bound(op, [0, 0]))
        g = Grid((8, 8))
        psi = remove_mean(band_limited(g, 1, 3))
        assert np.abs(project(op, [0, 0], psi).values).max() < 1e-14

    def test_report_certified(self):
        g = Grid((16, 16))
        rep = projection_report(DIV_VAR, [0.7, 0.0], band_limited(g, 2, 4))
        assert rep.bound_status == "certified"
        assert rep.bound_holds
        assert rep.residual < 1e-12 and rep.idempotency_gap < 1e-12
        assert projection_report(DIV_VAR, [0.7, 0.0], band_limited(g, 2, 4), p=3).bound_status == "indicative"

    def test_report_excludes_nyquist_content(self):
        g = Grid((16, 16))
        noise = PeriodicField(g, np.random.default_rng(3).standard_normal((16, 16, 2)))
        rep = projection_report(DIV_VAR, [0.3, 0.1], noise)
        assert 0.0 < rep.nyquist_fraction < 1.0
        assert rep.bound_holds
        assert projection_report(DIV_VAR, [0.3, 0.1], band_limited(g, 2, 4)).nyquist_fraction < 1e-12


class TestTwoScale:
    def _field(self, values_fn, macro=(4, 4), micro=(8, 8)):
        M, m = Grid.macro(macro), Grid.micro(micro)
        X = M.coords()[:, :, None, None, :]
        Y = m.coords()[None, None, :, :, :]
        return TwoScaleField(M, m, values_fn(X, Y))

    def test_y_independent_vanishes(self):
        w = self._field(lambda X, Y: np.broadcast_to(np.concatenate([X, X[..., :1]**2], -1)[..., :2],
                                                      X.shape[:2] + (8, 8, 2)).copy())
        assert np.abs(project_two_scale(DIV_VAR, w).values).max() < 1e-14

    def test_nodewise_idempotent(self):
        rng = np.random.default_rng(5)
        w = self._field(lambda X, Y: rng.standard_normal((4, 4, 8, 8, 2)))
        once = project_two_scale(DIV_VAR, w)
        twice = project_two_scale(DIV_VAR, once)
        assert np.abs(twice.values - once.values).max() < 1e-12
        # agrees with the single-node projection
        node = project(DIV_VAR, once.macro.coords()[2, 1], PeriodicField(w.micro, w.values[2, 1]))
        assert np.allclose(once.values[2, 1], node.values, atol=1e-13)

    def test_lipschitz_audit(self):
        fn = lambda X, Y: np.concatenate([  # noqa: E731
            np.cos(2 * np.pi * X[..., :1]) * np.sin(2 * np.pi * (Y[..., :1] + Y[..., 1:])),
            np.sin(2 * np.pi * X[..., 1:]) * np.cos(2 * np.pi * Y[..., :1]),
        ], axis=-1)
        w = self._field(fn, macro=(16, 16))
        pw = project_two_scale(DIV_VAR, w)
        P = projector_tables(DIV_VAR, w.macro.coords().reshape(-1, 2), w.micro).reshape((16, 16, 8, 8, 2, 2))

        def l2(a):
            return np.sqrt(np.mean(np.sum(a**2, axis=-1), axis=(-2, -1)))

        for axis in (0, 1):
            dw = l2(np.diff(w.values, axis=axis)).max()
            dP = np.linalg.norm(np.diff(P, axis=axis), ord=2, axis=(-2, -1)).max()
            dpw = l2(np.diff(pw.values, axis=axis)).max()
            assert dpw <= dw + dP * l2(w.values).max() + 1e-14

    def test_refinement_commutes(self):
        fn = lambda X, Y: np.concatenate([  # noqa: E731
            np.cos(2 * np.pi * X[..., :1]) * np.sin(2 * np.pi * Y[..., 1:]) + np.sin(2 * np.pi * Y[..., :1]),
            np.sin(2 * np.pi * X[..., 1:]) * np.cos(2 * np.pi * (Y[..., :1] - Y[..., 1:])),
        ], axis=-1)
        coarse = project_two_scale(DIV_VAR, self._field(fn, macro=(4, 4)))
        fine = project_two_scale(DIV_VAR, self._field(fn, macro=(8, 8)))
        assert np.allclose(fine.values[::2, ::2], coarse.values, atol=1e-9)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([DIV_VAR, CURL]), st.floats(0, 1), st.integers(0, 10**6),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity_and_p2_p3(self, op, x1, seed, a, b):
        g = Grid((16, 16))
        x = [x1, 0.37]
        p1, p2 = band_limited(g, 2, seed), band_limited(g, 2, seed + 1)
        lhs = project(op, x, PeriodicField(g, a * p1.values + b * p2.values))
        rhs = a * project(op, x, p1).values + b * project(op, x, p2).values
        assert np.abs(lhs.values - rhs).max() <= 1e-12 * (1 + abs(a) + abs(b)) * 10
        rep = projection_report(op, x, p1)
        assert rep.residual <= 1e-10 and rep.idempotency_gap <= 1e-10
        assert rep.bound_holds

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from([DIV_VAR, CURL]), st.floats(0, 1), st.integers(0, 10**6), st.integers(1, 6))
    def test_highpass_contraction(self, op, x1, seed, cut):
        g = Grid((16, 16))
        psi = band_limited(g, 2, seed)
        out = project(op, [x1, 0.5], psi)
        high = np.max(np.abs(g.lattice()), axis=-1) >= cut
        e_in = np.sum(np.abs(psi.spectrum[high]) ** 2)
        e_out = np.sum(np.abs(out.spectrum[high]) ** 2)
        assert e_out <= e_in * (1 + 1e-12)

    def test_effective_constant(self):
        assert effective_constant(1.0) == pytest.approx(np.sqrt(1 + 4 * np.pi**2) / (2 * np.pi))
