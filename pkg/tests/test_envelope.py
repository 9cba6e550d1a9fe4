import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqx.envelope import (
    ConstraintClass,
    EnvelopeOptions,
    convex_envelope_oracle,
    envelope_batch,
    pointwise_envelope_field,
    qa_envelope,
)
from aqx.errors import BoxTooSmall, NoDescent
from aqx.integrand import IntegrandSpec
from aqx.operator import curl_perturbed, divergence_perturbed
from aqx.spectral import Grid, PeriodicField

A_VAR = "3/4 + sin(2*pi*x1)/4"
DIV = divergence_perturbed(A_VAR)
WELL = IntegrandSpec("(xi1^2 + xi2^2 - 1)^2", 2, 2)
SMALL = EnvelopeOptions(grid=(8, 8), random_starts=4)


def well(p):
    return (np.sum(p**2, -1) - 1.0) ** 2


class TestOracle:
    def test_outside_the_disk_equals_f(self):
        oracle = convex_envelope_oracle(well, 2)
        # sampling spacing 0.075 puts the error at order h^2
        assert oracle([2.0, 0.0]) == pytest.approx(9.0, rel=1e-3)

    def test_inside_the_disk_vanishes(self):
        oracle = convex_envelope_oracle(well, 2)
        vals = oracle(np.array([[0.0, 0.0], [0.5, 0.1], [-0.3, 0.6]]))
        assert np.all(np.abs(vals) <= 1e-3)

    def test_radial_one_dimensional(self):
        oracle = convex_envelope_oracle(lambda p: (p[..., 0] ** 2 - 1) ** 2, 1)
        assert oracle([0.0]) == pytest.approx(0.0, abs=5e-3)
        assert oracle([2.0]) == pytest.approx(9.0, rel=1e-3)

    def test_convex_input_reproduced(self):
        oracle = convex_envelope_oracle(lambda p: np.sum(p**2, -1), 2)
        pts = np.array([[0.3, -0.7], [1.1, 0.4]])
        assert np.allclose(oracle(pts), np.sum(pts**2, -1), atol=2e-3)

    def test_box_too_small(self):
        with pytest.raises(BoxTooSmall):
            convex_envelope_oracle(lambda p: -np.sum(p**2, -1), 2)


class TestConstraintClass:
    def test_projected_fields_belong(self):
        cc = ConstraintClass(DIV, (0.3, 0.1), Grid.micro((8, 8)))
        rng = np.random.default_rng(0)
        w = PeriodicField(cc.grid, cc.project(rng.standard_normal((8, 8, 2))))
        assert cc.contains(w)
        assert not cc.contains(PeriodicField(cc.grid, rng.standard_normal((8, 8, 2))))


class TestEnvelope:
    def test_convex_integrand_is_its_own_envelope(self):
        f = IntegrandSpec("xi1^2 + 2*xi2^2 + xi1*xi2", 2, 2)
        res = qa_envelope(DIV, f, (0.2, 0.4), (0.7, -0.3), SMALL)
        assert res.value == pytest.approx(float(f.value(None, None, np.array([0.7, -0.3]))), rel=1e-9)
        assert res.starts[0].iterations == 0

    def test_double_well_centre(self):
        res = qa_envelope(DIV, WELL, (0.3, 0.2), (0.0, 0.0), EnvelopeOptions(grid=(16, 16)))
        assert res.value <= 5e-3
        assert res.value <= res.baseline

    def test_outside_the_disk_is_convex(self):
        res = qa_envelope(DIV, WELL, (0.3, 0.2), (1.5, 0.5), SMALL)
        assert res.value == pytest.approx(float(well(np.array([1.5, 0.5]))), rel=1e-6)

    def test_all_starts_reported(self):
        res = qa_envelope(DIV, WELL, (0.3, 0.2), (0.5, 0.0), SMALL)
        assert len(res.starts) == 1 + SMALL.random_starts
        assert res.value == min(s.value for s in res.starts)
        assert res.summary()["grid"] == [8, 8]

    def test_deterministic(self):
        a = qa_envelope(DIV, WELL, (0.3, 0.2), (0.4, 0.1), SMALL)
        b = qa_envelope(DIV, WELL, (0.3, 0.2), (0.4, 0.1), SMALL)
        assert a.value == b.value
        assert np.array_equal(a.minimizer.values, b.minimizer.values)

    def test_threads_do_not_change_results(self):
        xis = np.linspace(-0.5, 0.5, 40)[:, None] * np.array([[1.0, 0.5]])
        opts = EnvelopeOptions(grid=(8, 8), random_starts=1, max_iter=50)
        one = envelope_batch(DIV, WELL, [(0.1, 0.2)] * len(xis), xis, opts)
        two = envelope_batch(DIV, WELL, [(0.1, 0.2)] * len(xis), xis, EnvelopeOptions(grid=(8, 8), random_starts=1,
                                                                                   max_iter=50, threads=2))
        assert [r.value for r in one] == [r.value for r in two]

    def test_curl_fixed_point(self):
        a1 = "3/4 + cos(2*pi*x2)/8"
        f = IntegrandSpec(f"xi1^2/({a1})^2 + xi2^2", 2, 2)
        res = qa_envelope(curl_perturbed(a1), f, (0.1, 0.3), (1.0, -1.0), SMALL)
        fx = float(f.value(np.array([0.1, 0.3]), None, np.array([1.0, -1.0])))
        assert res.value == pytest.approx(fx, rel=1e-9)

    def test_translation_consistency(self):
        c = (0.25, -0.1)
        shifted = IntegrandSpec(f"((xi1 + {c[0]})^2 + (xi2 - 0.1)^2 - 1)^2", 2, 2)
        opts = EnvelopeOptions(grid=(16, 16))
        base = qa_envelope(DIV, WELL, (0.3, 0.2), (0.3, 0.2), opts).value
        moved = qa_envelope(DIV, shifted, (0.3, 0.2), (0.3 - c[0], 0.2 - c[1]), opts).value
        assert abs(base - moved) <= 5e-3

    def test_non_finite_start_raises(self):
        f = IntegrandSpec("exp(1000*xi1^2)", 2, 2)
        with pytest.raises(NoDescent):
            qa_envelope(DIV, f, (0.0, 0.0), (1.0, 0.0), SMALL)

    def test_y_dependent_needs_frozen_slot(self):
        f = IntegrandSpec("(2 + sin(2*pi*y1))*xi1^2", 2, 2)
        with pytest.raises(ValueError):
            qa_envelope(DIV, f, (0.0, 0.0), (1.0, 0.0), SMALL)
        res = qa_envelope(DIV, f, (0.0, 0.0), (1.0, 0.0), SMALL, y0=(0.25, 0.0))
        # sin(pi/2) = 1 makes the frozen integrand 3 xi1^2, which is convex
        assert res.value == pytest.approx(3.0, rel=1e-9)


class TestPointwiseField:
    def test_matches_frozen_calls(self):
        grid = Grid.macro((4, 4))
        u = PeriodicField.from_function(grid, lambda x1, x2: [0.3 * np.sin(2 * np.pi * x2), 0.2 + 0 * x1])
        field, results = pointwise_envelope_field(DIV, WELL, u, SMALL)
        node = (2, 1)
        x0 = tuple(grid.coords()[node])
        single = qa_envelope(DIV, WELL, x0, tuple(u.values[node]), SMALL)
        assert abs(field.values[node][0] - single.value) <= 1e-12

    def test_convex_field_equals_f(self):
        grid = Grid.macro((4, 4))
        f = IntegrandSpec("(1 + x1^2)*(xi1^2 + xi2^2)", 2, 2)
        u = PeriodicField.from_function(grid, lambda x1, x2: [np.cos(2 * np.pi * x1), 0.5 + 0 * x2])
        field, _ = pointwise_envelope_field(DIV, f, u, SMALL)
        expected = f.value(grid.coords(), None, u.values)
        assert np.allclose(field.values[..., 0], expected, rtol=1e-9)


@settings(max_examples=8, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_upper_bound_by_zero_field(a, b):
    res = qa_envelope(DIV, WELL, (0.3, 0.2), (a, b), EnvelopeOptions(grid=(8, 8), random_starts=2, max_iter=200))
    assert res.value <= res.baseline + 1e-12
