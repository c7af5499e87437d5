import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtransport.errors import DomainError, PreconditionError
from xtransport.instances import random_singular_pair
from xtransport.measure import (
    HybridMeasure,
    decompose,
    mass,
    mutually_singular,
    periodize,
    shift,
)


@pytest.fixture
def mu():
    return HybridMeasure((0.0, 3.0), [0.0, 3.0], [1.0], [(1.0, 2.0)])


class TestMass:
    def test_closed_interval_counts_atom(self, mu):
        assert mass(mu, 0.5, 1.5) == pytest.approx(3.0, abs=1e-15)

    def test_left_open_endpoint_excludes_atom(self, mu):
        assert mass(mu, 1.0, 1.5, left_closed=False) == pytest.approx(0.5, abs=1e-15)

    def test_periodic_set_on_six(self):
        m = HybridMeasure.from_indicator((0.0, 6.0), [(0.0, 2.0), (3.0, 5.0)], 1.0)
        assert mass(m, 0.0, 6.0) == pytest.approx(4.0, abs=1e-15)

    def test_outside_window_is_domain_error(self, mu):
        with pytest.raises(DomainError):
            mu.mass(-1.0, 1.0)
        with pytest.raises(DomainError):
            mu.mass(1.0, 3.5)

    def test_empty_interval(self, mu):
        assert mu.mass(2.0, 1.0) == 0.0
        assert mu.mass(1.0, 1.0) == 2.0
        assert mu.mass(1.0, 1.0, left_closed=False) == 0.0

    def test_vectorized(self, mu):
        out = mu.mass(np.array([0.0, 0.5]), np.array([1.0, 3.0]), True, False)
        np.testing.assert_allclose(out, [1.0, 4.5])

    def test_point_masses_at_breakpoints(self):
        m = HybridMeasure((0.0, 2.0), [0.0, 1.0, 2.0], [1.0, 3.0], [(1.0, 0.5), (2.0, 0.25)])
        assert m.mass(0.0, 2.0) == pytest.approx(4.75)
        assert m.mass(1.0, 2.0, True, False) == pytest.approx(3.5)
        assert m.total_mass == pytest.approx(4.75)


class TestConstruction:
    @pytest.mark.parametrize("kwargs", [
        dict(window=(1.0, 0.0), breakpoints=[1.0, 0.0], densities=[1.0]),
        dict(window=(0.0, 1.0), breakpoints=[0.0, 0.5], densities=[1.0]),
        dict(window=(0.0, 1.0), breakpoints=[0.0, 1.0], densities=[-1.0]),
        dict(window=(0.0, 1.0), breakpoints=[0.0, 1.0], densities=[1.0], atoms=[(2.0, 1.0)]),
        dict(window=(0.0, 1.0), breakpoints=[0.0, 1.0], densities=[1.0], atoms=[(0.5, 0.0)]),
        dict(window=(0.0, 1.0), breakpoints=[0.0, 1.0], densities=[1.0],
             atoms=[(0.5, 1.0), (0.5, 1.0)]),
    ])
    def test_invalid_inputs_rejected(self, kwargs):
        with pytest.raises(PreconditionError):
            HybridMeasure(**kwargs)

    def test_immutable_arrays(self, mu):
        with pytest.raises(ValueError):
            mu.densities[0] = 5.0


class TestDecompose:
    def test_parts(self, mu):
        diffuse, atomic = decompose(mu)
        assert diffuse.mass(0.0, 3.0) == pytest.approx(3.0)
        assert atomic.mass(0.0, 3.0) == pytest.approx(2.0)
        assert diffuse.is_diffuse and atomic.is_atomic

    def test_pure_cases(self):
        leb = HybridMeasure.lebesgue((0.0, 1.0))
        assert decompose(leb)[1].total_mass == 0.0
        pts = HybridMeasure.from_atoms((0.0, 1.0), [0.2, 0.4], 1.0)
        assert decompose(pts)[0].total_mass == 0.0

    def test_partition_of_mass(self, rng):
        xi, _ = random_singular_pair(rng, n_atoms=6)
        d, a = decompose(xi)
        lo = rng.uniform(xi.a, xi.b, 1000)
        hi = rng.uniform(xi.a, xi.b, 1000)
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        np.testing.assert_allclose(d.mass(lo, hi) + a.mass(lo, hi), xi.mass(lo, hi),
                                   rtol=1e-12, atol=1e-12)


class TestShift:
    def test_atom_moves(self):
        m = HybridMeasure.from_atoms((0.0, 3.0), [1.0], [2.0])
        assert shift(m, 1.0).atoms == [(0.0, 2.0)]
        assert shift(m, 1.0).window == (-1.0, 2.0)

    def test_zero_shift_is_identity(self, mu):
        assert shift(mu, 0.0) == mu

    def test_flow_property(self, rng):
        xi, _ = random_singular_pair(rng)
        for s, t in rng.uniform(-2, 2, size=(20, 2)):
            lhs = shift(shift(xi, s), t)
            rhs = shift(xi, s + t)
            np.testing.assert_allclose(lhs.breakpoints, rhs.breakpoints, atol=1e-12)
            np.testing.assert_allclose(lhs.atom_locs, rhs.atom_locs, atol=1e-12)

    def test_shifted_masses(self, rng):
        xi, _ = random_singular_pair(rng, n_atoms=5)
        t = 0.37
        sh = shift(xi, t)
        lo = rng.uniform(sh.a, sh.b, 200)
        hi = rng.uniform(sh.a, sh.b, 200)
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        inside = (lo + t <= xi.b) & (hi + t <= xi.b)
        np.testing.assert_allclose(sh.mass(lo[inside], hi[inside]),
                                   xi.mass(lo[inside] + t, hi[inside] + t), atol=1e-12)


class TestMutuallySingular:
    def test_density_against_atom(self):
        assert mutually_singular(HybridMeasure.lebesgue((0.0, 2.0)),
                                 HybridMeasure.from_atoms((0.0, 2.0), [1.0], [1.0]))

    def test_overlapping_densities(self):
        a = HybridMeasure.from_indicator((0.0, 3.0), [(0.0, 2.0)])
        b = HybridMeasure.from_indicator((0.0, 3.0), [(1.0, 3.0)])
        assert not mutually_singular(a, b)

    def test_periodic_base_pair(self):
        a = HybridMeasure.from_indicator((0.0, 3.0), [(0.0, 2.0)], 1.0)
        b = HybridMeasure.from_indicator((0.0, 3.0), [(2.0, 3.0)], 2.0)
        assert mutually_singular(a, b)

    def test_shared_atom(self):
        a = HybridMeasure.from_atoms((0.0, 3.0), [1.0], [1.0])
        assert not mutually_singular(a, a)
        assert mutually_singular(a, a, tol=1.0)

    def test_random_pairs_are_singular(self, rng):
        for _ in range(50):
            assert mutually_singular(*random_singular_pair(rng))


class TestSerialization:
    def test_round_trip_bit_exact(self, rng):
        for _ in range(20):
            xi, _ = random_singular_pair(rng, n_atoms=4)
            again = HybridMeasure.from_json(xi.to_json())
            assert again == xi

    def test_json_layout(self, mu):
        data = json.loads(mu.to_json())
        assert set(data) == {"window", "breakpoints", "densities", "atoms"}
        assert data["atoms"] == [[1.0, 2.0]]


class TestOperations:
    def test_add_merges_atoms(self):
        a = HybridMeasure((0.0, 2.0), [0.0, 1.0, 2.0], [1.0, 0.0], [(0.5, 1.0)])
        b = HybridMeasure((0.0, 2.0), [0.0, 2.0], [2.0], [(0.5, 2.0), (1.5, 1.0)])
        c = a + b
        assert c.atoms == [(0.5, 3.0), (1.5, 1.0)]
        assert c.mass(0.0, 2.0) == pytest.approx(a.total_mass + b.total_mass)

    def test_periodize(self):
        base = HybridMeasure((0.0, 1.0), [0.0, 0.5, 1.0], [1.0, 0.0], [(0.75, 0.5)])
        p = periodize(base, 3)
        assert p.window == (0.0, 3.0)
        assert p.total_mass == pytest.approx(3.0)
        assert p.mass(1.0, 2.0, True, False) == pytest.approx(1.0)

    def test_periodize_rejects_end_atom(self):
        base = HybridMeasure.from_atoms((0.0, 1.0), [1.0], [1.0])
        with pytest.raises(PreconditionError):
            periodize(base, 2)

    def test_restrict_and_simplify(self, mu):
        r = mu.restrict(0.5, 2.0)
        assert r.window == (0.5, 2.0)
        assert r.total_mass == pytest.approx(3.5)
        m = HybridMeasure((0.0, 3.0), [0.0, 1.0, 2.0, 3.0], [1.0, 1.0, 2.0]).simplify()
        assert m.breakpoints.tolist() == [0.0, 2.0, 3.0]


finite = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 3.0), st.floats(0.0, 5.0)), min_size=1, max_size=8),
       st.lists(st.tuples(finite, st.floats(0.01, 3.0)), max_size=6),
       finite, finite, finite)
def test_additivity_and_endpoints(cells, atoms, f1, f2, f3):
    widths = np.array([c[0] for c in cells])
    pts = np.concatenate(([0.0], np.cumsum(widths)))
    b = float(pts[-1])
    dens = [c[1] for c in cells]
    locs = sorted({min(round(f * b, 6), b) for f, _ in atoms})
    ms = [m for _, m in atoms][: len(locs)]
    m = HybridMeasure((0.0, b), pts, dens, list(zip(locs, ms)) or None)
    s, u, t = sorted((f1 * b, f2 * b, f3 * b))
    whole = m.mass(s, t, True, True)
    split = m.mass(s, u, True, False) + m.mass(u, t, True, True)
    assert abs(whole - split) <= 1e-12 * max(1.0, whole)
    closed = m.mass(s, t, True, True)
    opened = m.mass(s, t, False, False)
    if s < t:
        expected = m.atom_at(s) + m.atom_at(t)
        assert abs((closed - opened) - expected) <= 1e-12 * max(1.0, closed)
