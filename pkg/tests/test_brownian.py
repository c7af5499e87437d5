import math

import numpy as np
import pytest
from scipy import integrate

from xtransport.brownian import (
    Excursion,
    GridPath,
    LazyBrownianPath,
    D,
    G,
    bridge_local_time,
    cell_uniforms,
    concatenate,
    first_A_excursion_time,
    last_before_zero,
    local_time_measure,
    occupation_calibration,
    sample_bridge_local_time,
    shift_path,
    simulate,
    time_reverse,
)
from xtransport.errors import DomainError, HorizonError, PreconditionError

SQRT_2_PI = math.sqrt(2 / math.pi)


def lifetime_over(c):
    return lambda tab: tab.lifetime > c


# -- simulation ------------------------------------------------------------------

def test_origin_is_exact_zero():
    for mode in ("gaussian", "random_walk"):
        p = simulate(1, 1e-3, 2.0, mode)
        assert p.values[p.origin_index()] == 0.0
        assert p.t_min == pytest.approx(-2.0) and p.t_max == pytest.approx(2.0)


def test_variance_at_one():
    vals = np.array([simulate(s, 1e-3, 1.0).value_at(1.0) for s in range(1000)])
    var = vals.var(ddof=1)
    se = math.sqrt(2 / 999)  # standard error of a unit-variance sample variance
    assert abs(var - 1.0) < 3 * se


def test_increments_uncorrelated():
    p = simulate(7, 1e-4, 5.0)
    inc = np.diff(p.values)
    r = np.corrcoef(inc[:-1], inc[1:])[0, 1]
    assert abs(r) < 3 / math.sqrt(inc.size)


def test_same_seed_same_path():
    a, b = simulate(11, 1e-3, 1.0), simulate(11, 1e-3, 1.0)
    assert np.array_equal(a.values, b.values)


def test_bad_inputs():
    with pytest.raises(PreconditionError):
        simulate(0, 0.0, 1.0)
    with pytest.raises(PreconditionError):
        simulate(0, 1e-3, 1.0, "levy")
    with pytest.raises(PreconditionError):
        GridPath([0.0, 0.0], [0.0, 1.0], 1.0)


# -- random walk mode ---------------------------------------------------------------

def test_random_walk_lifetimes_are_even_multiples():
    p = simulate(3, 1e-3, 4.0, "random_walk")
    life = p.excursion_table().lifetime / p.step
    assert life.size > 10
    assert np.allclose(life, 2 * np.round(life / 2))


def test_random_walk_local_time_counts_visits():
    p = simulate(4, 1e-3, 2.0, "random_walk")
    fwd = p.restrict(0.0, p.t_max)
    visits = int(np.sum(fwd.values[:-1] == 0.0))
    assert fwd.local_time(fwd.t_max) == pytest.approx(visits * math.sqrt(p.step))
    mu = local_time_measure(fwd)
    zero_cells = np.flatnonzero(fwd.values[:-1] == 0.0)
    jumps = mu.densities * np.diff(mu.breakpoints)
    assert np.allclose(jumps[zero_cells], math.sqrt(p.step))
    assert np.all(np.delete(jumps, zero_cells) == 0.0)


# -- local time ------------------------------------------------------------------

@pytest.mark.parametrize("x,y,h", [(0.0, 0.0, 1.0), (0.3, -0.2, 0.5), (0.1, 0.4, 0.2),
                                   (-0.05, -0.02, 0.01)])
def test_bridge_local_time_against_quadrature(x, y, h):
    def p(t, z):
        return math.exp(-z * z / (2 * t)) / math.sqrt(2 * math.pi * t)

    num, _ = integrate.quad(lambda s: p(s, x) * p(h - s, y), 0, h, limit=200)
    assert bridge_local_time(x, y, h) == pytest.approx(num / p(h, y - x), rel=1e-7)


def test_bridge_local_time_far_from_zero_is_zero():
    assert bridge_local_time(1.0, 1.0, 1e-4) == 0.0


def test_expected_local_time_bridge_estimator():
    # E l[0,1] = E|B_1| = sqrt(2/pi); the oracle itself is checked by Monte Carlo
    rng = np.random.default_rng(5)
    assert np.mean(np.abs(rng.standard_normal(200_000))) == pytest.approx(SQRT_2_PI, abs=0.005)
    vals = [simulate(rng, 1e-3, 1.0).local_time(1.0, "bridge") for _ in range(2000)]
    se = np.std(vals) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - SQRT_2_PI) < 3 * se


@pytest.mark.parametrize("x,y,h", [(0.0, 0.0, 1.0), (0.3, -0.2, 0.5), (0.1, 0.4, 0.2)])
def test_sampled_cell_local_time_law(x, y, h):
    u = np.random.default_rng(3).random(100_000)
    L = sample_bridge_local_time(x, y, h, u)
    assert np.all(L >= 0)
    se = L.std() / math.sqrt(L.size)
    assert abs(L.mean() - bridge_local_time(x, y, h)) < 4 * se
    # P(L > 0) is the probability that the bridge reaches zero
    hit = math.exp(-2 * max(x * y, 0.0) / h)
    assert (L > 0).mean() == pytest.approx(hit, abs=4 * math.sqrt(hit * (1 - hit) / L.size) + 1e-12)


def test_sampled_local_time_has_levy_law():
    # l[0, 1] has the law of |B_1|: mean sqrt(2/pi), second moment 1
    rng = np.random.default_rng(7)
    vals = np.array([simulate(rng, 1e-3, 1.0).local_time(1.0) for _ in range(2000)])
    assert abs(vals.mean() - SQRT_2_PI) < 3 * vals.std() / math.sqrt(vals.size)
    sq = vals ** 2
    assert abs(sq.mean() - 1.0) < 3 * sq.std() / math.sqrt(sq.size)


def test_transformations_keep_cell_local_time():
    p = simulate(10, 1e-3, 2.0)
    total = p.cell_local_time.sum()
    assert p.with_zeros().cell_local_time.sum() == pytest.approx(total, rel=1e-12)
    assert p.reflect().cell_local_time.sum() == pytest.approx(total, rel=1e-12)
    assert p.shift(0.5).cell_local_time.sum() == pytest.approx(total, rel=1e-12)
    back = p.time_reverse().cell_local_time.sum()
    assert back == pytest.approx(p.local_time(-2.0), rel=1e-12)
    r = p.restrict(0.0, 1.0)
    assert r.cell_local_time.size == r.times.size - 1


def test_cell_uniforms_are_keyed_and_deterministic():
    k = np.arange(-50, 50)
    a = cell_uniforms(11, k[:-1], k[1:])
    assert np.array_equal(a, cell_uniforms(11, k[:-1], k[1:]))
    assert not np.array_equal(a, cell_uniforms(12, k[:-1], k[1:]))
    assert np.all((a > 0) & (a < 1))
    assert abs(cell_uniforms(5, np.arange(20000), np.arange(1, 20001)).mean() - 0.5) < 0.01


def test_expected_local_time_occupation_estimator():
    rng = np.random.default_rng(6)
    vals = [simulate(rng, 1e-3, 1.0).local_time(1.0, "occupation") for _ in range(2000)]
    se = np.std(vals) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - SQRT_2_PI) < 3 * se


def test_occupation_scaling_under_step_doubling():
    # the coarse path is every other value of the fine one, so the comparison is paired
    rng = np.random.default_rng(8)
    fine, coarse = [], []
    for _ in range(200):
        p = simulate(rng, 1e-4, 1.0).restrict(0.0, 1.0)
        lattice = np.abs(p.times / 1e-4 - np.round(p.times / 1e-4)) < 1e-6
        p = GridPath(p.times[lattice], p.values[lattice], 1e-4)
        q = GridPath(p.times[::2], p.values[::2], 2e-4)
        fine.append(p.local_time(1.0, "occupation"))
        coarse.append(q.local_time(1.0, "occupation"))
    assert abs(np.mean(coarse) / np.mean(fine) - 1) < 0.05


def test_occupation_calibration_close_to_one():
    c = occupation_calibration(1e-4)
    assert 0.9 < c < 1.1


def test_local_time_flat_away_from_zero():
    p = simulate(9, 1e-4, 3.0)
    mu = p.local_time_measure()
    far = (np.abs(p.values[:-1]) > 5 * math.sqrt(p.step)) & (np.abs(p.values[1:]) > 5 * math.sqrt(p.step))
    assert np.all(mu.densities[far] == 0.0)
    cum = np.concatenate(([0.0], np.cumsum(mu.densities * np.diff(mu.breakpoints))))
    assert np.all(np.diff(cum) >= 0)


def test_local_time_of_path_away_from_zero():
    t = np.linspace(0, 1, 101)
    p = GridPath(t, 1.0 + t, 0.01)
    assert p.local_time(1.0) == 0.0
    assert p.local_time(1.0, "occupation") == 0.0


# -- excursions -----------------------------------------------------------------

def test_single_positive_excursion():
    t = np.arange(6) * 1.0
    p = GridPath(t, [-1.0, 1.0, 2.0, 3.0, 1.0, -1.0], 1.0)
    tab = p.excursion_table()
    assert len(tab) == 1
    assert tab.start[0] == 0.5 and tab.end[0] == 4.5
    assert tab.lifetime[0] == 4.0
    assert tab.sign[0] == 1 and tab.max_abs[0] == 3.0
    e = p.excursion(0)
    assert e.values[0] == 0.0 and e.values[-1] == 0.0
    assert e.lifetime == 4.0


def test_excursions_tile_the_complete_window():
    p = simulate(12, 1e-3, 2.0)
    tab = p.excursion_table()
    z = p.zeros()
    # the zero cluster at the origin, [-step / 2, step / 2], is the only gap
    cluster = (z[:-1] >= -5e-4) & (z[1:] <= 5e-4)
    assert cluster.sum() == 2
    assert np.array_equal(tab.start, z[:-1][~cluster])
    assert np.array_equal(tab.end, z[1:][~cluster])
    assert tab.lifetime.sum() == pytest.approx(z[-1] - z[0] - 1e-3)


def test_origin_cells_carry_local_time_before_the_first_excursion():
    p = simulate(14, 1e-3, 1.0)
    tab = p.excursion_table()
    first = int(np.searchsorted(tab.start, 0.0))
    assert tab.start[first] == pytest.approx(5e-4)
    assert p.local_time(tab.start[first]) == pytest.approx(p.local_time(1e-3)) and p.local_time(5e-4) > 0
    assert p.local_time(-5e-4) > 0 and tab.end[first - 1] == pytest.approx(-5e-4)


def test_excursion_signs_alternate_between_crossings():
    # without sampled local time only sign changes create zeros
    p = simulate(13, 1e-3, 2.0).restrict(1e-3, 2.0)
    q = GridPath(p.times, p.values, p.step)
    s = q.excursion_table().sign
    assert np.all(s[1:] == -s[:-1])


def test_same_sign_neighbours_are_separated_by_a_touch():
    p = simulate(13, 1e-3, 2.0).restrict(1e-3, 2.0)
    tab = p.excursion_table()
    same = np.flatnonzero(tab.sign[1:] == tab.sign[:-1])
    assert same.size > 0
    for i in same:
        cell = np.searchsorted(p.times, tab.end[i]) - 1
        assert p.values[cell] * p.values[cell + 1] > 0
        assert p.cell_local_time[cell] > 0


def test_max_abs_matches_direct_scan():
    p = simulate(3, 1e-3, 5.0).with_zeros()
    tab = p.excursion_table()
    direct = [np.abs(p.values[a:b]).max() for a, b in zip(tab.node_lo, tab.node_hi)]
    assert np.array_equal(direct, tab.max_abs)


def test_first_and_last_qualifying_excursion():
    p = simulate(14, 1e-3, 5.0)
    tab = p.excursion_table()
    s = first_A_excursion_time(p, lifetime_over(0.05))
    hit = tab.start[(tab.lifetime > 0.05) & (tab.start >= 0)]
    assert s == hit[0]
    sp = last_before_zero(p, lifetime_over(0.05))
    assert sp == tab.start[(tab.lifetime > 0.05) & (tab.start < 0)][-1]
    with pytest.raises(HorizonError):
        first_A_excursion_time(p, lifetime_over(1e9))


def test_G_and_D_bracket():
    p = simulate(15, 1e-3, 2.0)
    z = p.zeros()
    for t in np.linspace(z[0], z[-1], 7):
        g, d = G(p, t), D(p, t)
        assert g <= t <= d
        # touches lie off the chord; with_zeros puts every zero on the polyline
        assert p.with_zeros().value_at(g) == pytest.approx(0.0, abs=1e-12)
        assert p.with_zeros().value_at(d) == pytest.approx(0.0, abs=1e-12)


# -- shifts and concatenation -------------------------------------------------------

def test_shift_by_zero_is_identity():
    p = simulate(16, 1e-3, 1.0)
    q = shift_path(p, 0.0)
    assert np.array_equal(p.times, q.times) and q.snap_distance == 0.0


def test_double_shift_composes():
    p = simulate(17, 1e-3, 2.0)
    a = p.shift(0.3).shift(-0.5)
    b = p.shift(-0.2)
    assert np.allclose(a.times, b.times, atol=1e-12)
    assert np.array_equal(a.values, b.values)


def test_shift_snaps_and_records_distance():
    p = simulate(18, 1e-3, 1.0)
    q = p.shift(0.10004)
    assert q.snap_distance == pytest.approx(0.00004, abs=1e-12)
    assert q.values[q.origin_index()] == p.value_at(0.1)


def test_shift_beyond_horizon():
    with pytest.raises(DomainError):
        simulate(18, 1e-3, 1.0).shift(2.0)


def test_shift_to_last_zero_starts_at_zero():
    p = simulate(19, 1e-3, 2.0).with_zeros()
    q = p.shift(G(p, 0.77))
    assert q.snap_distance == 0.0
    assert q.values[q.origin_index()] == 0.0


def test_time_reverse():
    p = simulate(20, 1e-3, 1.0)
    r = time_reverse(p)
    assert r.t_min == 0.0
    assert r.value_at(0.25) == pytest.approx(p.value_at(-0.25))


def test_concatenate_minimal_excursion():
    rng = np.random.default_rng(0)
    p = simulate(rng, 1e-3, 1.0)
    w1 = p.restrict(-1.0, 0.0)
    w3 = p.restrict(0.0, 1.0)
    e = Excursion.minimal(1e-3)
    c = concatenate(w1, e, w3)
    assert np.array_equal(c.values, np.concatenate((w1.values, w3.values)))
    assert np.allclose(c.times[c.times > 0], w3.times + 1e-3)


def test_concatenate_origin_lifetime():
    p = simulate(21, 1e-3, 3.0)
    e = p.excursion(int(np.argmax(p.excursion_table().lifetime)))
    w1 = simulate(22, 1e-3, 1.0).restrict(-1.0, 0.0)
    w3 = simulate(23, 1e-3, 1.0).restrict(0.0, 1.0)
    c = concatenate(w1, e, w3)
    tab = c.excursion_table()
    i = int(np.searchsorted(tab.start, 0.0))
    assert tab.start[i] == 0.0
    assert tab.lifetime[i] == pytest.approx(e.lifetime, rel=1e-12)


def test_concatenate_rejects_nonzero_junction():
    w1 = GridPath([-1.0, 0.0], [0.0, 0.5], 1.0)
    w3 = GridPath([0.0, 1.0], [0.0, 0.5], 1.0)
    with pytest.raises(PreconditionError):
        concatenate(w1, Excursion.minimal(1.0), w3)


# -- export ----------------------------------------------------------------------

def test_binary_roundtrip_uniform(tmp_path):
    p = simulate(24, 1e-3, 0.5)
    p.to_binary(tmp_path / "p.bin")
    q = GridPath.from_binary(tmp_path / "p.bin")
    assert np.array_equal(p.values, q.values)
    assert np.array_equal(p.times, q.times)
    assert np.array_equal(p.cell_local_time, q.cell_local_time)


def test_binary_roundtrip_irregular(tmp_path):
    p = simulate(25, 1e-3, 0.5).with_zeros()
    p.to_binary(tmp_path / "p.bin")
    q = GridPath.from_binary(tmp_path / "p.bin")
    assert np.array_equal(p.times, q.times) and np.array_equal(p.values, q.values)


def test_csv_export(tmp_path):
    p = simulate(26, 1e-2, 0.1)
    p.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,value" and len(rows) == len(p) + 1
    assert float(rows[1].split(",")[1]) == p.values[0]


# -- lazy sampler ------------------------------------------------------------------

def test_lazy_tol_zero_realizes_every_lattice_point():
    s = LazyBrownianPath(np.random.default_rng(1), 1e-3, tol=0.0)
    s.extend_forward(2.0)
    s.extend_backward(-1.0)
    assert np.all(np.diff(s.k) == 1)
    assert s.path().values[s.path().origin_index()] == 0.0


def test_lazy_is_deterministic():
    def run():
        s = LazyBrownianPath(np.random.default_rng(3), 1e-4)
        s.extend_forward(10.0)
        s.refine(2.0, 3.0)
        return s.path()

    a, b = run(), run()
    assert np.array_equal(a.times, b.times) and np.array_equal(a.values, b.values)


def test_lazy_refine_fills_lattice():
    s = LazyBrownianPath(np.random.default_rng(4), 1e-4)
    s.extend_forward(50.0)
    s.refine(20.0, 21.0)
    k = s.k[(s.k >= 200_000) & (s.k <= 210_000)]
    assert k.size == 10_001


def test_lazy_refinement_keeps_zero_set():
    s = LazyBrownianPath(np.random.default_rng(5), 1e-4)
    s.extend_forward(5.0)
    before = s.path().zeros()
    s.refine(0.0, s.t_max)
    after = s.path().zeros()
    assert np.array_equal(before, after)


def test_lazy_value_at_law():
    vals = []
    for i in range(1000):
        s = LazyBrownianPath(np.random.default_rng([7, i]), 1e-4)
        vals.append(s.value_at(1.0))
    assert abs(np.var(vals, ddof=1) - 1.0) < 3 * math.sqrt(2 / 999)


def test_lazy_local_time_mean_matches_uniform():
    vals = []
    for i in range(1000):
        s = LazyBrownianPath(np.random.default_rng([8, i]), 1e-4)
        s.extend_forward(1.0)
        vals.append(s.path(0.0, None).local_time(1.0))
    se = np.std(vals) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - SQRT_2_PI) < 3 * se


def test_lazy_time_cap():
    s = LazyBrownianPath(np.random.default_rng(9), 1e-4, max_time=1.0)
    with pytest.raises(HorizonError):
        s.extend_forward(5.0)
