import math

import numpy as np
import pytest

from oracles import (
    bismut_mean_lifetime_in,
    ito_mean_lifetime_in,
    nu_lifetime_gt,
    nu_lifetime_in,
    nu_prime_lifetime_in,
)
from xtransport.brownian import LazyBrownianPath
from xtransport.embedding import (
    CSV_COLUMNS,
    embed_bismut,
    embed_ito,
    embed_naive,
    path_functionals,
    reference_sample,
    run_replicate,
    shift_coupling_NA_to_NpA,
)
from xtransport.errors import HarvestError, HorizonError, PreconditionError
from xtransport.excursion import ExcursionPool, harvest_lazy, lifetime_gt, lifetime_in
from xtransport.measure import HybridMeasure
from xtransport.transport import BalanceScanner

A_TAIL = lifetime_gt(0.01)
A_WIN = lifetime_in(0.01, 1.0)
NU = nu_lifetime_gt(0.01)
NU_WIN = nu_lifetime_in(0.01, 1.0)
NUP_WIN = nu_prime_lifetime_in(0.01, 1.0)


def sampler(*key):
    return LazyBrownianPath(np.random.default_rng(list(key)), 1e-4)


def completed(embed, seed, n, *args, **kwargs):
    """``n`` outcomes of ``embed`` on fresh samplers, skipping replicates that hit a cap.

    The balance time is heavy tailed, so a few replicates run into the local
    time or time cap; the experiments record those as discards.
    """
    out, tried = [], 0
    while len(out) < n:
        try:
            out.append(embed(sampler(seed, tried), *args, **kwargs))
        except HorizonError:
            pass
        tried += 1
        assert tried <= n + max(3, n // 10), "too many capped replicates"
    return out


def test_toy_balance_point_is_the_atom():
    ell = HybridMeasure.lebesgue((0.0, 3.0))
    NA = HybridMeasure.from_atoms((0.0, 3.0), [1.0], [2.0])
    T = BalanceScanner(ell, NA).tau(0.0)[0]
    assert T == 1.0


@pytest.fixture(scope="module")
def ito_outcomes():
    return completed(embed_ito, 40, 25, A_TAIL, NU, keep_path=True)


def test_ito_lands_on_an_A_excursion_start(ito_outcomes):
    for o in ito_outcomes:
        assert o.on_atom and o.origin_in_A
        assert o.origin_lifetime > 0.01
        assert o.shift == o.T
        tab = o.path.excursion_table()
        assert 0.0 in tab.start.tolist()
        assert o.snap_distance <= 1e-4


def test_ito_outcome_fields(ito_outcomes):
    o = ito_outcomes[0]
    row = o.to_row()
    assert set(CSV_COLUMNS) - {"seed"} <= set(row)
    assert "path" not in row
    assert o.local_time_to_T >= 0.0
    assert o.backward_local_time > 0.0
    assert o.backward_max >= max(0.0, o.backward_value)
    assert o.path.t_min <= -1.0 and o.path.t_max >= o.origin_lifetime + 1.0


def test_functionals_recomputed_from_shifted_path(ito_outcomes):
    o = ito_outcomes[1]
    vals = path_functionals(o.path, A_TAIL)
    assert vals["origin_lifetime"] == pytest.approx(o.origin_lifetime)
    assert vals["backward_max"] == pytest.approx(o.backward_max)
    assert vals["forward_value"] == pytest.approx(o.forward_value)


def test_path_functionals_need_an_excursion_at_the_origin(ito_outcomes):
    p = ito_outcomes[2].path.shift(0.5 * ito_outcomes[2].origin_lifetime, snap=True)
    with pytest.raises(PreconditionError):
        path_functionals(p, A_TAIL)


def test_naive_takes_first_A_excursion():
    for i in range(10):
        s = sampler(41, i)
        o = embed_naive(s, A_TAIL)
        assert o.origin_in_A and o.T >= 0.0
        tab = s.path().excursion_table()
        starts = tab.start[A_TAIL.mask(tab) & (tab.start >= 0.0)]
        assert o.T == starts[0]


def test_bismut_shifts_to_start_of_straddling_excursion():
    for o in completed(embed_bismut, 42, 10, A_WIN, NUP_WIN):
        assert o.origin_in_A
        assert o.shift <= o.T <= o.shift + o.origin_lifetime
        assert 0.01 < o.origin_lifetime < 1.0


def test_bismut_rejects_unbounded_window():
    with pytest.raises(PreconditionError):
        embed_bismut(sampler(43), A_TAIL, 1.0)


def test_shift_coupling_with_u_zero_stays_at_the_atom():
    T0 = embed_ito(sampler(44, 1), A_WIN, NU_WIN).T
    o = shift_coupling_NA_to_NpA(sampler(44, 1), A_WIN, 0.0, NU_WIN, NUP_WIN)
    assert o.T == T0
    assert o.origin_in_A


def test_shift_coupling_lands_in_A_excursions():
    for u in (0.2, 0.5, 0.9):
        for o in completed(shift_coupling_NA_to_NpA, 45, 4, A_WIN, u, NU_WIN, NUP_WIN):
            assert o.origin_in_A


def test_shift_coupling_validates_u():
    with pytest.raises(PreconditionError):
        shift_coupling_NA_to_NpA(sampler(46), A_WIN, 1.5, NU_WIN, NUP_WIN)


def test_discards_are_reported_not_raised():
    out = run_replicate("ito", np.random.default_rng(47), A_TAIL, nu_A_hat=NU, max_time=0.05)
    assert out.discarded and "cap" in out.reason
    assert math.isnan(out.T)
    with pytest.raises(PreconditionError):
        run_replicate("nonsense", np.random.default_rng(47), A_TAIL)


def test_replicates_are_deterministic():
    a = run_replicate("ito", np.random.default_rng([48, 0]), A_TAIL, nu_A_hat=NU).to_row()
    b = run_replicate("ito", np.random.default_rng([48, 0]), A_TAIL, nu_A_hat=NU).to_row()
    assert a == b


def test_reference_sample_structure():
    pool = harvest_lazy([49], A_TAIL, 3)
    rng = np.random.default_rng(50)
    for _ in range(3):
        ref = reference_sample(pool, A_TAIL, rng)
        assert A_TAIL(ref.excursion)
        assert ref.origin_lifetime == pytest.approx(ref.excursion.lifetime)
        assert ref.path.value_at(0.0) == 0.0
        assert ref.backward_local_time > 0.0
    with pytest.raises(HarvestError):
        reference_sample(pool, A_TAIL, rng)


def test_reference_sample_rejects_foreign_pool():
    pool = ExcursionPool(A_TAIL, 1e-4, harvest_lazy([51], lifetime_gt(0.001), 20).excursions)
    short = [e for e in pool.excursions if e.lifetime < 0.01]
    assert short, "seed should yield a short excursion"
    with pytest.raises(PreconditionError):
        reference_sample(ExcursionPool(A_TAIL, 1e-4, short), A_TAIL, np.random.default_rng(0))


def test_bismut_mean_lifetime_exceeds_ito():
    a, b = 0.01, 1.0
    assert bismut_mean_lifetime_in(a, b) > 3 * ito_mean_lifetime_in(a, b)
    ito = [o.origin_lifetime for o in completed(embed_ito, 52, 60, A_WIN, NU_WIN)]
    bis = [o.origin_lifetime for o in completed(embed_bismut, 53, 60, A_WIN, NUP_WIN)]
    assert np.mean(bis) > np.mean(ito)
    # both means within four standard errors of their closed forms
    for x, m in ((ito, ito_mean_lifetime_in(a, b)), (bis, bismut_mean_lifetime_in(a, b))):
        assert abs(np.mean(x) - m) < 4 * np.std(x) / math.sqrt(len(x))
