"""Embedding an extra excursion into a Brownian path by shifting to a random time.

Four shifts are provided:

* :func:`embed_ito` moves the origin to the first time where the local time
  at zero has been matched by the ``A``-excursion counting measure ``N_A``;
  the result looks like an independent excursion from ``nu(. | A)`` placed
  between two independent Brownian half-paths.
* :func:`embed_naive` moves to the first ``A``-excursion after 0; the
  excursion has the right law but the past is biased.
* :func:`embed_bismut` matches local time against the time spent inside
  ``A``-excursions (``N'_A``) and shifts to the last zero before the match,
  which picks a length-biased ``A``-excursion.
* :func:`shift_coupling_NA_to_NpA` starts from the Itô embedding and
  transports the atom at the origin into ``N'_A`` with a uniform split
  variable ``u``.

Every function consumes a :class:`~xtransport.brownian.LazyBrownianPath`
and grows it until the target time is found or a cap is hit.  Caps raise
:class:`~xtransport.errors.HorizonError`; :func:`run_replicate` turns that
into a discarded outcome so it is counted rather than dropped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .brownian import Excursion, GridPath, LazyBrownianPath, concatenate
from .errors import HorizonError, PreconditionError
from .excursion import (
    ExcursionPool,
    ExcursionPredicate,
    build_N_A,
    build_N_prime_A,
    next_excursion,
    overlap_mass,
)
from .measure import HybridMeasure
from .transport import INFINITE, BalanceScanner

__all__ = [
    "EmbeddingOutcome",
    "ReferenceSample",
    "path_functionals",
    "embed_ito",
    "embed_naive",
    "embed_bismut",
    "shift_coupling_NA_to_NpA",
    "reference_sample",
    "run_replicate",
    "CSV_COLUMNS",
]

NAN = math.nan
CSV_COLUMNS = ("seed", "T", "origin_lifetime", "backward_local_time", "discarded")


@dataclass
class EmbeddingOutcome:
    """What a single embedding replicate produced.

    ``T`` is the allocation time; ``shift`` is where the origin is moved
    (``T`` itself except for the Bismut shift, which uses the last zero
    before ``T``).  The functionals describe the shifted path:

    ``origin_lifetime``
        Lifetime of the excursion at the new origin.
    ``backward_local_time``
        Local time between the last ``A``-excursion start before the origin
        and the origin.
    ``backward_max`` / ``backward_value``
        ``max B`` over ``[-1, 0]`` and ``B(-1)``.
    ``forward_value``
        ``B(D + 1)`` where ``D`` is the origin lifetime.
    """

    method: str
    T: float = NAN
    shift: float = NAN
    grid_time: float = NAN
    snap_distance: float = NAN
    origin_lifetime: float = NAN
    backward_local_time: float = NAN
    backward_max: float = NAN
    backward_value: float = NAN
    forward_value: float = NAN
    local_time_to_T: float = NAN
    u: float = NAN
    on_atom: bool = False
    origin_in_A: bool = False
    overlap_fraction: float = 0.0
    nodes: int = 0
    discarded: bool = False
    reason: str = ""
    path: GridPath | None = None

    def to_row(self) -> dict:
        d = asdict(self)
        d.pop("path")
        return d


@dataclass
class ReferenceSample:
    """A draw from the product law: backward Brownian path, excursion, forward Brownian path."""

    path: GridPath
    excursion: Excursion
    origin_lifetime: float
    backward_local_time: float
    backward_max: float
    backward_value: float
    forward_value: float


def path_functionals(path: GridPath, A: ExcursionPredicate, estimator=None) -> dict:
    """Functionals of a path whose origin is the left end of an excursion.

    The path must contain ``[-1, D + 1]`` with every lattice value on
    ``[-1, 0]``, the lattice neighbours of ``D + 1`` and the whole stretch
    back to the previous ``A``-excursion start.
    """
    tab = path.excursion_table()
    i = int(np.searchsorted(tab.start, 0.0))
    if i >= len(tab) or tab.start[i] != 0.0:
        raise PreconditionError("path origin is not the left end of an excursion")
    D = float(tab.lifetime[i])
    back = np.flatnonzero(A.mask(tab) & (tab.start < 0.0))
    if back.size == 0:
        raise HorizonError("no A-excursion before the origin within the path")
    s_prev = float(tab.start[back[-1]])
    mu = path.local_time_measure(estimator)
    seg = (path.times >= -1.0) & (path.times <= 0.0)
    return {
        "origin_lifetime": D,
        "origin_in_A": bool(A.mask(tab.take(slice(i, i + 1)))[0]),
        "backward_local_time": float(mu.mass(s_prev, 0.0, False, True)),
        "backward_max": float(np.max(path.values[seg])),
        "backward_value": float(path.value_at(-1.0)),
        "forward_value": float(path.value_at(D + 1.0)),
    }


def _functionals_at(sampler: LazyBrownianPath, origin: float, D: float, A: ExcursionPredicate,
                    estimator, keep_path: bool) -> tuple[dict, GridPath, float]:
    """Refine around ``origin``, shift there and evaluate :func:`path_functionals`."""
    step = sampler.step
    sampler.refine(origin - 1.0, origin)
    t_fwd = origin + D + 1.0
    k = math.floor(t_fwd / step)
    sampler.refine(k * step, (k + 1) * step)
    blocks = 1
    while True:
        full = sampler.path()
        tab = full.excursion_table()
        before = np.flatnonzero(A.mask(tab) & (tab.start < origin))
        if before.size:
            break
        for _ in range(blocks):
            sampler.extend_backward()
        blocks *= 2
    # only the stretch the functionals need; far-away times would lose precision in the shift
    lo = min(float(tab.start[before[-1]]), origin - 1.0)
    i0 = max(int(np.searchsorted(full.times, lo, side="left")) - 1, 0)
    i1 = min(int(np.searchsorted(full.times, t_fwd, side="right")), full.times.size - 1)
    near = full.restrict(full.times[i0], full.times[i1])
    shifted = near.with_zeros().shift(origin, snap=True)
    vals = path_functionals(shifted, A, estimator)
    grid = round(origin / step) * step
    if keep_path:
        lo = max(shifted.t_min, -1.0 - step)
        shifted = shifted.restrict(lo, min(shifted.t_max, D + 1.0 + step))
    return vals, shifted, grid


def _zero_window(sampler: LazyBrownianPath, start: float):
    """Path covering ``[start, z]`` for the last zero ``z``, or ``None`` if too short.

    Crossings are nodes.  One extra node is kept on each side so that the
    cells cut at ``start`` and ``z`` keep their local time.
    """
    path = sampler.path().with_zeros()
    z = path.zeros()
    z = z[z > start]
    if z.size == 0:
        return None
    t = path.times
    lo = t[max(int(np.searchsorted(t, start, side="left")) - 1, 0)]
    hi = t[min(int(np.searchsorted(t, z[-1], side="right")), t.size - 1)]
    return path.restrict(lo, hi), float(z[-1])


def _allocate(sampler, source, target, start, local_time_cap, u=None):
    """Grow the path until ``tau`` (or ``tau_u``) from ``start`` is finite."""
    while True:
        window = _zero_window(sampler, start)
        if window is not None:
            W, end = window
            xi, eta = source(W), target(W)
            scan = BalanceScanner(xi, eta)
            if u is None:
                T = float(scan.tau(start, end)[0])
            else:
                T = float(scan.tau_u(start, u, end)[0])
            if T != INFINITE:
                return T, W, xi, eta
            realized = float(W.local_time_measure().mass(start, end))
            if local_time_cap is not None and realized > local_time_cap:
                raise HorizonError("local time cap reached before the balance point")
            # rescan only after the local time has doubled, so the total scan cost stays linear
            sampler.extend_local_time(max(1.0, realized))
        else:
            sampler.extend_forward()


def _overlap(path: GridPath, xi: HybridMeasure, eta: HybridMeasure) -> float:
    total = xi.total_mass
    return overlap_mass(path, xi, eta) / total if total > 0 else 0.0


def embed_ito(sampler: LazyBrownianPath, A: ExcursionPredicate, nu_A_hat: float,
              local_time_cap: float | None = 2000.0, estimator=None,
              keep_path: bool = False) -> EmbeddingOutcome:
    """Shift to ``T = inf{t > 0 : l[0, t] <= N_A[0, t]}``."""
    T, W, xi, eta = _allocate(sampler, lambda p: p.local_time_measure(estimator),
                              lambda p: build_N_A(p, A, nu_A_hat), 0.0, local_time_cap)
    on_atom = bool(eta.atom_at(T) > 0)
    tab = W.excursion_table()
    i = int(np.searchsorted(tab.start, T))
    if not on_atom or i >= len(tab) or tab.start[i] != T:
        raise PreconditionError("balance point is not the left end of an A-excursion")
    D = float(tab.lifetime[i])
    vals, shifted, grid = _functionals_at(sampler, T, D, A, estimator, keep_path)
    return EmbeddingOutcome("ito", T=T, shift=T, grid_time=grid, snap_distance=shifted.snap_distance,
                            local_time_to_T=float(xi.mass(0.0, T)), on_atom=on_atom,
                            nodes=sampler.node_count, path=shifted if keep_path else None, **vals)


def embed_naive(sampler: LazyBrownianPath, A: ExcursionPredicate, estimator=None,
                keep_path: bool = False) -> EmbeddingOutcome:
    """Shift to the first ``A``-excursion starting at time ``>= 0``."""
    path, j = next_excursion(sampler, A, 0.0)
    tab = path.excursion_table()
    S = float(tab.start[j])
    D = float(tab.lifetime[j])
    vals, shifted, grid = _functionals_at(sampler, S, D, A, estimator, keep_path)
    lt = float(path.local_time_measure(estimator).mass(0.0, S)) if S > 0 else 0.0
    return EmbeddingOutcome("naive", T=S, shift=S, grid_time=grid,
                            snap_distance=shifted.snap_distance, local_time_to_T=lt,
                            on_atom=True, nodes=sampler.node_count,
                            path=shifted if keep_path else None, **vals)


def embed_bismut(sampler: LazyBrownianPath, A: ExcursionPredicate, nu_prime_A_hat: float,
                 local_time_cap: float | None = 2000.0, estimator=None,
                 keep_path: bool = False) -> EmbeddingOutcome:
    """Shift to ``G_T`` for ``T = inf{t > 0 : l[0, t] <= N'_A[0, t]}``."""
    if not A.has_finite_bismut_mass:
        raise PreconditionError("the Bismut embedding needs a bounded lifetime window")
    T, W, xi, eta = _allocate(sampler, lambda p: p.local_time_measure(estimator),
                              lambda p: build_N_prime_A(p, A, nu_prime_A_hat), 0.0,
                              local_time_cap)
    tab = W.excursion_table()
    i = W.excursion_at(T)
    if i < 0:
        raise PreconditionError("balance point is not inside an excursion")
    G_T = float(tab.start[i])
    D = float(tab.lifetime[i])
    vals, shifted, grid = _functionals_at(sampler, G_T, D, A, estimator, keep_path)
    return EmbeddingOutcome("bismut", T=T, shift=G_T, grid_time=grid,
                            snap_distance=shifted.snap_distance,
                            local_time_to_T=float(xi.mass(0.0, T)), on_atom=False,
                            overlap_fraction=_overlap(W, xi, eta), nodes=sampler.node_count,
                            path=shifted if keep_path else None, **vals)


def shift_coupling_NA_to_NpA(sampler: LazyBrownianPath, A: ExcursionPredicate, u: float,
                             nu_A_hat: float, nu_prime_A_hat: float,
                             local_time_cap: float | None = 2000.0,
                             estimator=None) -> EmbeddingOutcome:
    """From the Itô embedding time ``T0``, apply ``tau_u`` from ``N_A`` into ``N'_A``.

    The returned ``T`` is the absolute time ``T0 + T^u``; the origin
    excursion is the one straddling it.
    """
    if not 0.0 <= u <= 1.0:
        raise PreconditionError("u must lie in [0, 1]")
    first = embed_ito(sampler, A, nu_A_hat, local_time_cap, estimator)
    T0 = first.T
    T, W, _, _ = _allocate(sampler, lambda p: build_N_A(p, A, nu_A_hat),
                           lambda p: build_N_prime_A(p, A, nu_prime_A_hat), T0,
                           local_time_cap, u=u)
    tab = W.excursion_table()
    i = W.excursion_at(T)
    if i < 0:
        raise PreconditionError("coupled time is not inside an excursion")
    in_A = bool(A.mask(tab.take(slice(i, i + 1)))[0])
    return EmbeddingOutcome("shift_coupling", T=T, shift=T,
                            grid_time=round(T / sampler.step) * sampler.step,
                            snap_distance=abs(round(T / sampler.step) * sampler.step - T),
                            origin_lifetime=float(tab.lifetime[i]), origin_in_A=in_A,
                            backward_local_time=first.backward_local_time,
                            local_time_to_T=first.local_time_to_T, u=u, on_atom=first.on_atom,
                            nodes=sampler.node_count)


def reference_sample(pool: ExcursionPool, A: ExcursionPredicate, rng: np.random.Generator,
                     step: float | None = None, tol: float = 1e-10,
                     estimator=None) -> ReferenceSample:
    """Backward Brownian path, the next pooled excursion and a forward Brownian path.

    The backward piece is a fresh forward simulation reflected in time and
    grown until it contains an ``A``-excursion, so the local time back to the
    previous ``A``-excursion is available.
    """
    step = pool.step if step is None else step
    e = pool.take()
    if not A(e):
        raise PreconditionError("pooled excursion does not satisfy the predicate")
    back = LazyBrownianPath(rng, step, tol)
    back.refine(0.0, 1.0)
    next_excursion(back, A, 0.0)
    fwd = LazyBrownianPath(rng, step, tol)
    fwd.refine(1.0 - step, 1.0 + step)
    w1 = back.path().with_zeros().reflect()
    w3 = fwd.path().with_zeros()
    path = concatenate(w1, e, w3)
    vals = path_functionals(path, A, estimator)
    vals.pop("origin_in_A")
    return ReferenceSample(path, e, **vals)


def run_replicate(method: str, rng: np.random.Generator, A: ExcursionPredicate, *,
                  step: float = 1e-4, nu_A_hat: float | None = None,
                  nu_prime_A_hat: float | None = None, tol: float = 1e-10,
                  local_time_cap: float | None = 2000.0, max_time: float = 1e9,
                  estimator=None) -> EmbeddingOutcome:
    """One replicate of ``method`` on a fresh lazy path; caps become discards."""
    sampler = LazyBrownianPath(rng, step, tol, max_time=max_time)
    try:
        if method == "ito":
            return embed_ito(sampler, A, nu_A_hat, local_time_cap, estimator)
        if method == "naive":
            return embed_naive(sampler, A, estimator)
        if method == "bismut":
            return embed_bismut(sampler, A, nu_prime_A_hat, local_time_cap, estimator)
        if method == "shift_coupling":
            u = float(rng.random())
            return shift_coupling_NA_to_NpA(sampler, A, u, nu_A_hat, nu_prime_A_hat,
                                            local_time_cap, estimator)
    except HorizonError as exc:
        return EmbeddingOutcome(method, discarded=True, reason=str(exc),
                                nodes=sampler.node_count)
    raise PreconditionError(f"unknown embedding method {method!r}")
