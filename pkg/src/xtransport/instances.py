"""Random and hand-built measure pairs used by the property suites.

All generators return mutually singular ``(xi, eta)`` pairs on a shared
window.  Breakpoints and atom locations are drawn from a coarse lattice so
that ties (atoms on breakpoints, balance reached exactly at a period end)
occur with positive probability instead of never.
"""

from __future__ import annotations

import numpy as np

from .measure import HybridMeasure, periodize

__all__ = ["random_singular_pair", "periodized_pair", "remark_pair", "remark_target"]


def _pattern(rng: np.random.Generator, lo: float, hi: float, n_cells: int, n_atoms: int,
             lattice: int, allow_end_atom: bool):
    ticks = lo + (hi - lo) * np.arange(lattice + 1) / lattice
    ticks[-1] = hi
    inner = np.sort(rng.choice(np.arange(1, lattice), size=n_cells - 1, replace=False))
    pts = np.concatenate(([ticks[0]], ticks[inner], [ticks[-1]]))
    # 0: empty cell, 1: source density, 2: target density
    owner = rng.choice(3, size=n_cells, p=[0.2, 0.4, 0.4])
    dens = rng.uniform(0.2, 2.0, size=n_cells)
    xd = np.where(owner == 1, dens, 0.0)
    ed = np.where(owner == 2, dens, 0.0)
    top = lattice + 1 if allow_end_atom else lattice
    # half the atoms sit on lattice points (often breakpoints), half anywhere
    on_lattice = ticks[rng.choice(top, size=n_atoms, replace=False)]
    anywhere = rng.uniform(lo, hi, size=n_atoms)
    locs = np.where(rng.random(n_atoms) < 0.5, on_lattice, anywhere)
    locs = np.unique(locs)
    if not allow_end_atom:
        locs = locs[locs < hi]
    masses = rng.uniform(0.1, 2.0, size=locs.size)
    to_xi = rng.random(locs.size) < 0.5
    return pts, xd, ed, locs, masses, to_xi


def random_singular_pair(rng: np.random.Generator, half_width: float | None = None,
                         n_cells: int | None = None, n_atoms: int | None = None):
    """A mutually singular pair with mixed atoms and densities on ``[-L, L]``."""
    L = float(rng.uniform(2.0, 6.0)) if half_width is None else float(half_width)
    n_cells = int(rng.integers(3, 12)) if n_cells is None else n_cells
    n_atoms = int(rng.integers(1, 8)) if n_atoms is None else n_atoms
    pts, xd, ed, locs, masses, to_xi = _pattern(rng, -L, L, n_cells, n_atoms, 40, True)
    window = (-L, L)
    xi = HybridMeasure(window, pts, xd, (locs[to_xi], masses[to_xi]))
    eta = HybridMeasure(window, pts, ed, (locs[~to_xi], masses[~to_xi]))
    return xi, eta


def periodized_pair(rng: np.random.Generator, period: float = 1.0, n_periods: int = 5,
                    n_cells: int | None = None, n_atoms: int | None = None):
    """A mutually singular pair with equal mass in every period.

    One period is drawn like :func:`random_singular_pair`; the target is
    rescaled so both measures carry the same mass per period, and the pattern
    is repeated ``n_periods`` times on ``[0, n_periods * period]``.
    """
    n_cells = int(rng.integers(2, 10)) if n_cells is None else n_cells
    n_atoms = int(rng.integers(0, 6)) if n_atoms is None else n_atoms
    while True:
        pts, xd, ed, locs, masses, to_xi = _pattern(rng, 0.0, period, n_cells, n_atoms, 20, False)
        xi = HybridMeasure((0.0, period), pts, xd, (locs[to_xi], masses[to_xi]))
        eta = HybridMeasure((0.0, period), pts, ed, (locs[~to_xi], masses[~to_xi]))
        if xi.total_mass > 0 and eta.total_mass > 0:
            break
    eta = eta.scale(xi.total_mass / eta.total_mass)
    return periodize(xi, n_periods), periodize(eta, n_periods)


def remark_pair(U: float, lo: float | None = None, hi: float | None = None):
    """Lebesgue measure added to both members of a singular pair of period 3.

    The source base density is 1 on ``[i + U, i + U + 2)`` for ``i`` in
    ``3Z`` and the target base density is 2 on the remaining thirds; adding
    Lebesgue measure to both makes the pair non-singular.
    """
    lo = U - 3.0 if lo is None else lo
    hi = U + 9.0 if hi is None else hi
    ks = np.arange(np.floor((lo - U) / 3.0), np.ceil((hi - U) / 3.0) + 1)
    starts = U + 3.0 * ks
    mids = starts + 2.0
    # every node is computed once so that shared endpoints are bitwise equal
    src = [(max(s, lo), min(m, hi)) for s, m in zip(starts, mids) if m > lo and s < hi]
    tgt = [(max(m, lo), min(e, hi)) for m, e in zip(mids[:-1], starts[1:]) if e > lo and m < hi]
    window = (lo, hi)
    leb = HybridMeasure.lebesgue(window)
    xi_base = HybridMeasure.from_indicator(window, src, 1.0)
    eta_base = HybridMeasure.from_indicator(window, tgt, 2.0)
    return xi_base + leb, eta_base + leb, xi_base, eta_base


def remark_target(U: float, window) -> HybridMeasure:
    """Twice Lebesgue measure on ``[U + 2, U + 3)``."""
    return HybridMeasure.from_indicator(window, [(U + 2.0, U + 3.0)], 2.0)
