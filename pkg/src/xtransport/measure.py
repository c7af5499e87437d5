"""Hybrid measures on a bounded window of the real line.

A :class:`HybridMeasure` is the sum of a piecewise-constant density and a
finite list of atoms.  All interval queries are exact for this
representation (up to floating point rounding of the arithmetic itself).
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, PreconditionError

__all__ = [
    "HybridMeasure",
    "mass",
    "decompose",
    "shift",
    "mutually_singular",
    "periodize",
]


class HybridMeasure:
    """Piecewise-constant density plus atoms on the window ``[a, b]``.

    Parameters
    ----------
    window : (float, float)
        The closed window ``[a, b]`` with ``a < b``.
    breakpoints : array-like
        Strictly increasing, ``breakpoints[0] == a`` and ``breakpoints[-1] == b``.
    densities : array-like
        Nonnegative density on each open cell ``(x[i-1], x[i])``.
    atoms : sequence of (location, mass), optional
        Locations strictly increasing inside the window, masses positive.

    Instances are immutable; every operation returns a new measure.
    """

    __slots__ = ("window", "breakpoints", "densities", "atom_locs", "atom_masses",
                 "_cum", "_atom_cum")

    def __init__(self, window, breakpoints, densities, atoms=None, *, _check=True):
        a, b = float(window[0]), float(window[1])
        x = np.asarray(breakpoints, dtype=float)
        d = np.asarray(densities, dtype=float)
        if atoms is None or len(atoms) == 0:
            locs = np.empty(0)
            ms = np.empty(0)
        elif isinstance(atoms, tuple) and len(atoms) == 2 and isinstance(atoms[0], np.ndarray):
            locs = np.asarray(atoms[0], dtype=float)
            ms = np.asarray(atoms[1], dtype=float)
        else:
            arr = np.asarray(atoms, dtype=float).reshape(-1, 2)
            locs, ms = arr[:, 0].copy(), arr[:, 1].copy()
        if _check:
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise PreconditionError(f"window must satisfy a < b, got [{a}, {b}]")
            if x.ndim != 1 or x.size < 2 or x[0] != a or x[-1] != b:
                raise PreconditionError("breakpoints must start at a and end at b")
            if np.any(np.diff(x) <= 0):
                raise PreconditionError("breakpoints must be strictly increasing")
            if d.shape != (x.size - 1,):
                raise PreconditionError("need exactly one density per cell")
            if np.any(~np.isfinite(d)) or np.any(d < 0):
                raise PreconditionError("densities must be finite and nonnegative")
            if locs.size:
                if np.any(locs < a) or np.any(locs > b):
                    raise PreconditionError("atom outside window")
                if np.any(np.diff(locs) <= 0):
                    raise PreconditionError("atom locations must be strictly increasing")
                if np.any(~np.isfinite(ms)) or np.any(ms <= 0):
                    raise PreconditionError("atom masses must be finite and positive")
        for arr in (x, d, locs, ms):
            arr.setflags(write=False)
        self.window = (a, b)
        self.breakpoints = x
        self.densities = d
        self.atom_locs = locs
        self.atom_masses = ms
        cum = np.empty(x.size)
        cum[0] = 0.0
        np.cumsum(d * np.diff(x), out=cum[1:])
        cum.setflags(write=False)
        self._cum = cum
        acum = np.empty(ms.size + 1)
        acum[0] = 0.0
        np.cumsum(ms, out=acum[1:])
        acum.setflags(write=False)
        self._atom_cum = acum

    # -- constructors -----------------------------------------------------

    @classmethod
    def zero(cls, window) -> "HybridMeasure":
        return cls(window, [window[0], window[1]], [0.0])

    @classmethod
    def lebesgue(cls, window, density: float = 1.0) -> "HybridMeasure":
        return cls(window, [window[0], window[1]], [density])

    @classmethod
    def from_atoms(cls, window, locations, masses) -> "HybridMeasure":
        locs = np.asarray(locations, dtype=float)
        ms = np.broadcast_to(np.asarray(masses, dtype=float), locs.shape).copy()
        return cls(window, [window[0], window[1]], [0.0], (locs, ms))

    @classmethod
    def from_indicator(cls, window, intervals: Iterable[Sequence[float]],
                       density: float = 1.0) -> "HybridMeasure":
        """Density ``density`` on a union of disjoint intervals, zero elsewhere."""
        a, b = float(window[0]), float(window[1])
        pts = [a]
        vals = []
        for lo, hi in sorted((max(a, lo), min(b, hi)) for lo, hi in intervals):
            if hi <= lo:
                continue
            if lo < pts[-1]:
                raise PreconditionError("indicator intervals overlap")
            if lo > pts[-1]:
                vals.append(0.0)
                pts.append(lo)
            vals.append(density)
            pts.append(hi)
        if pts[-1] < b:
            vals.append(0.0)
            pts.append(b)
        return cls(window, pts, vals)

    # -- basic properties -------------------------------------------------

    @property
    def a(self) -> float:
        return self.window[0]

    @property
    def b(self) -> float:
        return self.window[1]

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.atom_locs.tolist(), self.atom_masses.tolist()))

    @property
    def is_diffuse(self) -> bool:
        return self.atom_locs.size == 0

    @property
    def is_atomic(self) -> bool:
        return not np.any(self.densities > 0)

    @property
    def total_mass(self) -> float:
        return float(self._cum[-1] + self._atom_cum[-1])

    def __repr__(self) -> str:
        return (f"HybridMeasure(window={self.window}, cells={self.densities.size}, "
                f"atoms={self.atom_locs.size}, mass={self.total_mass:.6g})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, HybridMeasure):
            return NotImplemented
        return (self.window == other.window
                and np.array_equal(self.breakpoints, other.breakpoints)
                and np.array_equal(self.densities, other.densities)
                and np.array_equal(self.atom_locs, other.atom_locs)
                and np.array_equal(self.atom_masses, other.atom_masses))

    __hash__ = None

    # -- queries ----------------------------------------------------------

    def _check_inside(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < self.a) or np.any(t > self.b) or np.any(np.isnan(t)):
            raise DomainError(f"query outside window {self.window}")

    def cell_index(self, t):
        """Index of the density cell containing ``t`` (right-continuous convention)."""
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        return np.clip(idx, 0, self.densities.size - 1)

    def density_at(self, t):
        return self.densities[self.cell_index(t)]

    def diffuse_cdf(self, t):
        """Diffuse mass of ``[a, t]``."""
        t = np.asarray(t, dtype=float)
        i = self.cell_index(t)
        out = self._cum[i] + self.densities[i] * (t - self.breakpoints[i])
        return out if out.ndim else float(out)

    def atoms_before(self, t, inclusive: bool = False):
        """Total atom mass at locations ``< t`` (``<= t`` if ``inclusive``)."""
        side = "right" if inclusive else "left"
        k = np.searchsorted(self.atom_locs, t, side=side)
        out = self._atom_cum[k]
        return out if np.ndim(out) else float(out)

    def atom_at(self, t):
        """Mass of the atom located exactly at ``t`` (zero if none)."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.atom_locs, t, side="left")
        kk = np.minimum(k, max(self.atom_locs.size - 1, 0))
        if self.atom_locs.size == 0:
            out = np.zeros_like(t)
        else:
            hit = (k < self.atom_locs.size) & (self.atom_locs[kk] == t)
            out = np.where(hit, self.atom_masses[kk], 0.0)
        return out if out.ndim else float(out)

    def mass(self, lo, hi, left_closed: bool = True, right_closed: bool = True):
        """Mass of the interval between ``lo`` and ``hi`` with the given endpoint flags.

        Vectorized over ``lo`` and ``hi``.  Empty intervals have mass zero.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        self._check_inside(lo)
        self._check_inside(hi)
        diffuse = self.diffuse_cdf(hi) - self.diffuse_cdf(lo)
        atomic = (self.atoms_before(hi, inclusive=right_closed)
                  - self.atoms_before(lo, inclusive=not left_closed))
        out = np.where(hi >= lo, np.maximum(diffuse + atomic, 0.0), 0.0)
        return out if out.ndim else float(out)

    # -- transformations --------------------------------------------------

    def decompose(self) -> tuple["HybridMeasure", "HybridMeasure"]:
        diffuse = HybridMeasure(self.window, self.breakpoints, self.densities, _check=False)
        atomic = HybridMeasure(self.window, [self.a, self.b], [0.0],
                               (self.atom_locs.copy(), self.atom_masses.copy()), _check=False)
        return diffuse, atomic

    def shift(self, t: float) -> "HybridMeasure":
        """The measure ``C -> mu(C + t)``; the window moves to ``[a - t, b - t]``."""
        t = float(t)
        return HybridMeasure((self.a - t, self.b - t), self.breakpoints - t, self.densities,
                             (self.atom_locs - t, self.atom_masses.copy()))

    def scale(self, c: float) -> "HybridMeasure":
        if c < 0:
            raise PreconditionError("scale factor must be nonnegative")
        if c == 0:
            return HybridMeasure.zero(self.window)
        return HybridMeasure(self.window, self.breakpoints, self.densities * c,
                             (self.atom_locs.copy(), self.atom_masses * c), _check=False)

    def restrict(self, lo: float, hi: float) -> "HybridMeasure":
        """Restriction to the sub-window ``[lo, hi]`` (atoms at both ends kept)."""
        self._check_inside([lo, hi])
        if not lo < hi:
            raise PreconditionError("restriction needs lo < hi")
        x = self.breakpoints
        inner = x[(x > lo) & (x < hi)]
        pts = np.concatenate(([lo], inner, [hi]))
        dens = self.densities[self.cell_index(0.5 * (pts[:-1] + pts[1:]))]
        keep = (self.atom_locs >= lo) & (self.atom_locs <= hi)
        return HybridMeasure((lo, hi), pts, dens,
                             (self.atom_locs[keep], self.atom_masses[keep]), _check=False)

    def on_grid(self, points) -> np.ndarray:
        """Densities of this measure on the cells of a refinement ``points`` of its grid."""
        pts = np.asarray(points, dtype=float)
        return self.densities[self.cell_index(0.5 * (pts[:-1] + pts[1:]))]

    def __add__(self, other: "HybridMeasure") -> "HybridMeasure":
        if not isinstance(other, HybridMeasure):
            return NotImplemented
        if self.window != other.window:
            raise PreconditionError("can only add measures on the same window")
        pts = np.union1d(self.breakpoints, other.breakpoints)
        dens = self.on_grid(pts) + other.on_grid(pts)
        locs = np.concatenate((self.atom_locs, other.atom_locs))
        ms = np.concatenate((self.atom_masses, other.atom_masses))
        order = np.argsort(locs, kind="stable")
        locs, ms = locs[order], ms[order]
        if locs.size:
            uniq, start = np.unique(locs, return_index=True)
            ms = np.add.reduceat(ms, start)
            locs = uniq
        return HybridMeasure(self.window, pts, dens, (locs, ms), _check=False)

    def simplify(self) -> "HybridMeasure":
        """Merge adjacent cells carrying equal density."""
        d = self.densities
        keep = np.ones(self.breakpoints.size, dtype=bool)
        keep[1:-1] = d[1:] != d[:-1]
        pts = self.breakpoints[keep]
        dens = d[np.flatnonzero(keep[:-1])]
        return HybridMeasure(self.window, pts, dens,
                             (self.atom_locs.copy(), self.atom_masses.copy()), _check=False)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "window": [self.a, self.b],
            "breakpoints": self.breakpoints.tolist(),
            "densities": self.densities.tolist(),
            "atoms": [[t, m] for t, m in self.atoms],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HybridMeasure":
        return cls(data["window"], data["breakpoints"], data["densities"],
                   data.get("atoms") or None)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HybridMeasure":
        return cls.from_dict(json.loads(text))


def mass(mu: HybridMeasure, lo, hi, left_closed: bool = True, right_closed: bool = True):
    return mu.mass(lo, hi, left_closed, right_closed)


def decompose(mu: HybridMeasure) -> tuple[HybridMeasure, HybridMeasure]:
    return mu.decompose()


def shift(mu: HybridMeasure, t: float) -> HybridMeasure:
    return mu.shift(t)


def mutually_singular(mu: HybridMeasure, nu: HybridMeasure, tol: float = 0.0) -> bool:
    """Whether ``mu`` and ``nu`` are concentrated on disjoint sets.

    Two sources of common mass are possible in this representation: cells on
    which both densities are positive, and atoms placed at the same location.
    The check passes when the common mass, measured under either measure,
    does not exceed ``tol``.
    """
    if mu.window != nu.window:
        raise PreconditionError("mutual singularity is checked on a shared window")
    pts = np.union1d(mu.breakpoints, nu.breakpoints)
    dm = mu.on_grid(pts)
    dn = nu.on_grid(pts)
    both = (dm > 0) & (dn > 0)
    widths = np.diff(pts)
    overlap = max(float(np.sum((dm * widths)[both])), float(np.sum((dn * widths)[both])))
    common, im, inn = np.intersect1d(mu.atom_locs, nu.atom_locs, return_indices=True)
    if common.size:
        overlap = max(overlap, float(mu.atom_masses[im].sum()), float(nu.atom_masses[inn].sum()))
    return overlap <= tol


def periodize(mu: HybridMeasure, n_periods: int) -> HybridMeasure:
    """Repeat ``mu`` (one period on its window) ``n_periods`` times to the right.

    Atoms at the right end of the window would collide with the next copy and
    are rejected.
    """
    if n_periods < 1:
        raise PreconditionError("need at least one period")
    a, b = mu.window
    p = b - a
    if mu.atom_locs.size and mu.atom_locs[-1] >= b:
        raise PreconditionError("periodized measures cannot carry an atom at the window end")
    k = np.arange(n_periods)
    inner = mu.breakpoints[:-1]
    pts = np.concatenate([(inner + j * p) for j in k] + [[a + n_periods * p]])
    dens = np.tile(mu.densities, n_periods)
    locs = np.concatenate([mu.atom_locs + j * p for j in k]) if mu.atom_locs.size else np.empty(0)
    ms = np.tile(mu.atom_masses, n_periods)
    return HybridMeasure((a, a + n_periods * p), pts, dens, (locs, ms))
