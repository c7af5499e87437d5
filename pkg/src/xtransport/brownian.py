"""Two-sided Brownian paths on a lattice, local time at zero and excursions.

Paths are polylines through lattice values ``B(k * step)``.  Two producers
exist:

* :func:`simulate` draws every lattice value on ``[-T, T]`` at once;
* :class:`LazyBrownianPath` grows the path on demand in both directions and
  only realizes the lattice values that matter near the zero set.  A stretch
  of the lattice is left unrealized while the probability that the bridge
  between its realized ends comes close to zero is below ``tol``; gaps can be
  filled later by bridge sampling, so the joint law of all realized values is
  exactly that of the lattice random walk.

Everything downstream (zero set, excursions, local time) works on a
:class:`GridPath`, which accepts irregular node spacing.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, erfcx

from .errors import DomainError, HorizonError, PreconditionError
from .measure import HybridMeasure

__all__ = [
    "ZERO_SNAP",
    "GridPath",
    "Excursion",
    "ExcursionTable",
    "LazyBrownianPath",
    "simulate",
    "bridge_local_time",
    "sample_bridge_local_time",
    "cell_uniforms",
    "occupation_calibration",
    "local_time",
    "local_time_measure",
    "excursions",
    "excursion_table",
    "shift_path",
    "time_reverse",
    "concatenate",
    "first_A_excursion_time",
    "last_before_zero",
    "G",
    "D",
]

ZERO_SNAP = 1e-12
_MAGIC = b"XTPATH01"
_HEADER = struct.Struct("<8sdqqq")
# cells whose bridge is this unlikely (log scale) to reach zero carry no local time
_LT_CUTOFF = 40.0


def _snapped(v: np.ndarray) -> np.ndarray:
    return np.where(np.abs(v) < ZERO_SNAP, 0.0, v)


@dataclass(frozen=True)
class Excursion:
    """A path piece leaving zero at ``start`` and returning after ``lifetime``.

    ``times`` are relative to ``start`` and run from ``0`` to ``lifetime``;
    the first and last values are exactly zero.
    """

    start: float
    times: np.ndarray
    values: np.ndarray
    lifetime: float
    sign: int = 1
    cell_local_time: np.ndarray | None = None

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    @classmethod
    def minimal(cls, step: float) -> "Excursion":
        """The degenerate excursion of one lattice step with zero height."""
        return cls(0.0, np.array([0.0, step]), np.array([0.0, 0.0]), step, 0)


@dataclass(frozen=True)
class ExcursionTable:
    """Columns describing every complete excursion of a path.

    ``node_lo:node_hi`` indexes the path nodes strictly inside the excursion.
    """

    start: np.ndarray
    end: np.ndarray
    sign: np.ndarray
    max_abs: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray

    @property
    def lifetime(self) -> np.ndarray:
        return self.end - self.start

    def __len__(self) -> int:
        return int(self.start.size)

    def take(self, mask) -> "ExcursionTable":
        return ExcursionTable(*(getattr(self, f)[mask] for f in
                                ("start", "end", "sign", "max_abs", "node_lo", "node_hi")))


class GridPath:
    """A continuous path given by its values at increasing node times.

    Between nodes the path is linear.  ``step`` is the lattice spacing the
    nodes were drawn on; uniform paths have a node at every lattice point.

    Parameters
    ----------
    times, values : array-like
        Node times (strictly increasing) and path values.
    step : float
        Lattice spacing.
    mode : {"gaussian", "random_walk"}
        How the lattice values were generated.
    snap_distance : float
        Distance by which the last shift was moved to reach a node.
    cell_local_time : array-like, optional
        Local time at zero accumulated in each cell ``[t_i, t_{i+1}]``,
        drawn together with the path.  Used by the ``"sampled"`` estimator.
    """

    def __init__(self, times, values, step: float, mode: str = "gaussian",
                 snap_distance: float = 0.0, _check: bool = True, cell_local_time=None):
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        cl = None if cell_local_time is None else np.asarray(cell_local_time, dtype=float)
        if _check:
            if cl is not None and cl.shape != (max(t.size - 1, 0),):
                raise PreconditionError("cell_local_time needs one entry per cell")
            if t.ndim != 1 or t.shape != v.shape or t.size < 2:
                raise PreconditionError("times and values must be matching 1-d arrays")
            if np.any(np.diff(t) <= 0):
                raise PreconditionError("node times must be strictly increasing")
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(t))):
                raise PreconditionError("path values must be finite")
            if step <= 0:
                raise PreconditionError("step must be positive")
            if mode not in ("gaussian", "random_walk"):
                raise PreconditionError(f"unknown mode {mode!r}")
        t.setflags(write=False)
        v.setflags(write=False)
        if cl is not None:
            cl.setflags(write=False)
        self.times = t
        self.values = v
        self.cell_local_time = cl
        self.step = float(step)
        self.mode = mode
        self.snap_distance = float(snap_distance)
        self._table = None

    def __repr__(self) -> str:
        return (f"GridPath(nodes={self.times.size}, range=[{self.t_min:.6g}, {self.t_max:.6g}], "
                f"step={self.step:g}, mode={self.mode!r})")

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    @property
    def is_uniform(self) -> bool:
        gaps = np.diff(self.times)
        return bool(np.allclose(gaps, self.step, rtol=1e-9, atol=0.0))

    def origin_index(self) -> int:
        i = int(np.searchsorted(self.times, 0.0))
        if i >= self.times.size or self.times[i] != 0.0:
            raise DomainError("time 0 is not a node of this path")
        return i

    def value_at(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_min) or np.any(t > self.t_max):
            raise DomainError(f"time outside [{self.t_min}, {self.t_max}]")
        out = np.interp(t, self.times, self.values)
        return out if out.ndim else float(out)

    # -- zero set and excursions -------------------------------------------

    def _zero_cells(self, v: np.ndarray) -> np.ndarray:
        """Cells with a zero strictly inside: sign changes, and, when the path
        carries sampled local time, same-sign cells whose local time is positive
        (the bridge touched zero)."""
        prod = v[:-1] * v[1:]
        hit = prod < 0
        if self.cell_local_time is not None:
            hit |= (prod > 0) & (self.cell_local_time > 0)
        return np.flatnonzero(hit)

    def zeros(self) -> np.ndarray:
        """Zero times: exact zero nodes, linearly interpolated sign changes and
        sampled touches (placed like a crossing of ``|B|``)."""
        v = _snapped(self.values)
        t = self.times
        exact = t[v == 0.0]
        cross = self._zero_cells(v)
        x, y = np.abs(v[cross]), np.abs(v[cross + 1])
        tc = t[cross] + (t[cross + 1] - t[cross]) * (x / (x + y))
        return np.union1d(exact, tc)

    def excursion_table(self) -> ExcursionTable:
        if self._table is None:
            self._table = _build_table(self)
        return self._table

    def excursions(self) -> list[Excursion]:
        tab = self.excursion_table()
        return [self.excursion(i) for i in range(len(tab))]

    def excursion(self, i: int) -> Excursion:
        tab = self.excursion_table()
        s, e = float(tab.start[i]), float(tab.end[i])
        lo, hi = int(tab.node_lo[i]), int(tab.node_hi[i])
        times = np.concatenate(([0.0], self.times[lo:hi] - s, [e - s]))
        values = np.concatenate(([0.0], self.values[lo:hi], [0.0]))
        # nodes that coincide with an interpolated end collapse onto it
        keep = np.concatenate(([True], np.diff(times) > 0))
        times, values = times[keep], values[keep]
        cells = None
        if self.cell_local_time is not None:
            mu = self.local_time_measure("sampled")
            cells = np.asarray(mu.mass(s + times[:-1], s + times[1:]))
        return Excursion(s, times, values, e - s, int(tab.sign[i]), cells)

    def excursion_at(self, t: float) -> int:
        """Index of the excursion whose interval ``[start, end)`` contains ``t`` (-1 if none)."""
        tab = self.excursion_table()
        i = int(np.searchsorted(tab.start, t, side="right")) - 1
        if i >= 0 and t < tab.end[i]:
            return i
        return -1

    # -- local time ----------------------------------------------------------

    def local_time_measure(self, estimator: str | None = None, eps: float | None = None,
                           calibration: float | None = None) -> HybridMeasure:
        return local_time_measure(self, estimator, eps, calibration)

    def local_time(self, t: float, estimator: str | None = None) -> float:
        """``l[0, t]`` (or ``l[t, 0]`` for negative ``t``)."""
        mu = self.local_time_measure(estimator)
        lo, hi = sorted((0.0, float(t)))
        return float(mu.mass(lo, hi))

    # -- transformations -----------------------------------------------------

    def with_zeros(self) -> "GridPath":
        """Same polyline with every interpolated zero (see :meth:`zeros`) inserted as a node."""
        v = _snapped(self.values)
        cross = self._zero_cells(v)
        if cross.size == 0:
            return GridPath(self.times, v, self.step, self.mode, self.snap_distance, _check=False,
                            cell_local_time=self.cell_local_time)
        x, y = np.abs(v[cross]), np.abs(v[cross + 1])
        h = self.times[cross + 1] - self.times[cross]
        tc = self.times[cross] + h * (x / (x + y))
        ok = (tc > self.times[cross]) & (tc < self.times[cross + 1])
        # a crossing that rounds onto a node turns that node into the zero
        v = v.copy()
        v[np.where(tc <= self.times[cross], cross, cross + 1)[~ok]] = 0.0
        c = cross[ok]
        t = np.insert(self.times, c + 1, tc[ok])
        vv = np.insert(v, c + 1, 0.0)
        cl = self.cell_local_time
        if cl is not None:
            # both halves of a split cell keep its (constant) local time density
            share = (tc[ok] - self.times[c]) / h[ok]
            cl = cl.copy()
            right = cl[c] * (1.0 - share)
            cl[c] *= share
            cl = np.insert(cl, c + 1, right)
        return GridPath(t, vv, self.step, self.mode, self.snap_distance, _check=False,
                        cell_local_time=cl)

    def shift(self, t: float, snap: bool = True) -> "GridPath":
        """The path seen from time ``t``: ``s -> B(t + s)``.

        With ``snap`` the shift is moved to the nearest node and the distance
        is recorded in ``snap_distance``.
        """
        t = float(t)
        if not self.t_min <= t <= self.t_max:
            raise DomainError("shift beyond the simulated horizon")
        if snap:
            i = int(np.argmin(np.abs(self.times - t)))
            target = float(self.times[i])
            dist = abs(target - t)
        else:
            target, dist = t, 0.0
        times = self.times - target
        if snap:
            times = times.copy()
            times[i] = 0.0
        return GridPath(times, self.values, self.step, self.mode, dist, _check=False,
                        cell_local_time=self.cell_local_time)

    def _cells(self, i0: int, i1: int):
        """Cell local times between nodes ``i0`` and ``i1`` (exclusive), if known."""
        cl = self.cell_local_time
        return None if cl is None else cl[i0:max(i1 - 1, i0)]

    def restrict(self, lo: float, hi: float) -> "GridPath":
        i0 = int(np.searchsorted(self.times, lo, side="left"))
        i1 = int(np.searchsorted(self.times, hi, side="right"))
        return GridPath(self.times[i0:i1], self.values[i0:i1], self.step, self.mode,
                        self.snap_distance, cell_local_time=self._cells(i0, i1))

    def reflect(self) -> "GridPath":
        """``s -> B(-s)`` on the whole path."""
        cl = None if self.cell_local_time is None else self.cell_local_time[::-1]
        return GridPath(-self.times[::-1], self.values[::-1], self.step, self.mode, _check=False,
                        cell_local_time=cl)

    def time_reverse(self) -> "GridPath":
        """``s -> B(-s)`` for the part of the path on ``(-inf, 0]``."""
        m = int(np.searchsorted(self.times, 0.0, side="right"))
        cl = self._cells(0, m)
        return GridPath(-self.times[:m][::-1], self.values[:m][::-1], self.step, self.mode,
                        _check=False, cell_local_time=None if cl is None else cl[::-1])

    # -- export ----------------------------------------------------------------

    def to_binary(self, path) -> None:
        """Write a little-endian binary file: header, values, then times if irregular
        and cell local times if present (flag bits 1 and 2)."""
        uniform = self.is_uniform and 0.0 in self.times
        origin = self.origin_index() if uniform else -1
        flags = (0 if uniform else 1) | (2 if self.cell_local_time is not None else 0)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, self.step, origin, self.times.size, flags))
            fh.write(self.values.astype("<f8").tobytes())
            if flags & 1:
                fh.write(self.times.astype("<f8").tobytes())
            if flags & 2:
                fh.write(self.cell_local_time.astype("<f8").tobytes())

    @classmethod
    def from_binary(cls, path, mode: str = "gaussian") -> "GridPath":
        data = Path(path).read_bytes()
        magic, step, origin, n, flags = _HEADER.unpack_from(data, 0)
        if magic != _MAGIC:
            raise PreconditionError("not a path file")
        off = _HEADER.size
        values = np.frombuffer(data, "<f8", n, off).copy()
        off += 8 * n
        if flags & 1:
            times = np.frombuffer(data, "<f8", n, off).copy()
            off += 8 * n
        else:
            times = (np.arange(n) - origin) * step
        cells = np.frombuffer(data, "<f8", n - 1, off).copy() if flags & 2 else None
        return cls(times, values, step, mode, cell_local_time=cells)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "value"])
            for t, v in zip(self.times.tolist(), self.values.tolist()):
                w.writerow([repr(t), repr(v)])


def _build_table(path: GridPath) -> ExcursionTable:
    z = path.zeros()
    if z.size < 2:
        e = np.empty(0)
        i = np.empty(0, dtype=np.int64)
        return ExcursionTable(e, e, i, e, i, i)
    start, end = z[:-1], z[1:]
    t = path.times
    lo = np.searchsorted(t, start, side="right")
    hi = np.searchsorted(t, end, side="left")
    v = _snapped(path.values)
    nonempty = hi > lo
    # sign and height from the interior nodes; empty interiors only occur for
    # zero-height pieces between two exact zeros
    idx = np.where(nonempty, lo, 0)
    sign = np.where(nonempty, np.sign(v[idx]), 0).astype(np.int64)
    absv = np.append(np.abs(v), 0.0)
    max_abs = np.zeros(start.size)
    ne = np.flatnonzero(nonempty)
    if ne.size:
        # interleaved [lo, hi) bounds: even slots reduce over each interior
        bounds = np.empty(2 * ne.size, dtype=np.int64)
        bounds[0::2] = lo[ne]
        bounds[1::2] = hi[ne]
        max_abs[ne] = np.maximum.reduceat(absv, bounds)[0::2]
    keep = (end > start) & (sign != 0)
    return ExcursionTable(start[keep], end[keep], sign[keep], max_abs[keep],
                          lo[keep], hi[keep])


# -- local time ----------------------------------------------------------------

def bridge_local_time(x, y, h):
    """Expected local time at zero of a Brownian bridge from ``x`` to ``y`` over time ``h``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    expo = 2.0 * np.maximum(x * y, 0.0) / h
    z = (np.abs(x) + np.abs(y)) / np.sqrt(2.0 * h)
    out = 0.5 * np.sqrt(2.0 * np.pi * h) * erfcx(z) * np.exp(-np.minimum(expo, _LT_CUTOFF))
    return np.where(expo > _LT_CUTOFF, 0.0, out)


def sample_bridge_local_time(x, y, h, u):
    """Local time at zero of a Brownian bridge from ``x`` to ``y`` over ``h``, by inversion.

    Given its end values, the local time of a Brownian cell has the tail
    ``P(L > l) = exp(-((|x| + |y| + l)**2 - (y - x)**2) / (2 h))`` for
    ``l >= 0``; ``u`` are uniforms on ``(0, 1)``.  The mean is
    :func:`bridge_local_time`.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    e = -2.0 * h * np.log(u)
    a = np.abs(x) + np.abs(y)
    # sqrt(d**2 + e) - a, written to avoid cancellation; a**2 - d**2 = 4 max(xy, 0)
    num = e - 4.0 * np.maximum(x * y, 0.0)
    return np.maximum(num, 0.0) / (np.sqrt((y - x) ** 2 + e) + a)


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(z: np.ndarray) -> np.ndarray:
    """The splitmix64 finalizer (wrapping uint64 arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def cell_uniforms(key: int, k_left, k_right) -> np.ndarray:
    """Uniforms on ``(0, 1)`` attached to lattice cells ``[k_left, k_right]`` of a keyed path.

    A counter-based hash, so a cell gets the same draw however the path
    is grown or refined.
    """
    a = np.atleast_1d(np.asarray(k_left, dtype=np.int64)).view(np.uint64)
    b = np.atleast_1d(np.asarray(k_right, dtype=np.int64)).view(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(np.uint64(key) ^ _mix(a * _GOLD + np.uint64(1)))
        z = _mix(z ^ (b * _M1 + _GOLD))
    return ((z >> np.uint64(11)).astype(float) + 0.5) * 2.0 ** -53


def occupation_calibration(step: float, eps: float | None = None) -> float:
    """Factor making the occupation estimator exact in mean over ``[0, 1]``.

    The raw estimator ``(step / 2 eps) * #{k : |B_k| <= eps}`` has a known
    expectation on ``[0, 1]``; the factor divides it into ``E|B_1|``.
    """
    eps = math.sqrt(step) if eps is None else eps
    n = int(round(1.0 / step))
    k = np.arange(1, n)
    raw = (step / (2 * eps)) * (1.0 + np.sum(erf(eps / np.sqrt(2.0 * k * step))))
    return math.sqrt(2.0 / math.pi) / raw


def _interpolated_zeros(t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Mask of interior zero nodes that carry no information about the path.

    These are the crossings added by :meth:`GridPath.with_zeros` (on the
    chord between their neighbours) and the ends of the zero cluster at the
    origin (a zero next to exactly one other zero, see :func:`_open_origin`).
    They must not change local time.
    """
    out = np.zeros(v.size, dtype=bool)
    if v.size < 3:
        return out
    x, y = v[:-2], v[2:]
    zero = v[1:-1] == 0.0
    cand = zero & (x * y < 0)
    H = t[2:] - t[:-2]
    with np.errstate(invalid="ignore", divide="ignore"):
        tc = t[:-2] + H * (np.abs(x) / (np.abs(x) + np.abs(y)))
    out[1:-1] = cand & (np.abs(tc - t[1:-1]) <= 1e-9 * H)
    out[1:-1] |= zero & ((x == 0.0) != (y == 0.0))
    return out


def _open_origin(t: np.ndarray, v: np.ndarray, cells: np.ndarray):
    """Insert the ends of the zero cluster at a path started from ``B(0) = 0``.

    Zeros accumulate at the origin from both sides, so the excursions next to
    it start (or end) inside the adjacent cells, after (before) all of the
    local time those cells carry.  A zero node is placed at the middle of each
    adjacent cell and the cell's local time is moved to its origin side.
    """
    i = int(np.searchsorted(t, 0.0))
    if i >= t.size or t[i] != 0.0 or v[i] != 0.0:
        return t, v, cells
    new_t, new_c, at = [], [], []
    # backward cell [t[i-1], 0] first so that the insertion indices stay valid
    if i > 0 and v[i - 1] != 0.0:
        at.append(i)
        new_t.append(0.5 * t[i - 1])
        new_c.append((0.0, cells[i - 1]))
    if i + 1 < t.size and v[i + 1] != 0.0:
        at.append(i + 1)
        new_t.append(0.5 * t[i + 1])
        new_c.append((cells[i], 0.0))
    if not at:
        return t, v, cells
    t2 = np.insert(t, at, new_t)
    v2 = np.insert(v, at, 0.0)
    c2 = cells.copy()
    for pos, (left, right) in zip(at, new_c):
        c2[pos - 1] = left
    # cells are indexed like their left nodes: replace the split cell by its two parts
    c2 = np.insert(c2, at, [right for _, right in new_c])
    return t2, v2, c2


def local_time_measure(path: GridPath, estimator: str | None = None, eps: float | None = None,
                       calibration: float | None = None) -> HybridMeasure:
    """Local time at zero as a diffuse measure with a constant density per path cell.

    Estimators
    ----------
    ``"sampled"``
        The local time drawn with the path, one exact conditional draw per
        cell (see :func:`sample_bridge_local_time`).  Default for gaussian
        paths that carry it.
    ``"bridge"``
        Conditional expectation of Brownian local time given the node values
        (works for irregular nodes).  Default for gaussian paths without
        sampled local time.
    ``"occupation"``
        ``(1 / 2 eps) * time spent in [-eps, eps]`` counted on lattice nodes,
        multiplied by ``calibration`` (default :func:`occupation_calibration`).
    ``"walk"``
        ``sqrt(step)`` per visit of zero, spread over the following cell.
        Default for random walk paths.
    """
    if estimator is None:
        if path.mode == "random_walk":
            estimator = "walk"
        else:
            estimator = "sampled" if path.cell_local_time is not None else "bridge"
    t, v = path.times, _snapped(path.values)
    h = np.diff(t)
    if estimator == "sampled":
        if path.cell_local_time is None:
            raise PreconditionError("path carries no sampled local time")
        return HybridMeasure((path.t_min, path.t_max), t, path.cell_local_time / h, _check=False)
    # random walk zeros are lattice visits that always sit on the chord
    ins = _interpolated_zeros(t, v) if path.mode != "random_walk" else np.zeros(v.size, bool)
    if estimator == "bridge":
        mass = bridge_local_time(v[:-1], v[1:], h)
        # a cell split at an interpolated crossing keeps the law of the unsplit cell
        i = np.flatnonzero(ins)
        whole = bridge_local_time(v[i - 1], v[i + 1], t[i + 1] - t[i - 1])
        share = h[i - 1] / (t[i + 1] - t[i - 1])
        mass[i - 1] = whole * share
        mass[i] = whole * (1.0 - share)
    elif estimator == "occupation":
        eps = math.sqrt(path.step) if eps is None else eps
        if calibration is None:
            calibration = occupation_calibration(path.step, eps)
        near = (np.abs(v[:-1]) <= eps) & ~ins[:-1]
        mass = np.where(near, calibration * path.step / (2 * eps), 0.0)
    elif estimator == "walk":
        mass = np.where((v[:-1] == 0.0) & ~ins[:-1], math.sqrt(path.step), 0.0)
    else:
        raise PreconditionError(f"unknown local time estimator {estimator!r}")
    return HybridMeasure((path.t_min, path.t_max), t, mass / h, _check=False)


def local_time(path: GridPath, t: float, estimator: str | None = None) -> float:
    return path.local_time(t, estimator)


def excursions(path: GridPath) -> list[Excursion]:
    return path.excursions()


def excursion_table(path: GridPath) -> ExcursionTable:
    return path.excursion_table()


def shift_path(path: GridPath, t: float, snap: bool = True) -> GridPath:
    return path.shift(t, snap)


def time_reverse(path: GridPath) -> GridPath:
    return path.time_reverse()


def concatenate(w1: GridPath, e: Excursion, w3: GridPath) -> GridPath:
    """``w1`` on ``t <= 0``, then the excursion on ``(0, D)``, then ``w3(t - D)``."""
    if w1.t_max != 0.0 or w1.values[-1] != 0.0:
        raise PreconditionError("backward piece must end at time 0 with value 0")
    if w3.t_min != 0.0 or w3.values[0] != 0.0:
        raise PreconditionError("forward piece must start at time 0 with value 0")
    if e.values[0] != 0.0 or e.values[-1] != 0.0:
        raise PreconditionError("excursion must start and end at zero")
    D_ = float(e.lifetime)
    inner = (e.times > 0) & (e.times < D_)
    times = np.concatenate((w1.times, e.times[inner], w3.times + D_))
    values = np.concatenate((w1.values, e.values[inner], w3.values))
    cells = None
    if w1.cell_local_time is not None and w3.cell_local_time is not None:
        ec = e.cell_local_time
        if ec is None:
            # no local time inside an excursion
            ec = np.zeros(int(inner.sum()) + 1)
        cells = np.concatenate((w1.cell_local_time, ec, w3.cell_local_time))
    return GridPath(times, values, w1.step, w1.mode, cell_local_time=cells)


def _mask(pred, tab: ExcursionTable) -> np.ndarray:
    return np.asarray(pred.mask(tab) if hasattr(pred, "mask") else pred(tab), dtype=bool)


def first_A_excursion_time(path: GridPath, pred) -> float:
    """Left end of the first excursion starting at time ``>= 0`` that satisfies ``pred``."""
    tab = path.excursion_table()
    hit = np.flatnonzero(_mask(pred, tab) & (tab.start >= 0.0))
    if hit.size == 0:
        raise HorizonError("no qualifying excursion after time 0 within the path")
    return float(tab.start[hit[0]])


def last_before_zero(path: GridPath, pred) -> float:
    """Left end of the last qualifying excursion starting before time 0."""
    tab = path.excursion_table()
    hit = np.flatnonzero(_mask(pred, tab) & (tab.start < 0.0))
    if hit.size == 0:
        raise HorizonError("no qualifying excursion before time 0 within the path")
    return float(tab.start[hit[-1]])


def G(path: GridPath, t: float) -> float:
    """Last zero at or before ``t``."""
    z = path.zeros()
    i = int(np.searchsorted(z, t, side="right")) - 1
    if i < 0:
        raise HorizonError("no zero before t within the path")
    return float(z[i])


def D(path: GridPath, t: float) -> float:
    """First zero at or after ``t``."""
    z = path.zeros()
    i = int(np.searchsorted(z, t, side="left"))
    if i >= z.size:
        raise HorizonError("no zero after t within the path")
    return float(z[i])


# -- simulation ----------------------------------------------------------------

def simulate(seed, step: float, horizon: float, mode: str = "gaussian") -> GridPath:
    """Two-sided path on ``[-T, T]`` with a value at every lattice point and ``B(0) = 0``.

    ``gaussian`` uses independent ``N(0, step)`` increments; ``random_walk``
    uses fair steps of size ``sqrt(step)``, stored as exact multiples so the
    path returns to exactly zero.  Gaussian paths also carry one local time
    draw per cell, and the two cells next to the origin are split where the
    zero cluster at the origin ends (see :func:`_open_origin`).
    """
    if step <= 0 or horizon <= 0:
        raise PreconditionError("step and horizon must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(round(horizon / step))
    if mode == "gaussian":
        inc = rng.standard_normal((2, n)) * math.sqrt(step)
        fwd = np.cumsum(inc[0])
        bwd = np.cumsum(inc[1])
    elif mode == "random_walk":
        inc = rng.integers(0, 2, size=(2, n)) * 2 - 1
        fwd = np.cumsum(inc[0]) * math.sqrt(step)
        bwd = np.cumsum(inc[1]) * math.sqrt(step)
    else:
        raise PreconditionError(f"unknown mode {mode!r}")
    values = np.concatenate((bwd[::-1], [0.0], fwd))
    times = np.arange(-n, n + 1) * step
    cells = None
    if mode == "gaussian":
        u = 1.0 - rng.random(2 * n)
        cells = sample_bridge_local_time(values[:-1], values[1:], step, u)
        times, values, cells = _open_origin(times, values, cells)
    return GridPath(times, values, step, mode, _check=False, cell_local_time=cells)


def _risky(x, y, h, tol, guard):
    """Whether a bridge between ``x`` and ``y`` over ``h`` may come within ``guard`` of zero."""
    ax, ay = np.abs(x) - guard, np.abs(y) - guard
    near = (x * y <= 0) | (ax <= 0) | (ay <= 0)
    with np.errstate(over="ignore"):
        p = np.exp(-2.0 * np.maximum(ax, 0) * np.maximum(ay, 0) / h)
    return near | (p > tol)


@dataclass
class LazyBrownianPath:
    """A two-sided lattice Brownian path realized on demand.

    Parameters
    ----------
    rng : numpy.random.Generator
        Source of randomness; all draws are taken from it in call order.
    step : float
        Lattice spacing.
    tol : float
        A stretch between two realized values is left unrealized when the
        probability that the bridge between them gets within ``guard`` of
        zero is at most ``tol``.  ``tol=0`` realizes every lattice point.
    guard : float
        Distance from zero that counts as "near".  Use ``sqrt(step)`` when
        the occupation estimator is needed.
    first_block : int
        Shortest block in lattice units.  Blocks double the covered range
        while the path is far from zero and shrink to about ``4 x**2 / step``
        lattice units when the current end value ``x`` is close to it.
    max_time : float
        Extensions beyond this time raise :class:`HorizonError`.
    """

    rng: np.random.Generator
    step: float = 1e-4
    tol: float = 1e-10
    guard: float = 0.0
    first_block: int = 1024
    max_time: float = 1e9
    forward_local_time: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.step <= 0:
            raise PreconditionError("step must be positive")
        self._k = np.zeros(1, dtype=np.int64)
        self._v = np.zeros(1)
        # blocks not yet merged into the arrays: backward ones in reverse order
        self._head: list = []
        self._tail: list = []
        self._ends = [0, 0.0, 0, 0.0]  # first k, first v, last k, last v
        self._snapshot = None
        # keys the per-cell local time draws, see cell_uniforms
        self._key = int(self.rng.integers(2**63))

    def _merge(self) -> None:
        if self._head or self._tail:
            ks = [k for k, _ in reversed(self._head)] + [self._k] + [k for k, _ in self._tail]
            vs = [v for _, v in reversed(self._head)] + [self._v] + [v for _, v in self._tail]
            self._k, self._v = np.concatenate(ks), np.concatenate(vs)
            self._head, self._tail = [], []

    @property
    def k(self) -> np.ndarray:
        """Realized lattice indices, increasing."""
        self._merge()
        return self._k

    @property
    def v(self) -> np.ndarray:
        """Path values at :attr:`k`."""
        self._merge()
        return self._v

    def _set(self, k: np.ndarray, v: np.ndarray) -> None:
        self._k, self._v = k, v
        self._head, self._tail = [], []
        self._snapshot = None

    @property
    def node_count(self) -> int:
        return int(self._k.size + sum(k.size for k, _ in self._head + self._tail))

    @property
    def t_min(self) -> float:
        return float(self._ends[0] * self.step)

    @property
    def t_max(self) -> float:
        return float(self._ends[2] * self.step)

    def _block(self, k0: int, v0: float, n: int, direction: int):
        rng, step = self.rng, self.step
        v1 = v0 + math.sqrt(n * step) * rng.standard_normal()
        ks = [np.array([n], dtype=np.int64)]
        vs = [np.array([v1])]
        lo = np.array([0], dtype=np.int64)
        hi = np.array([n], dtype=np.int64)
        x = np.array([v0])
        y = np.array([v1])
        while lo.size:
            gap = hi - lo
            need = (gap > 1)
            if self.tol > 0:
                need &= _risky(x, y, gap * step, self.tol, self.guard)
            lo, hi, x, y = lo[need], hi[need], x[need], y[need]
            if lo.size == 0:
                break
            mid = (lo + hi) // 2
            w = (mid - lo) / (hi - lo)
            var = step * (mid - lo) * (hi - mid) / (hi - lo)
            vm = x + w * (y - x) + np.sqrt(var) * rng.standard_normal(lo.size)
            ks.append(mid)
            vs.append(vm)
            lo, hi = np.concatenate((lo, mid)), np.concatenate((mid, hi))
            x, y = np.concatenate((x, vm)), np.concatenate((vm, y))
        K = np.concatenate(ks)
        V = np.concatenate(vs)
        order = np.argsort(K, kind="stable")
        return k0 + direction * K[order], V[order]

    def _span(self, reach: int, x: float) -> int:
        """Block length: the doubling rule, shortened while the path is near zero.

        Far from zero a block of about ``4 x**2`` lattice units is unlikely to
        hit zero, so long excursions are still crossed in a few blocks.
        """
        near = int(min(4.0 * x * x / self.step, 2**62))
        return int(max(self.first_block, min(max(self.first_block, reach), near)))

    def extend_forward(self, until: float | None = None) -> None:
        """Append at least one block; keep going until ``t_max >= until``."""
        while True:
            k_last, v_last = self._ends[2], self._ends[3]
            span = self._span(k_last, v_last)
            if (k_last + span) * self.step > self.max_time:
                raise HorizonError("forward extension beyond the time cap")
            nk, nv = self._block(k_last, v_last, span, 1)
            cells = self._cell_local_time(np.append(k_last, nk), np.append(v_last, nv))
            self.forward_local_time += float(cells.sum())
            self._tail.append((nk, nv))
            self._ends[2:] = [int(nk[-1]), float(nv[-1])]
            self._snapshot = None
            if until is None or self.t_max >= until:
                return

    def extend_local_time(self, amount: float) -> None:
        """Extend forward until :attr:`forward_local_time` has grown by ``amount``."""
        target = self.forward_local_time + amount
        while self.forward_local_time < target:
            self.extend_forward()

    def extend_backward(self, until: float | None = None) -> None:
        """Prepend at least one block; keep going until ``t_min <= until``."""
        while True:
            k_first, v_first = self._ends[0], self._ends[1]
            span = self._span(-k_first, v_first)
            if (-k_first + span) * self.step > self.max_time:
                raise HorizonError("backward extension beyond the time cap")
            nk, nv = self._block(k_first, v_first, span, -1)
            self._head.append((nk[::-1], nv[::-1]))
            self._ends[:2] = [int(nk[-1]), float(nv[-1])]
            self._snapshot = None
            if until is None or self.t_min <= until:
                return

    def cover(self, lo: float, hi: float) -> None:
        if hi > self.t_max:
            self.extend_forward(hi)
        if lo < self.t_min:
            self.extend_backward(lo)

    def refine(self, lo: float, hi: float) -> None:
        """Realize every lattice point in ``[lo, hi]`` (extending the path if needed)."""
        self.cover(lo, hi)
        ka = int(math.floor(lo / self.step))
        kb = int(math.ceil(hi / self.step))
        k, v = self.k, self.v
        i0 = max(int(np.searchsorted(k, ka, side="right")) - 1, 0)
        i1 = min(int(np.searchsorted(k, kb, side="left")), k.size - 1)
        gaps = np.flatnonzero(np.diff(k[i0:i1 + 1]) > 1) + i0
        if gaps.size == 0:
            return
        new_k, new_v = [], []
        rng, step = self.rng, self.step
        for g in gaps:
            kl, kr, vl, vr = int(k[g]), int(k[g + 1]), float(v[g]), float(v[g + 1])
            p, q = max(kl, ka), min(kr, kb)
            # values at the ends of the requested part of the gap, then a bridge in between
            pts_k = [kl]
            pts_v = [vl]
            for target in (p, q):
                if target in (kl, kr) or target == pts_k[-1]:
                    continue
                a_k, a_v = pts_k[-1], pts_v[-1]
                w = (target - a_k) / (kr - a_k)
                var = step * (target - a_k) * (kr - target) / (kr - a_k)
                val = a_v + w * (vr - a_v) + math.sqrt(var) * rng.standard_normal()
                pts_k.append(target)
                pts_v.append(val)
                new_k.append(np.array([target], dtype=np.int64))
                new_v.append(np.array([val]))
            vp = vl if p == kl else pts_v[pts_k.index(p)]
            vq = vr if q == kr else pts_v[pts_k.index(q)]
            m = q - p
            if m > 1:
                inc = rng.standard_normal(m) * math.sqrt(step)
                W = np.cumsum(inc)
                j = np.arange(1, m)
                fill = vp + W[:-1] - (j / m) * W[-1] + (j / m) * (vq - vp)
                new_k.append(np.arange(p + 1, q, dtype=np.int64))
                new_v.append(fill)
        nk = np.concatenate(new_k)
        nv = np.concatenate(new_v)
        order = np.argsort(nk, kind="stable")
        nk, nv = nk[order], nv[order]
        pos = np.searchsorted(k, nk)
        self._set(np.insert(k, pos, nk), np.insert(v, pos, nv))

    def value_at(self, t: float) -> float:
        """Path value at ``t``, interpolating between the two neighbouring lattice points."""
        k = math.floor(t / self.step)
        self.refine(k * self.step, (k + 1) * self.step)
        i = int(np.searchsorted(self.k, k))
        t0, t1 = self.k[i] * self.step, self.k[i + 1] * self.step
        w = (t - t0) / (t1 - t0)
        return float(self.v[i] + w * (self.v[i + 1] - self.v[i]))

    def _cell_local_time(self, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        u = cell_uniforms(self._key, k[:-1], k[1:])
        return sample_bridge_local_time(v[:-1], v[1:], np.diff(k) * self.step, u)

    def path(self, lo: float | None = None, hi: float | None = None) -> GridPath:
        """Snapshot of the realized nodes in ``[lo, hi]``, with their sampled local time."""
        if self._snapshot is None:
            k, v = self.k, self.v
            t, v, cells = _open_origin(k * self.step, v, self._cell_local_time(k, v))
            self._snapshot = GridPath(t, v, self.step, "gaussian", _check=False,
                                      cell_local_time=cells)
        full = self._snapshot
        if lo is None and hi is None:
            return full
        lo = full.t_min if lo is None else lo
        hi = full.t_max if hi is None else hi
        i0 = int(np.searchsorted(full.times, lo, side="left"))
        i1 = int(np.searchsorted(full.times, hi, side="right"))
        return GridPath(full.times[i0:i1], full.values[i0:i1], self.step, "gaussian",
                        _check=False, cell_local_time=full._cells(i0, i1))
