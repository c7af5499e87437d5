"""Balancing allocations between measures on the line.

The central object is the balance function of a source ``xi`` and a target
``eta`` seen from a point ``s``::

    F(t) = eta[s, t] - u * xi{s} - xi(s, t) - w * xi{t},   t > s.

``tau`` (closed brackets on both sides) corresponds to ``u = w = 1`` and
``tau_u`` to ``w = 0``.  The allocation is the first time ``F`` becomes
nonnegative.  Since both measures are piecewise-constant densities plus
atoms, ``F`` is piecewise linear with jumps at atoms and the first passage
is found by walking the event list once, solving one linear equation at
the end.  :class:`BalanceScanner` precomputes the event arrays of a pair so
that many source points can be queried at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, PreconditionError
from .measure import HybridMeasure, mutually_singular

__all__ = [
    "INFINITE",
    "BalanceScanner",
    "KernelPiece",
    "KernelSample",
    "TimeChange",
    "BalanceReport",
    "tau",
    "tau_u",
    "kernel",
    "build_time_change",
    "stretch",
    "tau_star",
    "pushforward",
    "verify_balance",
]

INFINITE = math.inf

_NONE, _START, _RAMP, _POINT = -1, 0, 1, 2

# sparse tables above this many entries are not built; queries fall back to a chunked scan
_SPARSE_LIMIT = 20_000_000


class BalanceScanner:
    """Event arrays of a source/target pair for fast first-passage queries.

    Parameters
    ----------
    xi, eta : HybridMeasure
        Source and target on the same window.
    atol : float, optional
        Absolute tolerance for deciding ``F(t) >= 0``.  Defaults to
        ``1e-12`` times the larger total mass (at least ``1e-12``).
    """

    def __init__(self, xi: HybridMeasure, eta: HybridMeasure, atol: float | None = None):
        if xi.window != eta.window:
            raise PreconditionError("source and target must share a window")
        self.xi = xi
        self.eta = eta
        self.window = xi.window
        if atol is None:
            atol = 1e-12 * max(1.0, xi.total_mass, eta.total_mass)
        self.atol = float(atol)
        ev = np.union1d(np.union1d(xi.breakpoints, eta.breakpoints),
                        np.union1d(xi.atom_locs, eta.atom_locs))
        self.events = ev
        self.xa = np.asarray(xi.atom_at(ev))
        self.ea = np.asarray(eta.atom_at(ev))
        self.Wl = self._w_left(ev)
        self.W = self.Wl + self.ea - self.xa
        slope = np.zeros(ev.size)
        if ev.size > 1:
            mids = 0.5 * (ev[:-1] + ev[1:])
            slope[1:] = eta.density_at(mids) - xi.density_at(mids)
        self.slope = slope
        self._reach = {}
        self._tables = {}

    # W(t-) = eta[a, t) - xi[a, t);  W(t) adds the atoms at t
    def _w_left(self, t):
        xi, eta = self.xi, self.eta
        return (eta.diffuse_cdf(t) + eta.atoms_before(t)
                - xi.diffuse_cdf(t) - xi.atoms_before(t))

    def reach(self, w: int) -> np.ndarray:
        """Largest value of ``F + level`` on segment ``k`` including its right end."""
        if w not in self._reach:
            r = np.maximum(self.Wl, self.W + (1 - w) * self.xa)
            r[0] = -np.inf
            self._reach[w] = r
        return self._reach[w]

    def _table(self, w: int):
        if w not in self._tables:
            r = self.reach(w)
            levels = [r]
            span = 1
            while 2 * span <= r.size:
                prev = levels[-1]
                levels.append(np.maximum(prev[:-span], prev[span:]))
                span *= 2
            self._tables[w] = levels
        return self._tables[w]

    def first_reach(self, lo, thr, w: int) -> np.ndarray:
        """First segment index ``k >= lo`` with ``reach(w)[k] >= thr`` (``K`` if none)."""
        lo = np.asarray(lo, dtype=np.int64)
        thr = np.asarray(thr, dtype=float)
        K = self.events.size
        n_levels = max(1, int(math.log2(max(K, 1))) + 1)
        if lo.size > 16 and K * n_levels <= _SPARSE_LIMIT:
            levels = self._table(w)
            pos = lo.copy()
            for p in range(len(levels) - 1, -1, -1):
                span = 1 << p
                ok = pos <= K - span
                idx = np.where(ok, pos, 0)
                skip = ok & (levels[p][idx] < thr)
                pos = np.where(skip, pos + span, pos)
            return np.minimum(pos, K)
        r = self.reach(w)
        out = np.full(lo.shape, K, dtype=np.int64)
        for q in range(lo.size):
            start = int(lo.flat[q])
            chunk = 256
            while start < K:
                hits = np.flatnonzero(r[start:start + chunk] >= thr.flat[q])
                if hits.size:
                    out.flat[q] = start + hits[0]
                    break
                start += chunk
                chunk *= 4
        return out

    # -- core scan ----------------------------------------------------------

    def scan(self, s, level, fstart, inext, w: int, limit: float):
        """First passage of ``F`` for arbitrary query descriptions.

        ``level`` is the value ``W`` has to reach, ``fstart`` the exact right
        limit ``F(s+)`` and ``inext`` the index of the first event closing the
        partial segment that starts at ``s``.  Returns ``(t, seg, kind)``.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        y = np.broadcast_to(np.asarray(level, dtype=float), s.shape)
        f0 = np.broadcast_to(np.asarray(fstart, dtype=float), s.shape)
        inext = np.broadcast_to(np.asarray(inext, dtype=np.int64), s.shape)
        ev, atol = self.events, self.atol
        K = ev.size
        t = np.full(s.shape, np.inf)
        seg = np.full(s.shape, -1, dtype=np.int64)
        kind = np.full(s.shape, _NONE, dtype=np.int64)

        valid = inext < K
        ii = np.where(valid, inext, K - 1)
        sig = self.slope[ii]
        e_next = ev[ii]

        start = valid & ((f0 > atol) | ((f0 >= -atol) & (sig >= 0)))
        t[start] = s[start]
        kind[start] = _START
        seg[start] = ii[start]
        rem = valid & ~start

        f_end = f0 + sig * (e_next - s)
        ramp = rem & (sig > 0) & (f_end >= -atol)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ramp = np.minimum(s - f0 / sig, e_next)
        t[ramp] = t_ramp[ramp]
        kind[ramp] = _RAMP
        seg[ramp] = ii[ramp]
        rem &= ~ramp

        f_pt = f_end + self.ea[ii] - w * self.xa[ii]
        pt = rem & (f_pt >= -atol)
        t[pt] = e_next[pt]
        kind[pt] = _POINT
        seg[pt] = ii[pt]
        rem &= ~pt

        if np.any(rem):
            q = np.flatnonzero(rem)
            j = self.first_reach(ii[q] + 1, y[q] - atol, w)
            found = j < K
            q, j = q[found], j[found]
            if q.size:
                w_start = self.W[j - 1]
                sl = self.slope[j]
                is_ramp = self.Wl[j] >= y[q] - atol
                with np.errstate(divide="ignore", invalid="ignore"):
                    cross = np.where(sl > 0, ev[j - 1] + (y[q] - w_start) / sl, ev[j - 1])
                cross = np.clip(cross, ev[j - 1], ev[j])
                t[q] = np.where(is_ramp, cross, ev[j])
                kind[q] = np.where(is_ramp, _RAMP, _POINT)
                seg[q] = j

        beyond = t > limit
        t[beyond] = np.inf
        kind[beyond] = _NONE
        seg[beyond] = -1
        return t, seg, kind

    def _check(self, s, limit):
        a, b = self.window
        s = np.asarray(s, dtype=float)
        if np.any(s < a) or np.any(s > b) or np.any(np.isnan(s)):
            raise DomainError(f"source point outside window {self.window}")
        if limit is None:
            return b
        if limit > b:
            raise DomainError("search limit beyond the window")
        return float(limit)

    def tau(self, s, search_limit: float | None = None):
        """``inf{t > s : xi[s, t] <= eta[s, t]}``."""
        limit = self._check(s, search_limit)
        s = np.atleast_1d(np.asarray(s, dtype=float))
        level = self._w_left(s)
        fstart = self.eta.atom_at(s) - self.xi.atom_at(s)
        inext = np.searchsorted(self.events, s, side="right")
        return self.scan(s, level, fstart, inext, 1, limit)[0]

    def tau_u(self, s, u, search_limit: float | None = None):
        """``inf{t > s : u xi{s} + xi(s, t) <= eta[s, t]}``."""
        limit = self._check(s, search_limit)
        s, u = np.broadcast_arrays(np.atleast_1d(np.asarray(s, dtype=float)),
                                   np.asarray(u, dtype=float))
        if np.any(u < 0) or np.any(u > 1):
            raise PreconditionError("u must lie in [0, 1]")
        m = np.asarray(self.xi.atom_at(s))
        level = self._w_left(s) - (1.0 - u) * m
        fstart = self.eta.atom_at(s) - u * m
        inext = np.searchsorted(self.events, s, side="right")
        return self.scan(s, level, fstart, inext, 0, limit)[0]

    def interior_limits(self, p, q, limit):
        """Allocation ``tau^0`` at the inner limits ``p+`` and ``q-`` of event-free cells."""
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        ip = np.searchsorted(self.events, p, side="right")
        level_p = self._w_left(p) + self.ea_at(p) - self.xa_at(p)
        right = self.scan(p, level_p, 0.0, ip, 0, limit)
        iq = np.searchsorted(self.events, q, side="left")
        level_q = self._w_left(q)
        left = self.scan(q, level_q, 0.0, iq, 0, limit)
        return right, left

    def ea_at(self, t):
        return np.asarray(self.eta.atom_at(t))

    def xa_at(self, t):
        return np.asarray(self.xi.atom_at(t))

    def interior(self, s, limit):
        """Allocation at points ``s`` known to be interior to an event-free cell."""
        s = np.asarray(s, dtype=float)
        i = np.searchsorted(self.events, s, side="right")
        return self.scan(s, self._w_left(s), 0.0, i, 0, limit)

    # -- kernel -------------------------------------------------------------

    def kernel(self, s: float, search_limit: float | None = None) -> "KernelSample":
        """Kernel ``K(s, .)``: the law of ``tau^u(s)`` under uniform ``u``.

        The levels ``W(s-) - (1 - u) xi{s}`` sweep an interval of length
        ``xi{s}`` as ``u`` runs over ``[0, 1]``.  Following the running maximum
        of ``W`` to the right of ``s`` splits that interval into pieces that
        are either reached at a single event or crossed on a linear ramp.
        """
        limit = self._check(s, search_limit)
        s = float(s)
        m = float(self.xi.atom_at(s))
        if m == 0.0:
            t0 = float(self.tau_u(s, 0.0, limit)[0])
            return KernelSample(s, [KernelPiece(0.0, 1.0, t0, 0.0)])
        ev = self.events
        K = ev.size
        i = int(np.searchsorted(ev, s, side="right"))
        w_left = float(self._w_left(s))
        y0, y1 = w_left - m, w_left
        w_s = w_left + float(self.eta.atom_at(s)) - m

        ks = np.arange(i, K)
        n_in = int(np.searchsorted(ev[ks], limit, side="right"))
        cut = n_in < ks.size          # the segment straddling the limit is truncated
        ks = ks[: n_in + 1] if cut else ks
        e_lo = np.where(ks == i, s, ev[ks - 1])
        base = np.where(ks == i, w_s, self.W[ks - 1])
        sl = self.slope[ks]
        ramp_end = self.Wl[ks].copy()
        point = self.W[ks] + self.xa[ks]
        if cut:
            ramp_end[-1] = base[-1] + sl[-1] * (limit - e_lo[-1])
            point[-1] = -np.inf
        ramp_hi = np.where(sl > 0, ramp_end, -np.inf)

        vals = np.empty(1 + 2 * ks.size)
        vals[0] = w_s
        vals[1::2] = ramp_hi
        vals[2::2] = point
        prev = np.concatenate(([-np.inf], np.maximum.accumulate(vals)[:-1]))
        pieces = []
        covered = y0
        for k in np.flatnonzero(vals > prev + self.atol):
            lo, hi = max(prev[k], y0), min(vals[k], y1)
            if k % 2 == 1:
                r = (k - 1) // 2
                lo = max(lo, base[r])
            if hi > lo:
                u0, u1 = (lo - y0) / m, (hi - y0) / m
                if k == 0:
                    pieces.append(KernelPiece(u0, u1, s, 0.0))
                elif k % 2 == 1:
                    alpha = e_lo[r] + (y0 - base[r]) / sl[r]
                    pieces.append(KernelPiece(u0, u1, float(alpha), m / sl[r]))
                else:
                    pieces.append(KernelPiece(u0, u1, float(ev[ks[(k - 2) // 2]]), 0.0))
                covered = hi
            if vals[k] >= y1:
                break
        if covered >= y1 - self.atol:
            covered = y1
            if pieces:
                last = pieces[-1]
                pieces[-1] = KernelPiece(last.u0, 1.0, last.offset, last.slope)
        u_cov = 1.0 if covered == y1 else (covered - y0) / m
        if u_cov < 1.0:
            pieces.append(KernelPiece(max(u_cov, 0.0), 1.0, INFINITE, 0.0))
        pieces = [KernelPiece(float(p.u0), float(p.u1), float(p.offset), float(p.slope))
                  for p in pieces]
        return KernelSample(s, pieces)


@dataclass(frozen=True)
class KernelPiece:
    """On ``u in (u0, u1]`` the target is ``offset + slope * u`` (``inf`` if unallocated)."""

    u0: float
    u1: float
    offset: float
    slope: float

    @property
    def length(self) -> float:
        return self.u1 - self.u0

    def target(self, u):
        if math.isinf(self.offset):
            return np.full_like(np.asarray(u, dtype=float), np.inf)
        return self.offset + self.slope * np.asarray(u, dtype=float)

    @property
    def lo(self) -> float:
        return float(min(self.target(self.u0), self.target(self.u1)))

    @property
    def hi(self) -> float:
        return float(max(self.target(self.u0), self.target(self.u1)))


@dataclass(frozen=True)
class KernelSample:
    """The kernel ``K(s, .)`` as a partition of ``u in [0, 1]`` into target pieces."""

    source: float
    pieces: list = field(default_factory=list)

    @property
    def total_length(self) -> float:
        return float(sum(p.length for p in self.pieces))

    def target(self, u: float) -> float:
        for p in self.pieces:
            if p.u0 <= u <= p.u1:
                return float(p.target(u))
        return INFINITE

    def mass(self, lo: float, hi: float) -> float:
        """``K(s, [lo, hi])``: the u-measure of pieces landing in the interval."""
        total = 0.0
        for p in self.pieces:
            if math.isinf(p.offset):
                continue
            if p.slope == 0:
                if lo <= p.offset <= hi:
                    total += p.length
                continue
            ua = (lo - p.offset) / p.slope
            ub = (hi - p.offset) / p.slope
            ua, ub = min(ua, ub), max(ua, ub)
            total += max(0.0, min(ub, p.u1) - max(ua, p.u0))
        return total


# -- functional wrappers --------------------------------------------------

def _scalar(x):
    x = np.asarray(x)
    return float(x[0]) if x.size == 1 else x


def tau(xi: HybridMeasure, eta: HybridMeasure, s, search_limit: float | None = None):
    return _scalar(BalanceScanner(xi, eta).tau(s, search_limit))


def tau_u(xi: HybridMeasure, eta: HybridMeasure, s, u, search_limit: float | None = None):
    return _scalar(BalanceScanner(xi, eta).tau_u(s, u, search_limit))


def kernel(xi: HybridMeasure, eta: HybridMeasure, s: float,
           search_limit: float | None = None) -> KernelSample:
    return BalanceScanner(xi, eta).kernel(s, search_limit)


# -- time change ----------------------------------------------------------

class TimeChange:
    """Stretching of the axis at every atom of ``xi`` and ``eta`` by its size.

    ``forward(s) = s + A[0, s)`` for ``s >= 0`` and ``s - A[s, 0)`` for
    ``s < 0``, where ``A`` collects the atoms of both measures.  ``inverse`` is
    the continuous generalized inverse ``inf{s : forward(s) >= t}``.
    """

    def __init__(self, xi: HybridMeasure, eta: HybridMeasure):
        if xi.window != eta.window:
            raise PreconditionError("time change needs a shared window")
        a, b = xi.window
        if not a <= 0.0 <= b:
            raise PreconditionError("the window must contain the origin")
        self.xi, self.eta = xi, eta
        self.window = xi.window
        locs = np.concatenate((xi.atom_locs, eta.atom_locs))
        ms = np.concatenate((xi.atom_masses, eta.atom_masses))
        order = np.argsort(locs, kind="stable")
        locs, ms = locs[order], ms[order]
        if locs.size:
            locs, start = np.unique(locs, return_index=True)
            ms = np.add.reduceat(ms, start)
        self.locs = locs
        self.masses = ms
        self._cum = np.concatenate(([0.0], np.cumsum(ms)))
        self._origin = self._cum[np.searchsorted(locs, 0.0, side="left")]
        self.images = self.forward(locs) if locs.size else np.empty(0)

    def jump(self, s):
        k = np.searchsorted(self.locs, s, side="left")
        kk = np.minimum(k, max(self.locs.size - 1, 0))
        if self.locs.size == 0:
            return np.zeros_like(np.asarray(s, dtype=float))
        return np.where((k < self.locs.size) & (self.locs[kk] == s), self.masses[kk], 0.0)

    def forward(self, s):
        s = np.asarray(s, dtype=float)
        before = self._cum[np.searchsorted(self.locs, s, side="left")]
        out = s + before - self._origin
        return out if out.ndim else float(out)

    def inverse(self, t):
        t = np.asarray(t, dtype=float)
        if self.locs.size == 0:
            out = t + self._origin
            return out if out.ndim else float(out)
        j = np.searchsorted(self.images, t, side="right") - 1
        jj = np.maximum(j, 0)
        inside = (j >= 0) & (t <= self.images[jj] + self.masses[jj])
        passed = self._cum[j + 1]
        out = np.where(inside, self.locs[jj], t - passed + self._origin)
        return out if out.ndim else float(out)

    @property
    def image_window(self) -> tuple[float, float]:
        a, b = self.window
        return (float(self.forward(a)), float(self.forward(b) + self.jump(b)))

    def stretch(self) -> tuple[HybridMeasure, HybridMeasure]:
        """Stretched pair: diffuse parts moved by ``forward``, atoms spread over their length."""
        xi, eta = self.xi, self.eta
        pts = np.union1d(np.union1d(xi.breakpoints, eta.breakpoints), self.locs)
        jumps = np.asarray(self.jump(pts))
        zp = np.asarray(self.forward(pts))
        n = pts.size
        # slot 2k holds the stretched atom at pts[k], slot 2k+1 the cell (pts[k], pts[k+1])
        ends = np.empty(2 * n - 1)
        ends[0::2] = zp + jumps
        ends[1::2] = zp[1:]
        xd = np.empty(2 * n - 1)
        ed = np.empty(2 * n - 1)
        xd[0::2] = (np.asarray(xi.atom_at(pts)) > 0).astype(float)
        ed[0::2] = (np.asarray(eta.atom_at(pts)) > 0).astype(float)
        xd[1::2] = xi.on_grid(pts)
        ed[1::2] = eta.on_grid(pts)
        edges = np.concatenate(([zp[0]], ends))
        keep = np.diff(edges) > 0
        grid = np.concatenate(([edges[0]], edges[1:][keep]))
        window = (float(grid[0]), float(grid[-1]))
        return (HybridMeasure(window, grid, xd[keep]).simplify(),
                HybridMeasure(window, grid, ed[keep]).simplify())


def build_time_change(xi: HybridMeasure, eta: HybridMeasure) -> TimeChange:
    return TimeChange(xi, eta)


def stretch(xi: HybridMeasure, eta: HybridMeasure):
    """The diffuse pair obtained by spreading every atom uniformly over its own length."""
    if not mutually_singular(xi, eta):
        raise PreconditionError("stretch needs mutually singular inputs")
    return TimeChange(xi, eta).stretch()


def tau_star(xi_star: HybridMeasure, eta_star: HybridMeasure, s,
             search_limit: float | None = None):
    if not (xi_star.is_diffuse and eta_star.is_diffuse):
        raise PreconditionError("tau_star is defined for diffuse measures")
    return tau(xi_star, eta_star, s, search_limit)


# -- pushforward and balance ----------------------------------------------

@dataclass
class BalanceReport:
    max_interval_error: float
    unallocated_mass: float
    grid_step: float
    unresolved_mass: float = 0.0
    compare_range: tuple = (0.0, 0.0)

    @property
    def balanced(self) -> bool:
        return self.max_interval_error < 1e-6 and self.unallocated_mass == 0.0

    def to_dict(self) -> dict:
        return {
            "max_interval_error": self.max_interval_error,
            "unallocated_mass": self.unallocated_mass,
            "grid_step": self.grid_step,
        }


def _cells(points, lo, hi, step):
    """Cells of ``points`` clipped to ``[lo, hi]`` and subdivided to width <= step."""
    pts = np.asarray(points, dtype=float)
    pts = np.concatenate(([lo], pts[(pts > lo) & (pts < hi)], [hi]))
    widths = np.diff(pts)
    n_sub = np.maximum(1, np.ceil(widths / step - 1e-9).astype(np.int64))
    starts = np.repeat(pts[:-1], n_sub)
    sub_w = np.repeat(widths / n_sub, n_sub)
    offs = np.arange(n_sub.sum()) - np.repeat(np.cumsum(n_sub) - n_sub, n_sub)
    p = starts + offs * sub_w
    q = np.where(offs == np.repeat(n_sub - 1, n_sub), np.repeat(pts[1:], n_sub), p + sub_w)
    return p, q


def pushforward(xi: HybridMeasure, eta: HybridMeasure, source: HybridMeasure | None = None,
                search_limit: float | None = None, source_range=None, grid_step: float = 1e-3,
                min_width: float = 1e-12, max_depth: int = 60):
    """Image of ``source`` (default ``xi``) under the kernel balancing ``xi`` and ``eta``.

    Diffuse source mass is pushed through ``tau^0`` cell by cell.  Inside a
    cell without events the allocation is affine as long as the first
    passage happens on the same segment in the same way, so the image of
    such a cell is a uniform density (or an atom).  Cells where that fails
    are bisected; the mass left in cells narrower than ``min_width`` is
    reported as unresolved.  Atoms of the source are sent through the kernel
    pieces.

    Returns ``(image, unallocated_mass, unresolved_mass)``.
    """
    scanner = BalanceScanner(xi, eta)
    if source is None:
        source = xi
    if source.window != xi.window:
        raise PreconditionError("source must live on the shared window")
    a, b = xi.window
    limit = b if search_limit is None else float(search_limit)
    lo, hi = (a, b) if source_range is None else (float(source_range[0]), float(source_range[1]))

    grid = np.union1d(scanner.events, source.breakpoints)
    p, q = _cells(grid, lo, hi, grid_step)
    d = source.density_at(0.5 * (p + q))
    sel = d > 0
    p, q, d = p[sel], q[sel], d[sel]

    atoms_at = []
    atoms_mass = []
    ramps = []  # (lo, hi, mass)
    unallocated = 0.0
    unresolved = 0.0

    (tp, sp, kp), (tq, sq, kq) = scanner.interior_limits(p, q, limit)
    depth = 0
    while p.size:
        mass = d * (q - p)
        same = (sp == sq) & (kp == kq)
        imm = same & (kp == _START)
        const = same & (kp == _POINT)
        lin = same & (kp == _RAMP)
        lost = (kp == _NONE) & (kq == _NONE)
        # identity on the cell
        if np.any(imm):
            ramps.append(np.stack((p[imm], q[imm], mass[imm]), axis=1))
        if np.any(const):
            atoms_at.append(tp[const])
            atoms_mass.append(mass[const])
        if np.any(lin):
            lo_t = np.minimum(tp[lin], tq[lin])
            hi_t = np.maximum(tp[lin], tq[lin])
            ramps.append(np.stack((lo_t, hi_t, mass[lin]), axis=1))
        unallocated += float(mass[lost].sum())
        rest = ~(imm | const | lin | lost)
        if not np.any(rest):
            break
        p, q, d = p[rest], q[rest], d[rest]
        tp, sp, kp = tp[rest], sp[rest], kp[rest]
        tq, sq, kq = tq[rest], sq[rest], kq[rest]
        narrow = (q - p) < min_width
        depth += 1
        if depth > max_depth or np.all(narrow):
            unresolved += float((d * (q - p)).sum())
            break
        if np.any(narrow):
            unresolved += float((d[narrow] * (q[narrow] - p[narrow])).sum())
            keep = ~narrow
            p, q, d = p[keep], q[keep], d[keep]
            tp, sp, kp = tp[keep], sp[keep], kp[keep]
            tq, sq, kq = tq[keep], sq[keep], kq[keep]
        m = 0.5 * (p + q)
        tm, sm, km = scanner.interior(m, limit)
        p = np.concatenate((p, m))
        q = np.concatenate((m, q))
        d = np.concatenate((d, d))
        tp, sp, kp = np.concatenate((tp, tm)), np.concatenate((sp, sm)), np.concatenate((kp, km))
        tq, sq, kq = np.concatenate((tm, tq)), np.concatenate((sm, sq)), np.concatenate((km, kq))

    keep = (source.atom_locs >= lo) & (source.atom_locs <= hi)
    for s, m in zip(source.atom_locs[keep], source.atom_masses[keep]):
        ks = scanner.kernel(float(s), limit) if xi.atom_at(s) > 0 else KernelSample(
            float(s), [KernelPiece(0.0, 1.0, float(scanner.tau_u(s, 0.0, limit)[0]), 0.0)])
        for piece in ks.pieces:
            w = m * piece.length
            if math.isinf(piece.offset):
                unallocated += w
            elif piece.slope == 0:
                atoms_at.append(np.array([piece.offset]))
                atoms_mass.append(np.array([w]))
            else:
                ramps.append(np.array([[piece.lo, piece.hi, w]]))

    image = _assemble(xi.window, atoms_at, atoms_mass, ramps)
    return image, unallocated, unresolved


def _assemble(window, atoms_at, atoms_mass, ramps) -> HybridMeasure:
    a, b = window
    locs = np.concatenate(atoms_at) if atoms_at else np.empty(0)
    ms = np.concatenate(atoms_mass) if atoms_mass else np.empty(0)
    r = np.concatenate(ramps) if ramps else np.empty((0, 3))
    degenerate = (r[:, 1] - r[:, 0]) <= 0
    if np.any(degenerate):
        locs = np.concatenate((locs, r[degenerate, 0]))
        ms = np.concatenate((ms, r[degenerate, 2]))
        r = r[~degenerate]
    pos = ms > 0
    locs, ms = locs[pos], ms[pos]
    if locs.size:
        order = np.argsort(locs, kind="stable")
        locs, ms = locs[order], ms[order]
        locs, start = np.unique(locs, return_index=True)
        ms = np.add.reduceat(ms, start)
    lo_r = np.clip(r[:, 0], a, b)
    hi_r = np.clip(r[:, 1], a, b)
    dens = r[:, 2] / (r[:, 1] - r[:, 0])
    pts = np.unique(np.concatenate(([a, b], lo_r, hi_r)))
    delta = np.zeros(pts.size)
    np.add.at(delta, np.searchsorted(pts, lo_r), dens)
    np.add.at(delta, np.searchsorted(pts, hi_r), -dens)
    cell_d = np.maximum(np.cumsum(delta)[:-1], 0.0)
    return HybridMeasure(window, pts, cell_d, (locs, ms))


def verify_balance(xi: HybridMeasure, eta: HybridMeasure, grid_step: float,
                   search_limit: float | None = None, source: HybridMeasure | None = None,
                   source_range=None, compare_range=None, target: HybridMeasure | None = None):
    """Compare the image of the source with the target on a grid of intervals.

    Returns ``(BalanceReport, image)``.  Intervals are half-open
    ``[g_k, g_{k+1})`` except the last one, which is closed; only intervals
    inside ``compare_range`` are used.
    """
    image, unallocated, unresolved = pushforward(xi, eta, source, search_limit,
                                                 source_range, grid_step)
    target = eta if target is None else target
    a, b = xi.window
    lo, hi = (a, b) if compare_range is None else compare_range
    n = max(1, int(round((hi - lo) / grid_step)))
    g = lo + (hi - lo) * np.arange(n + 1) / n
    got = image.mass(g[:-1], g[1:], True, False)
    want = target.mass(g[:-1], g[1:], True, False)
    # the last interval is closed so that an atom at the right end is compared too
    got[-1] += image.atom_at(g[-1])
    want[-1] += target.atom_at(g[-1])
    err = float(np.max(np.abs(got - want))) if n else 0.0
    report = BalanceReport(err, float(unallocated), float(grid_step), float(unresolved),
                           (float(lo), float(hi)))
    return report, image
