"""Excursion predicates, the excursion point processes as measures, rate estimates and pools.

The Itô measure of Brownian excursions has lifetime density proportional to
``r**-1.5``.  The proportionality constant depends on the local time
normalization and is never assumed here: rates are always estimated from
simulated paths, and distributional checks use conditional laws, which do
not depend on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .brownian import Excursion, ExcursionTable, GridPath, LazyBrownianPath, _HEADER, _MAGIC
from .errors import EstimationError, HarvestError, HorizonError, PreconditionError
from .measure import HybridMeasure

__all__ = [
    "ExcursionPredicate",
    "lifetime_gt",
    "lifetime_in",
    "max_height_gt",
    "positive_and_lifetime_in",
    "build_N",
    "build_N_A",
    "build_N_prime_A",
    "RateEstimate",
    "estimate_nu",
    "estimate_nu_prime",
    "arrival_local_times",
    "overlap_mass",
    "complete_window",
    "next_excursion",
    "run_to_local_time",
    "calibrate",
    "ExcursionPool",
    "harvest_pool",
    "harvest_lazy",
]

KINDS = ("lifetime_gt", "lifetime_in", "max_height_gt", "positive_and_lifetime_in")


@dataclass(frozen=True)
class ExcursionPredicate:
    """A set ``A`` of excursions described by a kind and one or two parameters.

    ``lifetime_gt(c)`` is ``{D > c}``; ``lifetime_in(a, b)`` is
    ``{a < D < b}``; ``max_height_gt(h)`` is ``{max |e| > h}``;
    ``positive_and_lifetime_in(a, b)`` adds the sign condition.

    Heights are taken over the realized path nodes, so on adaptively sampled
    paths ``max_height_gt`` sees only the values that were drawn.
    """

    kind: str
    a: float
    b: float = math.inf

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PreconditionError(f"unknown predicate kind {self.kind!r}")
        if not (self.a > 0 and self.b > self.a):
            raise PreconditionError("predicate parameters must satisfy 0 < a < b")
        if self.kind in ("lifetime_in", "positive_and_lifetime_in") and not math.isfinite(self.b):
            raise PreconditionError("lifetime_in needs a finite upper bound")

    def mask(self, table: ExcursionTable) -> np.ndarray:
        D = table.lifetime
        if self.kind == "lifetime_gt":
            return D > self.a
        if self.kind == "lifetime_in":
            return (D > self.a) & (D < self.b)
        if self.kind == "max_height_gt":
            return table.max_abs > self.a
        return (D > self.a) & (D < self.b) & (table.sign > 0)

    def __call__(self, e: Excursion) -> bool:
        D = e.lifetime
        if self.kind == "lifetime_gt":
            return D > self.a
        if self.kind == "lifetime_in":
            return self.a < D < self.b
        if self.kind == "max_height_gt":
            return e.max_abs > self.a
        return self.a < D < self.b and e.sign > 0

    @property
    def has_finite_bismut_mass(self) -> bool:
        return self.kind in ("lifetime_in", "positive_and_lifetime_in")

    def lifetime_cdf(self, r):
        """CDF of the lifetime under the Itô measure conditioned on ``A``."""
        r = np.asarray(r, dtype=float)
        if self.kind == "lifetime_gt":
            return np.where(r > self.a, 1.0 - np.sqrt(self.a / np.maximum(r, self.a)), 0.0)
        if self.kind in ("lifetime_in", "positive_and_lifetime_in"):
            x = np.clip(r, self.a, self.b)
            return (self.a ** -0.5 - x ** -0.5) / (self.a ** -0.5 - self.b ** -0.5)
        raise PreconditionError("no closed-form lifetime law for height predicates")

    def bismut_lifetime_cdf(self, r):
        """CDF of the lifetime under the length-biased measure conditioned on ``A``."""
        if not self.has_finite_bismut_mass:
            raise PreconditionError("length-biased law needs a bounded lifetime window")
        x = np.clip(np.asarray(r, dtype=float), self.a, self.b)
        return (np.sqrt(x) - math.sqrt(self.a)) / (math.sqrt(self.b) - math.sqrt(self.a))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "a": self.a}
        if math.isfinite(self.b):
            d["b"] = self.b
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExcursionPredicate":
        return cls(d["kind"], float(d["a"]), float(d.get("b", math.inf)))


def lifetime_gt(c: float) -> ExcursionPredicate:
    return ExcursionPredicate("lifetime_gt", c)


def lifetime_in(a: float, b: float) -> ExcursionPredicate:
    return ExcursionPredicate("lifetime_in", a, b)


def max_height_gt(h: float) -> ExcursionPredicate:
    return ExcursionPredicate("max_height_gt", h)


def positive_and_lifetime_in(a: float, b: float) -> ExcursionPredicate:
    return ExcursionPredicate("positive_and_lifetime_in", a, b)


# -- point processes as measures ------------------------------------------------

def _window(path: GridPath, window):
    return (path.t_min, path.t_max) if window is None else (float(window[0]), float(window[1]))


def build_N(path: GridPath, window=None, pred=None) -> HybridMeasure:
    """Unit atoms at the left ends of complete excursions (optionally filtered by ``pred``)."""
    w = _window(path, window)
    tab = path.excursion_table()
    keep = (tab.start >= w[0]) & (tab.start <= w[1])
    if pred is not None:
        keep &= pred.mask(tab)
    return HybridMeasure.from_atoms(w, tab.start[keep], 1.0)


def build_N_A(path: GridPath, A: ExcursionPredicate, nu_A_hat: float,
              window=None) -> HybridMeasure:
    """Atoms of mass ``1 / nu_A_hat`` at left ends of ``A``-excursions."""
    if not nu_A_hat > 0:
        raise PreconditionError("nu_A_hat must be positive")
    return build_N(path, window, A).scale(1.0 / nu_A_hat)


def build_N_prime_A(path: GridPath, A: ExcursionPredicate, nu_prime_A_hat: float,
                    window=None) -> HybridMeasure:
    """Density ``1 / nu_prime_A_hat`` on the union of ``A``-excursion intervals."""
    if not nu_prime_A_hat > 0:
        raise PreconditionError("nu_prime_A_hat must be positive")
    a, b = _window(path, window)
    tab = path.excursion_table()
    keep = A.mask(tab) & (tab.end > a) & (tab.start < b)
    lo = np.maximum(tab.start[keep], a)
    hi = np.minimum(tab.end[keep], b)
    if lo.size == 0:
        return HybridMeasure.zero((a, b))
    # consecutive A-excursions share an endpoint; cells alternate gap / inside
    pts = np.unique(np.concatenate(([a, b], lo, hi)))
    mids = 0.5 * (pts[:-1] + pts[1:])
    j = np.searchsorted(lo, mids, side="right") - 1
    inside = (j >= 0) & (mids < hi[np.maximum(j, 0)])
    dens = np.where(inside, 1.0 / nu_prime_A_hat, 0.0)
    return HybridMeasure((a, b), pts, dens, _check=False)


# -- rates ------------------------------------------------------------------------

@dataclass(frozen=True)
class RateEstimate:
    """Rate of ``A``-excursions per unit local time, with a Poisson standard error."""

    value: float
    se: float
    count: int
    local_time: float
    weighted: bool = False

    @property
    def relative_se(self) -> float:
        return self.se / self.value

    def to_dict(self) -> dict:
        return {"value": self.value, "se": self.se, "count": self.count,
                "local_time": self.local_time, "weighted": self.weighted}


def complete_window(path: GridPath) -> GridPath:
    """The part of ``path`` between its first and last zero (only complete excursions)."""
    z = path.zeros()
    if z.size < 2:
        raise EstimationError("path has fewer than two zeros")
    p = path.with_zeros()
    return p.restrict(z[0], z[-1])


def overlap_mass(path: GridPath, mu: HybridMeasure, nu: HybridMeasure,
                 eps: float | None = None) -> float:
    """Common part ``int min(f_mu, f_nu)`` of two diffuse measures on ``path``.

    Cells with an endpoint in ``[-eps, eps]`` (default ``sqrt(step)``) are
    left out: near a zero the grid cannot tell local time from the inside
    of an excursion.  Pass ``eps=0`` to count every cell.
    """
    eps = math.sqrt(path.step) if eps is None else float(eps)
    pts = np.union1d(mu.breakpoints, nu.breakpoints)
    if pts.size < 2:
        return 0.0
    v = np.abs(np.interp(pts, path.times, path.values)) if eps > 0 else None
    common = np.minimum(mu.on_grid(pts), nu.on_grid(pts)) * np.diff(pts)
    if v is not None:
        common = common[np.minimum(v[:-1], v[1:]) > eps]
    return float(common.sum())


def _window_local_time(path: GridPath, estimator=None) -> float:
    """Local time between the first and last zero, measured on the whole path."""
    z = path.zeros()
    return float(path.with_zeros().local_time_measure(estimator).mass(z[0], z[-1]))


def _rate(paths, A: ExcursionPredicate, weighted: bool, estimator=None) -> RateEstimate:
    total, total_sq, count, lt = 0.0, 0.0, 0, 0.0
    for path in paths:
        p = complete_window(path)
        tab = p.excursion_table()
        m = A.mask(tab)
        D = tab.lifetime[m]
        count += int(m.sum())
        total += float(D.sum()) if weighted else float(m.sum())
        total_sq += float(np.sum(D ** 2)) if weighted else float(m.sum())
        lt += _window_local_time(path, estimator)
    if count == 0:
        raise EstimationError("no qualifying excursions in the calibration paths")
    if lt <= 0:
        raise EstimationError("calibration paths carry no local time")
    return RateEstimate(total / lt, math.sqrt(total_sq) / lt, count, lt, weighted)


def estimate_nu(paths, A: ExcursionPredicate, estimator=None) -> RateEstimate:
    """``#A-excursions / local time`` over the complete part of every path."""
    return _rate(paths, A, False, estimator)


def estimate_nu_prime(paths, A: ExcursionPredicate, estimator=None) -> RateEstimate:
    """``sum of A-excursion lifetimes / local time`` (the length-biased rate)."""
    return _rate(paths, A, True, estimator)


def arrival_local_times(path: GridPath, A: ExcursionPredicate, origin: float | None = None,
                        estimator=None) -> np.ndarray:
    """Local time ``l[origin, s]`` at the left end ``s`` of every ``A``-excursion after ``origin``."""
    origin = path.t_min if origin is None else origin
    tab = path.excursion_table()
    s = tab.start[A.mask(tab) & (tab.start >= origin)]
    mu = path.local_time_measure(estimator)
    return np.asarray(mu.mass(np.full(s.size, origin), s)) if s.size else np.empty(0)


# -- lazy paths ---------------------------------------------------------------------

def next_excursion(sampler: LazyBrownianPath, A: ExcursionPredicate, after: float = 0.0):
    """First complete ``A``-excursion of ``sampler`` with left end ``>= after``.

    The path is extended forward until one has been completed.  Returns the
    path snapshot and the row index into its excursion table.
    """
    blocks = 1
    while True:
        path = sampler.path()
        tab = path.excursion_table()
        hit = np.flatnonzero(A.mask(tab) & (tab.start >= after))
        if hit.size:
            return path, int(hit[0])
        # doubling batches keep the rescans linear in the final path size
        for _ in range(blocks):
            sampler.extend_forward()
        blocks *= 2


def run_to_local_time(sampler: LazyBrownianPath, budget: float, estimator=None) -> GridPath:
    """Path on ``[0, z]`` for the first zero ``z`` with ``l[0, z] >= budget``.

    The sampler is extended forward until such a zero exists.
    """
    while True:
        path = sampler.path(0.0, None)
        z = path.zeros()
        if z.size >= 2:
            p = path.with_zeros().restrict(0.0, z[-1])
            mu = p.local_time_measure(estimator)
            if mu.total_mass >= budget:
                z = z[z > 0]
                cum = np.asarray(mu.mass(np.zeros(z.size), z))
                stop = float(z[np.searchsorted(cum, budget)])
                return p.restrict(0.0, stop)
            sampler.extend_local_time(max(budget - mu.total_mass, 0.1 * budget))
        else:
            sampler.extend_forward()


def calibrate(seed, A: ExcursionPredicate, step: float = 1e-4, target_rse: float = 0.01,
              weighted: bool = False, chunk: float = 200.0, tol: float = 1e-10,
              max_paths: int = 1000) -> RateEstimate:
    """Estimate a rate from independent paths until its relative SE is below ``target_rse``.

    Path ``i`` uses ``numpy.random.default_rng([*seed, i])`` and is run to
    ``chunk`` units of local time.
    """
    seed = list(np.atleast_1d(seed).tolist())
    paths = []
    for i in range(max_paths):
        sampler = LazyBrownianPath(np.random.default_rng(seed + [i]), step, tol)
        paths.append(run_to_local_time(sampler, chunk))
        try:
            est = _rate(paths, A, weighted)
        except EstimationError:
            continue
        if est.relative_se < target_rse:
            return est
    raise EstimationError("calibration did not reach the requested precision")


# -- pools --------------------------------------------------------------------------

@dataclass
class ExcursionPool:
    """Independent ``A``-excursions, one per path, used without replacement."""

    predicate: ExcursionPredicate
    step: float
    excursions: list = field(default_factory=list)
    _next: int = 0

    def __len__(self) -> int:
        return len(self.excursions)

    @property
    def lifetimes(self) -> np.ndarray:
        return np.array([e.lifetime for e in self.excursions])

    def take(self) -> Excursion:
        if self._next >= len(self.excursions):
            raise HarvestError("excursion pool exhausted")
        e = self.excursions[self._next]
        self._next += 1
        return e

    def save(self, directory) -> Path:
        """Write ``pool.bin`` (one path record per excursion) and ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        offsets = []
        with open(d / "pool.bin", "wb") as fh:
            for e in self.excursions:
                offsets.append(fh.tell())
                n = e.times.size
                fh.write(_HEADER.pack(_MAGIC, self.step, 0, n, 1))
                fh.write(np.asarray(e.values, "<f8").tobytes())
                fh.write(np.asarray(e.times, "<f8").tobytes())
        manifest = {"predicate": self.predicate.to_dict(), "count": len(self.excursions),
                    "step": self.step, "starts": [e.start for e in self.excursions],
                    "offsets": offsets, "file": "pool.bin"}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return d / "manifest.json"

    @classmethod
    def load(cls, directory) -> "ExcursionPool":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        data = (d / manifest["file"]).read_bytes()
        out = []
        for off, start in zip(manifest["offsets"], manifest["starts"]):
            _, _, _, n, _ = _HEADER.unpack_from(data, off)
            base = off + _HEADER.size
            values = np.frombuffer(data, "<f8", n, base).copy()
            times = np.frombuffer(data, "<f8", n, base + 8 * n).copy()
            sign = int(np.sign(values[np.argmax(np.abs(values))]))
            out.append(Excursion(start, times, values, float(times[-1]), sign))
        return cls(ExcursionPredicate.from_dict(manifest["predicate"]), manifest["step"], out)


def harvest_pool(paths, A: ExcursionPredicate, n: int) -> ExcursionPool:
    """The first ``A``-excursion starting at time ``>= 0`` of each path, for ``n`` paths."""
    pool = None
    for path in paths:
        if pool is None:
            pool = ExcursionPool(A, path.step)
        tab = path.excursion_table()
        hit = np.flatnonzero(A.mask(tab) & (tab.start >= 0.0))
        if hit.size:
            pool.excursions.append(path.excursion(int(hit[0])))
        if len(pool) == n:
            return pool
    raise HarvestError(f"only {0 if pool is None else len(pool)} of {n} paths held an "
                       "A-excursion after time 0")


def harvest_lazy(seed, A: ExcursionPredicate, n: int, step: float = 1e-4,
                 tol: float = 1e-10, max_time: float = 1e9) -> ExcursionPool:
    """Like :func:`harvest_pool` but each path is grown until its first ``A``-excursion ends.

    Path ``i`` uses ``numpy.random.default_rng([*seed, i])``.
    """
    seed = list(np.atleast_1d(seed).tolist())
    pool = ExcursionPool(A, step)
    for i in range(n):
        sampler = LazyBrownianPath(np.random.default_rng(seed + [i]), step, tol, max_time=max_time)
        try:
            path, j = next_excursion(sampler, A)
        except HorizonError as exc:
            raise HarvestError(f"path {i}: {exc}") from exc
        pool.excursions.append(path.excursion(j))
    return pool
