"""Deterministic property suites for the transport layer.

Each suite draws random instances from a seeded generator, evaluates an
identity on both sides and reports the largest absolute violation.  They
back the ``lemma_suite``, ``balance_suite`` and ``remark_r8`` experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instances import periodized_pair, random_singular_pair, remark_pair, remark_target
from .measure import HybridMeasure
from .transport import BalanceScanner, TimeChange, verify_balance

__all__ = ["LemmaReport", "check_pair", "lemma_suite", "balance_suite", "remark_r8"]


@dataclass
class LemmaReport:
    """Largest violation per identity, and how many evaluations went into it."""

    violations: dict = field(default_factory=lambda: {k: 0.0 for k in
                                                      ("l1", "l2", "l3", "l13", "l14")})
    evaluations: dict = field(default_factory=lambda: {k: 0 for k in
                                                       ("l1", "l2", "l3", "l13", "l14")})
    n_pairs: int = 0

    def update(self, name: str, errors) -> None:
        errors = np.asarray(errors, dtype=float)
        if errors.size:
            self.violations[name] = max(self.violations[name], float(np.max(errors)))
            self.evaluations[name] += int(errors.size)

    @property
    def max_violation(self) -> float:
        return max(self.violations.values())

    def to_dict(self) -> dict:
        return {"n_pairs": self.n_pairs, "violations": dict(self.violations),
                "evaluations": dict(self.evaluations), "max_violation": self.max_violation}


def _gap(x, y):
    """Absolute difference treating two infinities as equal and one as a full miss."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    both = np.isinf(x) & np.isinf(y)
    one = np.isinf(x) ^ np.isinf(y)
    with np.errstate(invalid="ignore"):
        d = np.abs(x - y)
    return np.where(both, 0.0, np.where(one, np.inf, d))


def check_pair(xi: HybridMeasure, eta: HybridMeasure, rng: np.random.Generator,
               report: LemmaReport, n_points: int = 8) -> None:
    """Evaluate the five time-change identities on one pair."""
    a, b = xi.window
    tc = TimeChange(xi, eta)
    xs, es = tc.stretch()
    atom_locs = tc.locs
    atom_mass = tc.masses
    xi_atom = np.asarray(xi.atom_at(atom_locs)) if atom_locs.size else np.empty(0)

    # inverse flat over every stretched atom, identity elsewhere
    if atom_locs.size:
        v = atom_mass[:, None] * np.linspace(0.0, 1.0, 5)[None, :]
        back = tc.inverse(np.asarray(tc.forward(atom_locs))[:, None] + v)
        report.update("l1", np.abs(back - atom_locs[:, None]).ravel())
    plain = rng.uniform(a, b, n_points)
    report.update("l1", np.abs(tc.inverse(tc.forward(plain)) - plain))

    # interval identity for the stretched source; anchors mix atoms and plain points
    pool = np.concatenate((atom_locs, rng.uniform(a, b, n_points)))
    i1 = rng.integers(0, pool.size, n_points)
    i2 = rng.integers(0, pool.size, n_points)
    s1, s2 = np.minimum(pool[i1], pool[i2]), np.maximum(pool[i1], pool[i2])
    ok = s1 < s2
    s1, s2 = s1[ok], s2[ok]
    if s1.size:
        m1 = np.asarray(tc.jump(s1))
        m2 = np.asarray(tc.jump(s2))
        v1 = rng.random(s1.size) * m1
        v2 = rng.random(s2.size) * m2
        lhs = xs.mass(np.asarray(tc.forward(s1)) + v1, np.asarray(tc.forward(s2)) + v2)
        x1 = np.asarray(xi.atom_at(s1))
        x2 = np.asarray(xi.atom_at(s2))
        e1 = np.asarray(eta.atom_at(s1))
        e2 = np.asarray(eta.atom_at(s2))
        rhs = (np.where(e1 == 0, x1 - v1, 0.0) + xi.mass(s1, s2, False, False)
               + np.where(e2 == 0, v2, 0.0))
        report.update("l2", np.abs(lhs - rhs))

    # change of variables for indicators of [lo, hi)
    lo = rng.uniform(a, b, n_points)
    hi = rng.uniform(a, b, n_points)
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    for mu, mu_s in ((xi, xs), (eta, es)):
        lhs = mu.mass(lo, hi, True, False)
        rhs = mu_s.mass(np.asarray(tc.forward(lo)), np.asarray(tc.forward(hi)), True, False)
        report.update("l3", np.abs(lhs - rhs))

    scan = BalanceScanner(xi, eta)
    scan_s = BalanceScanner(xs, es)
    # plain source points: tau* seen through the inverse equals tau^0
    s = rng.uniform(a, b, n_points)
    s = s[(np.asarray(xi.atom_at(s)) == 0) & (np.asarray(eta.atom_at(s)) == 0)]
    if s.size:
        lhs = tc.inverse(scan_s.tau(np.asarray(tc.forward(s))))
        rhs = scan.tau_u(s, 0.0)
        report.update("l13", _gap(lhs, rhs))

    # source atoms: a point inside the stretched atom maps to tau^(1-u)
    src = atom_locs[xi_atom > 0] if atom_locs.size else np.empty(0)
    if src.size:
        u = rng.random((src.size, 4))
        u[:, 0] = 0.0
        ss = np.repeat(src, 4)
        uu = u.ravel()
        m = np.asarray(xi.atom_at(ss))
        lhs = tc.inverse(scan_s.tau(np.asarray(tc.forward(ss)) + uu * m))
        rhs = scan.tau_u(ss, 1.0 - uu)
        report.update("l14", _gap(lhs, rhs))


def lemma_suite(n_pairs: int = 1000, seed: int = 0) -> LemmaReport:
    """Run the identities on ``n_pairs`` random mutually singular pairs."""
    rng = np.random.default_rng([seed, 1])
    report = LemmaReport()
    for _ in range(n_pairs):
        xi, eta = random_singular_pair(rng)
        check_pair(xi, eta, rng, report)
        report.n_pairs += 1
    return report


def balance_suite(n_pairs: int = 100, seed: int = 0, grid_step: float = 1e-3,
                  n_periods: int = 5, period: float = 1.0) -> dict:
    """Balance of random periodized pairs.

    Sources come from the first ``n_periods - 1`` periods and the image is
    compared on periods two to ``n_periods - 1``, so no source point is cut
    off by the window end and no target interval misses its sources.
    """
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    unallocated = 0.0
    unresolved = 0.0
    rows = []
    for k in range(n_pairs):
        xi, eta = periodized_pair(rng, period, n_periods)
        rep, _ = verify_balance(xi, eta, grid_step,
                                source_range=(0.0, (n_periods - 1) * period),
                                compare_range=(period, (n_periods - 1) * period))
        worst = max(worst, rep.max_interval_error)
        unallocated = max(unallocated, rep.unallocated_mass)
        unresolved = max(unresolved, rep.unresolved_mass)
        rows.append({"pair": k, **rep.to_dict(), "unresolved_mass": rep.unresolved_mass})
    return {"n_pairs": n_pairs, "grid_step": grid_step, "max_interval_error": worst,
            "max_unallocated_mass": unallocated, "max_unresolved_mass": unresolved,
            "rows": rows}


def remark_r8(shifts=(0.0, 0.7, 1.4), grid_step: float = 1e-3, n_points: int = 2001) -> dict:
    """Allocation of the non-singular period-3 pair and its failure to balance."""
    out = []
    for U in shifts:
        xi, eta, _, _ = remark_pair(float(U))
        scan = BalanceScanner(xi, eta)
        s = np.linspace(U, U + 2.0, n_points)[:-1]
        expected = 1.5 * U + 3.0 - 0.5 * s
        tau_err = float(np.max(np.abs(scan.tau(s) - expected)))
        window = xi.window
        source = HybridMeasure.from_indicator(window, [(U, U + 2.0)], 1.0)
        rep, image = verify_balance(xi, eta, grid_step, source=source,
                                    target=remark_target(U, window))
        # the whole source against the whole target, away from the window edges
        full, _ = verify_balance(xi, eta, grid_step, source_range=(U, U + 6.0),
                                 compare_range=(U + 3.0, U + 6.0))
        out.append({
            "U": float(U),
            "tau_max_error": tau_err,
            "image_vs_twice_lebesgue": rep.max_interval_error,
            "image_mass": float(image.total_mass),
            "balance_error_full_pair": full.max_interval_error,
            "balance_fails": bool(full.max_interval_error > 1e-6),
        })
    return {"shifts": out,
            "tau_max_error": max(r["tau_max_error"] for r in out),
            "image_max_error": max(r["image_vs_twice_lebesgue"] for r in out),
            "balance_fails": all(r["balance_fails"] for r in out)}

