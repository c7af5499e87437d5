"""Balancing allocations of random measures and Brownian excursion embeddings."""

from .brownian import GridPath, LazyBrownianPath, simulate
from .embedding import (
    EmbeddingOutcome,
    embed_bismut,
    embed_ito,
    embed_naive,
    run_replicate,
    shift_coupling_NA_to_NpA,
)
from .excursion import (
    ExcursionPredicate,
    build_N,
    build_N_A,
    build_N_prime_A,
    estimate_nu,
    estimate_nu_prime,
    lifetime_gt,
    lifetime_in,
)
from .measure import HybridMeasure, decompose, mass, mutually_singular, periodize, shift
from .transport import INFINITE, build_time_change, kernel, stretch, tau, tau_star, tau_u

__version__ = "0.1.0"

__all__ = [
    "HybridMeasure",
    "decompose",
    "mass",
    "mutually_singular",
    "periodize",
    "shift",
    "INFINITE",
    "build_time_change",
    "kernel",
    "stretch",
    "tau",
    "tau_star",
    "tau_u",
    "GridPath",
    "LazyBrownianPath",
    "simulate",
    "ExcursionPredicate",
    "lifetime_gt",
    "lifetime_in",
    "build_N",
    "build_N_A",
    "build_N_prime_A",
    "estimate_nu",
    "estimate_nu_prime",
    "EmbeddingOutcome",
    "embed_ito",
    "embed_naive",
    "embed_bismut",
    "shift_coupling_NA_to_NpA",
    "run_replicate",
]
