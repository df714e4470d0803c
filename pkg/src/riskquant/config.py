"""Shared solver configuration.

A single config object travels through every solver so CLI flags, config
files and library callers tune the same knobs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace


def max_threads() -> int:
    """Parallelism cap, controlled by the RISKQUANT_THREADS env var (default 1)."""
    raw = os.environ.get("RISKQUANT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances, iteration budgets and seeds shared by all solvers.

    ``tol`` is relative to the sample mean for the fixed-point iterations.
    The differential-evolution block follows the classical rand/1/bin
    parameterization; ``population_size=None`` resolves to 15 per dimension.
    The entropic-transport block expresses regularization strengths as
    fractions of the sample variance so defaults are unit-free.
    """

    tol: float = 1e-10
    max_iter: int = 10_000
    damping: float = 1.0
    multistart: int = 3
    seed: int = 0
    threads: int | None = None

    # differential evolution
    population_size: int | None = None
    mutation_factor: float = 0.8
    crossover_rate: float = 0.9
    max_generations: int = 500
    de_rel_tol: float = 1e-10

    # entropic optimal transport
    ot_eps_start_frac: float = 0.1
    ot_eps_min_frac: float = 1e-4
    ot_anneal_stages: int = 6
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 10_000
    log_domain: bool = True

    def resolved_threads(self) -> int:
        return self.threads if self.threads is not None else max_threads()

    def with_overrides(self, **kwargs) -> "SolverConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})
