"""Bound-constrained differential evolution (rand/1/bin).

Mutation v = x_r1 + F*(x_r2 - x_r3) with distinct r1, r2, r3 != i, binomial
crossover with a guaranteed mutant coordinate j_rand, reflection repair at
the box, and greedy selection where the better-or-equal trial survives.
All randomness for a generation is drawn before any objective evaluation,
so parallel evaluation cannot change results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Objective = Callable[[np.ndarray], float]

_PATIENCE = 20


@dataclass(frozen=True)
class DEConfig:
    bounds: tuple[tuple[float, float], ...]
    population_size: int | None = None  # None -> 15 per dimension
    mutation_factor: float = 0.8
    crossover_rate: float = 0.9
    max_generations: int = 500
    rel_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.bounds:
            raise ValueError("bounds must be nonempty")
        for lo, hi in self.bounds:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds must be finite with low < high, got ({lo}, {hi})")
        if not 0.0 <= self.mutation_factor <= 2.0:
            raise ValueError("mutation factor must lie in [0, 2]")
        if not 0.0 <= self.crossover_rate <= 1.0:
            raise ValueError("crossover rate must lie in [0, 1]")
        if self.resolved_population() < 4:
            raise ValueError("population size must be >= 4 to draw distinct indices")

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    def resolved_population(self) -> int:
        return self.population_size if self.population_size is not None else 15 * self.dimension


@dataclass(frozen=True)
class DEResult:
    x_best: np.ndarray
    f_best: float
    generations_used: int
    best_trace: np.ndarray
    converged: bool


def _reflect_into_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    y = np.mod(x - lo, 2.0 * span)
    return lo + np.minimum(y, 2.0 * span - y)


def de_step(
    population: np.ndarray,
    fitness: np.ndarray,
    objective: Objective,
    cfg: DEConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.random.Generator]:
    """One generation of rand/1/bin: mutate, cross over, repair, select."""
    np_pop, d = population.shape
    if np_pop < 4:
        raise ValueError("population size must be >= 4")
    lo = np.array([b[0] for b in cfg.bounds])
    hi = np.array([b[1] for b in cfg.bounds])

    # draw all randomness up front; evaluation order then cannot matter
    partners = np.empty((np_pop, 3), dtype=int)
    for i in range(np_pop):
        pool = np.delete(np.arange(np_pop), i)
        partners[i] = rng.choice(pool, size=3, replace=False)
    cross = rng.random((np_pop, d)) <= cfg.crossover_rate
    j_rand = rng.integers(0, d, size=np_pop)
    cross[np.arange(np_pop), j_rand] = True

    r1, r2, r3 = partners[:, 0], partners[:, 1], partners[:, 2]
    mutants = population[r1] + cfg.mutation_factor * (population[r2] - population[r3])
    trials = np.where(cross, mutants, population)
    trials = _reflect_into_box(trials, lo, hi)

    trial_fitness = np.array([objective(trials[i]) for i in range(np_pop)])
    accept = trial_fitness <= fitness
    new_population = np.where(accept[:, None], trials, population)
    new_fitness = np.where(accept, trial_fitness, fitness)
    return new_population, new_fitness, rng


def _latin_hypercube(rng: np.random.Generator, n: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = lo.size
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return lo + (hi - lo) * u


def de_minimize(objective: Objective, cfg: DEConfig) -> DEResult:
    """Run DE from a Latin-hypercube start until the budget or the stop rule.

    Stops when the relative improvement of the best fitness stays below
    ``cfg.rel_tol`` for 20 consecutive generations, or immediately on an
    exactly-zero best fitness (the relative rule is undefined there).
    Deterministic for a fixed config.
    """
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    np_pop = cfg.resolved_population()
    lo = np.array([b[0] for b in cfg.bounds])
    hi = np.array([b[1] for b in cfg.bounds])

    population = _latin_hypercube(rng, np_pop, lo, hi)
    fitness = np.array([objective(population[i]) for i in range(np_pop)])

    trace = [float(fitness.min())]
    stall = 0
    converged = trace[0] == 0.0
    generations = 0
    while not converged and generations < cfg.max_generations:
        population, fitness, rng = de_step(population, fitness, objective, cfg, rng)
        generations += 1
        f_prev, f_now = trace[-1], float(fitness.min())
        trace.append(f_now)
        if f_now == 0.0:
            converged = True
            break
        improvement = abs(f_now - f_prev) / abs(f_prev)
        stall = stall + 1 if improvement < cfg.rel_tol else 0
        if stall >= _PATIENCE:
            converged = True
            break

    best = int(np.argmin(fitness))
    return DEResult(
        x_best=population[best].copy(),
        f_best=float(fitness[best]),
        generations_used=generations,
        best_trace=np.array(trace),
        converged=converged,
    )
