"""Particle swarm optimizer with fitness-adaptive inertia weight.

Per particle n at iteration k::

    x[n,k] = x[n,k-1] + V[n,k-1]
    V[n,k] = w[n,k] V[n,k-1] + c1 r1 (pbest[n] - x[n,k]) + c2 r2 (gbest - x[n,k])
    w[n,k] = w_min + (w_max - w_min) (f - f_min) / (f_avg - f_min)   if f <= f_avg
             w_max                                                   otherwise

r1, r2 are drawn per dimension.  Positions are clamped to the box (the
offending velocity component is zeroed) and velocities are capped at
``v_max_frac`` of each dimension's range.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ObjectiveFailure(RuntimeError):
    def __init__(self, index: int, cause: BaseException | str):
        super().__init__(f"objective failed for particle {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass
class ApsoConfig:
    bounds: np.ndarray
    n_particles: int = 100
    c1: float = 2.0
    c2: float = 2.0
    w_min: float = 0.4
    w_max: float = 0.9
    max_iters: int = 100
    seed: int = 0
    v_max_frac: float = 0.2

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2:
            raise ValueError("bounds must have shape (dims, 2)")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValueError("each bound needs lo < hi")
        if not 0 < self.w_min < self.w_max:
            raise ValueError("need 0 < w_min < w_max")
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.v_max_frac > 0:
            raise ValueError("v_max_frac must be positive")

    @property
    def dims(self) -> int:
        return self.bounds.shape[0]


@dataclass
class SwarmState:
    positions: np.ndarray
    velocities: np.ndarray
    fitness: np.ndarray
    pbest: np.ndarray
    pbest_fitness: np.ndarray
    gbest: np.ndarray
    gbest_fitness: float
    iteration: int = 0
    weights: np.ndarray | None = None

    def copy(self) -> "SwarmState":
        return SwarmState(
            self.positions.copy(), self.velocities.copy(), self.fitness.copy(),
            self.pbest.copy(), self.pbest_fitness.copy(), self.gbest.copy(),
            self.gbest_fitness, self.iteration,
            None if self.weights is None else self.weights.copy(),
        )


@dataclass
class OptimizeResult:
    best_position: np.ndarray
    best_fitness: float
    history: np.ndarray  # best fitness after initialization and after each iteration
    state: SwarmState = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.best_position, self.best_fitness, self.history))


def inertia_weight(f, f_min, f_avg, w_min: float = 0.4, w_max: float = 0.9):
    """Adaptive inertia; vectorized over ``f``."""
    f = np.asarray(f, dtype=float)
    spread = f_avg - f_min
    if not spread > 0:
        w = np.full(f.shape, w_max)
    else:
        with np.errstate(invalid="ignore"):
            w = w_min + (w_max - w_min) * (f - f_min) / spread
        w = np.where(f <= f_avg, w, w_max)
    w = np.clip(w, w_min, w_max)
    return float(w) if w.ndim == 0 else w


def _fitness_stats(fitness):
    finite = fitness[np.isfinite(fitness)]
    if finite.size == 0:
        return np.inf, np.inf
    return finite.min(), finite.mean()


def evaluate(objective: Callable, positions: np.ndarray, vectorized: bool = False, map_fn=None) -> np.ndarray:
    """Fitness of every row of ``positions``.  ``map_fn`` (e.g. an executor's
    map) may evaluate particles concurrently; results keep particle order."""
    if vectorized:
        try:
            out = np.asarray(objective(positions), dtype=float).reshape(-1)
        except ObjectiveFailure:
            raise
        except Exception as exc:
            raise ObjectiveFailure(-1, exc) from exc
        if out.shape[0] != positions.shape[0]:
            raise ObjectiveFailure(-1, "vectorized objective returned the wrong length")
    else:
        def call(i):
            try:
                return float(objective(positions[i]))
            except Exception as exc:
                raise ObjectiveFailure(i, exc) from exc

        idx = range(positions.shape[0])
        out = np.array(list(map_fn(call, idx) if map_fn else map(call, idx)), dtype=float)
    bad = np.flatnonzero(np.isnan(out))
    if bad.size:
        raise ObjectiveFailure(int(bad[0]), "fitness is NaN")
    return out


def _v_cap(config: ApsoConfig) -> np.ndarray:
    return config.v_max_frac * (config.bounds[:, 1] - config.bounds[:, 0])


def init_swarm(objective, config: ApsoConfig, rng: np.random.Generator, init_positions=None,
               vectorized: bool = False, map_fn=None) -> SwarmState:
    lo, hi = config.bounds[:, 0], config.bounds[:, 1]
    x = lo + (hi - lo) * rng.random((config.n_particles, config.dims))
    if init_positions is not None:
        seeds = np.atleast_2d(np.asarray(init_positions, dtype=float))[: config.n_particles]
        x[: len(seeds)] = np.clip(seeds, lo, hi)
    cap = _v_cap(config)
    v = cap * (2.0 * rng.random(x.shape) - 1.0)
    f = evaluate(objective, x, vectorized, map_fn)
    best = int(np.argmin(f))
    f_min, f_avg = _fitness_stats(f)
    w = inertia_weight(f, f_min, f_avg, config.w_min, config.w_max)
    return SwarmState(x, v, f, x.copy(), f.copy(), x[best].copy(), float(f[best]), 0, w)


def step_swarm(swarm: SwarmState, objective, config: ApsoConfig, rng: np.random.Generator,
               vectorized: bool = False, map_fn=None) -> SwarmState:
    """One iteration; returns a new state (the input is not modified)."""
    lo, hi = config.bounds[:, 0], config.bounds[:, 1]
    cap = _v_cap(config)
    s = swarm.copy()
    # velocity from the previous positions and bests, then move
    w = s.weights if s.weights is not None else np.full(config.n_particles, config.w_max)
    r1 = rng.random(s.positions.shape)
    r2 = rng.random(s.positions.shape)
    v = (
        w[:, None] * s.velocities
        + config.c1 * r1 * (s.pbest - s.positions)
        + config.c2 * r2 * (s.gbest[None, :] - s.positions)
    )
    v = np.clip(v, -cap, cap)
    x = s.positions + v
    out = (x < lo) | (x > hi)
    x = np.clip(x, lo, hi)
    v[out] = 0.0
    f = evaluate(objective, x, vectorized, map_fn)
    # reduction in particle-index order
    for n in range(config.n_particles):
        if f[n] < s.pbest_fitness[n]:
            s.pbest_fitness[n] = f[n]
            s.pbest[n] = x[n]
            if f[n] < s.gbest_fitness:
                s.gbest_fitness = float(f[n])
                s.gbest = x[n].copy()
    f_min, f_avg = _fitness_stats(f)
    s.weights = inertia_weight(f, f_min, f_avg, config.w_min, config.w_max)
    s.positions, s.velocities, s.fitness = x, v, f
    s.iteration += 1
    return s


def optimize(objective: Callable, config: ApsoConfig, init_positions=None, vectorized: bool = False,
             map_fn=None, callback=None) -> OptimizeResult:
    """Minimize ``objective`` over ``config.bounds``.

    Deterministic given ``config.seed``.  ``callback(state)`` is called after
    every iteration; returning True stops early.
    """
    rng = np.random.default_rng(config.seed)
    state = init_swarm(objective, config, rng, init_positions, vectorized, map_fn)
    history = [state.gbest_fitness]
    for _ in range(config.max_iters):
        state = step_swarm(state, objective, config, rng, vectorized, map_fn)
        history.append(state.gbest_fitness)
        if callback is not None and callback(state):
            break
    return OptimizeResult(state.gbest.copy(), state.gbest_fitness, np.array(history), state)


# standard test functions

def sphere(x):
    x = np.asarray(x)
    return np.sum(x**2, axis=-1)


def rosenbrock(x):
    x = np.asarray(x)
    return np.sum(100.0 * (x[..., 1:] - x[..., :-1] ** 2) ** 2 + (1 - x[..., :-1]) ** 2, axis=-1)
