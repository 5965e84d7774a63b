"""Bootstrap and naive particle filters.

The bootstrap recursion keeps the filter in the set of ``N``-atom measures:

1. resample ``N`` i.i.d. atoms from the previous filter (multinomial),
2. move every atom through the signal transition,
3. reweight by the observation likelihood.

The initial step reweights raw draws from the initial law without
resampling.  The naive filter never resamples and carries cumulative
log-weights along independent signal paths.

Randomness enters only through the ``rng`` argument.  Callers derive one
keyed stream per (replication, filter) with :func:`uniformpf.rng.stream`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.special import logsumexp

from uniformpf.models import ModelSpec

UNDERFLOW_THRESHOLD = 1e-300


class UnderflowError(FloatingPointError):
    """Total unnormalised weight vanished; usually a likelihood-scaling bug."""

    def __init__(self, step: Optional[int], total: float):
        self.step = step
        self.total = total
        super().__init__(f"total unnormalised weight {total:.3g} below {UNDERFLOW_THRESHOLD:g} at step {step}")


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted atomic measure ``sum_i w_i delta_{x_i}``."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.locations)
        if x.ndim == 1:
            x = x[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(x),):
            raise ValueError("need one weight per location")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-10")
        object.__setattr__(self, "locations", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, locations) -> "ParticleEnsemble":
        x = np.asarray(locations)
        return cls(x, np.full(len(x), 1.0 / len(x)))

    @property
    def n_particles(self) -> int:
        return len(self.weights)

    def integrate(self, f) -> float:
        return float(self.weights @ f(self.locations))

    def mean(self) -> np.ndarray:
        return self.weights @ self.locations


@dataclass(frozen=True)
class NaiveFilterState:
    """Endpoints of ``N`` independent signal paths with cumulative log-weights."""

    locations: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        if np.any(np.isnan(self.log_weights)):
            raise ValueError("log-weights must not be NaN")

    @property
    def n_particles(self) -> int:
        return len(self.log_weights)

    def normalized_weights(self) -> np.ndarray:
        w = np.exp(self.log_weights - logsumexp(self.log_weights))
        return w / w.sum()

    def as_ensemble(self) -> ParticleEnsemble:
        return ParticleEnsemble(self.locations, self.normalized_weights())


@dataclass(frozen=True)
class EssReport:
    step: int
    ess: float
    max_weight: float


def ess_report(weights, step: int = 0) -> EssReport:
    w = np.asarray(weights, dtype=float)
    return EssReport(step=step, ess=float(1.0 / np.sum(w * w)), max_weight=float(w.max()))


def update(ensemble: ParticleEnsemble, y, model: ModelSpec, step: Optional[int] = None) -> ParticleEnsemble:
    """Bayes reweighting of the atoms by ``likelihood(x_i, y)``; locations unchanged."""
    u = ensemble.weights * model.likelihood(ensemble.locations, np.atleast_1d(y))
    total = u.sum()
    if not total >= UNDERFLOW_THRESHOLD:
        raise UnderflowError(step, float(total))
    return ParticleEnsemble(ensemble.locations, u / total)


def resample_indices(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF multinomial draw from one sorted batch of uniforms."""
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    u = np.sort(rng.random(n))
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


def resample(ensemble: ParticleEnsemble, rng: np.random.Generator, n: Optional[int] = None) -> ParticleEnsemble:
    """Replace the ensemble by the empirical measure of ``n`` i.i.d. draws from it.

    ``n`` defaults to the ensemble size, which is the bootstrap kernel.
    """
    idx = resample_indices(ensemble.weights, ensemble.n_particles if n is None else n, rng)
    return ParticleEnsemble.uniform(ensemble.locations[idx])


def propagate(ensemble: ParticleEnsemble, model: ModelSpec, rng: np.random.Generator) -> ParticleEnsemble:
    """Move each atom independently through the transition; weights are kept.

    Intended to follow :func:`resample`, i.e. on uniformly weighted input.
    """
    return ParticleEnsemble(model.transition(ensemble.locations, rng), ensemble.weights)


def bootstrap_init(model: ModelSpec, n_particles: int, y0, rng: np.random.Generator) -> ParticleEnsemble:
    if n_particles < 1:
        raise ValueError("n_particles must be at least 1")
    draws = ParticleEnsemble.uniform(model.sample_initial(rng, n_particles))
    return update(draws, y0, model, step=0)


def bootstrap_step(ensemble: ParticleEnsemble, y, model: ModelSpec, rng: np.random.Generator,
                   step: Optional[int] = None) -> tuple[ParticleEnsemble, ParticleEnsemble]:
    """One bootstrap cycle.  Returns ``(predictor, filtered)``."""
    predictor = propagate(resample(ensemble, rng), model, rng)
    return predictor, update(predictor, y, model, step=step)


def iterate_bootstrap(model: ModelSpec, observations, n_particles: int,
                      rng: np.random.Generator) -> Iterator[tuple[ParticleEnsemble, ParticleEnsemble]]:
    """Yield ``(predictor, filtered)`` for ``k = 0..T``.

    At ``k = 0`` the predictor is the uniformly weighted sample of the
    initial law.
    """
    draws = ParticleEnsemble.uniform(model.sample_initial(rng, n_particles))
    filtered = update(draws, observations[0], model, step=0)
    yield draws, filtered
    for k in range(1, len(observations)):
        predictor, filtered = bootstrap_step(filtered, observations[k], model, rng, step=k)
        yield predictor, filtered


def naive_init(model: ModelSpec, n_particles: int, y0, rng: np.random.Generator) -> NaiveFilterState:
    if n_particles < 1:
        raise ValueError("n_particles must be at least 1")
    x = model.sample_initial(rng, n_particles)
    return NaiveFilterState(x, model.log_likelihood(x, np.atleast_1d(y0)))


def naive_step(state: NaiveFilterState, y, model: ModelSpec, rng: np.random.Generator) -> NaiveFilterState:
    """Advance every path one transition and add its log-likelihood; never resamples."""
    x = model.transition(state.locations, rng)
    return NaiveFilterState(x, state.log_weights + model.log_likelihood(x, np.atleast_1d(y)))


def iterate_naive(model: ModelSpec, observations, n_particles: int,
                  rng: np.random.Generator) -> Iterator[NaiveFilterState]:
    state = naive_init(model, n_particles, observations[0], rng)
    yield state
    for y in observations[1:]:
        state = naive_step(state, y, model, rng)
        yield state


def predictor_from_filter(ensemble: ParticleEnsemble, y_used, model: ModelSpec) -> ParticleEnsemble:
    """Undo :func:`update`: reweight by the inverse likelihood of ``y_used``."""
    with np.errstate(divide="ignore"):
        lw = np.log(ensemble.weights) - model.log_likelihood(ensemble.locations, np.atleast_1d(y_used))
    w = np.exp(lw - lw.max())
    return ParticleEnsemble(ensemble.locations, w / w.sum())
