"""Hidden Markov models and trajectory simulation.

A model is a bundle of vectorised callables.  Points of the signal space are
rows of a 2-D array of shape ``(n, state_dim)``; finite state spaces use
integer labels in a single column.  Observations are 1-D arrays of length
``obs_dim`` (integer symbols for finite alphabets).

The observation density ``likelihood(x, y)`` is always taken relative to a
reference measure on the observation space, recorded by a tag
(``"lebesgue"``, ``"counting"`` or ``"gaussian"``).  The reference measure is
never materialised; models that need it expose a closed-form density
``reference_density``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from uniformpf.rng import stream

Sampler = Callable[[np.random.Generator, int], np.ndarray]
Kernel = Callable[[np.ndarray, np.random.Generator], np.ndarray]
LogLikelihood = Callable[[np.ndarray, np.ndarray], np.ndarray]

REFERENCE_MEASURES = ("lebesgue", "counting", "gaussian")


class ModelError(ValueError):
    """Raised when model parameters are invalid."""


class NoiseDistribution(Protocol):
    """Density plus sampler for an additive observation noise."""

    dim: int

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray: ...

    def log_density(self, z: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class GaussianNoise:
    """Centred Gaussian noise ``N(0, cov)``."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        _check_pd(cov, "noise covariance")
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov)

    def sample(self, rng, size):
        return rng.standard_normal((size, self.dim)) @ self.chol.T

    def log_density(self, z):
        z = np.atleast_2d(z)
        prec = np.linalg.inv(self.cov)
        _, logdet = np.linalg.slogdet(self.cov)
        quad = np.einsum("ni,ij,nj->n", z, prec, z)
        return -0.5 * quad - 0.5 * (self.dim * np.log(2 * np.pi) + logdet)


@dataclass(frozen=True)
class Envelope:
    """Log-scale bounds ``log u_-(y) <= log likelihood(x, y) <= log u_+(y)``."""

    log_u_minus: Callable[[np.ndarray], np.ndarray]
    log_u_plus: Callable[[np.ndarray], np.ndarray]

    def u_minus(self, y):
        return np.exp(self.log_u_minus(y))

    def u_plus(self, y):
        return np.exp(self.log_u_plus(y))


@dataclass(frozen=True)
class CaseIIStructure:
    """Declared structure of ``Y = h(X) + sigma(X) xi`` for the unbounded-h checker.

    ``q`` is the nonincreasing radial envelope of the noise density in the
    norm ``norm``; ``a1``/``a2`` bracket the density against ``q(norm(z))``;
    ``b1..b4`` sandwich the Lyapunov function between multiples of
    ``||h(x)||**p``.
    """

    h: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    noise: NoiseDistribution
    q: Callable[[np.ndarray], np.ndarray]
    norm: Callable[[np.ndarray], np.ndarray]
    a1: float
    a2: float
    p: float
    b1: float
    b2: float
    b3: float
    b4: float
    epsilon: Optional[float] = None
    kappa: Optional[float] = None


@dataclass(frozen=True)
class LinearGaussianParams:
    a: float
    q: float
    r: float
    x0: float
    p0: float


@dataclass(frozen=True)
class ModelSpec:
    """An immutable hidden Markov model."""

    name: str
    state_dim: int
    obs_dim: int
    sample_initial: Sampler
    transition: Kernel
    log_likelihood: LogLikelihood
    observation_sampler: Kernel
    reference_measure: str
    finite: bool = False
    initial_probs: Optional[np.ndarray] = None
    transition_matrix: Optional[np.ndarray] = None
    emission: Optional[np.ndarray] = None
    transition_density: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    initial_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    initial_point: Optional[np.ndarray] = None
    reference_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    log_reference_density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    envelope: Optional[Envelope] = None
    case_ii: Optional[CaseIIStructure] = None
    linear: Optional[LinearGaussianParams] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ModelError("state_dim and obs_dim must be positive")
        if self.reference_measure not in REFERENCE_MEASURES:
            raise ModelError(f"unknown reference measure {self.reference_measure!r}")
        if self.finite:
            P = self.transition_matrix
            if P is None or self.initial_probs is None:
                raise ModelError("finite models need transition_matrix and initial_probs")
            _check_stochastic(P, "transition_matrix")
            _check_stochastic(self.initial_probs[None, :], "initial law")

    @property
    def n_states(self) -> int:
        if not self.finite:
            raise ModelError("n_states is defined for finite models only")
        return self.transition_matrix.shape[0]

    def likelihood(self, x, y):
        """Observation density of ``y`` given each row of ``x``."""
        return np.exp(self.log_likelihood(np.asarray(x), np.asarray(y)))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.states) != len(self.observations):
            raise ValueError("states and observations must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True)
class LyapunovSpec:
    """Function ``v >= 1`` with compact level sets."""

    v: Callable[[np.ndarray], np.ndarray]
    level_set_radius: Callable[[float], str]
    name: str = "V"

    def __call__(self, x):
        return self.v(np.asarray(x))


def simulate(model: ModelSpec, horizon: int, seed: int) -> Trajectory:
    """Draw ``(X_k, Y_k)`` for ``k = 0..horizon`` from ``model``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = stream(seed)
    states = np.empty((horizon + 1, model.state_dim), dtype=int if model.finite else float)
    states[0] = model.sample_initial(rng, 1)[0]
    for k in range(1, horizon + 1):
        states[k] = model.transition(states[k - 1 : k], rng)[0]
    observations = model.observation_sampler(states, rng)
    return Trajectory(states=states, observations=observations, seed=int(seed))


# --------------------------------------------------------------------------
# Concrete models


def make_linear_gaussian(a: float, q: float, r: float, x0: float = 0.0, p0: float = 0.0) -> ModelSpec:
    """Scalar model ``X_k = a X_{k-1} + sqrt(q) xi_k``, ``Y_k = X_k + sqrt(r) eta_k``.

    ``X_0 ~ N(x0, p0)``; ``p0 = 0`` pins the initial state at ``x0``.
    """
    if q <= 0 or r <= 0:
        raise ModelError("variances q and r must be positive")
    if p0 < 0:
        raise ModelError("initial variance p0 must be nonnegative")
    a, q, r, x0, p0 = float(a), float(q), float(r), float(x0), float(p0)
    sq, sr, sp = np.sqrt(q), np.sqrt(r), np.sqrt(p0)
    log_norm = -0.5 * np.log(2 * np.pi * r)

    def sample_initial(rng, n):
        if p0 == 0.0:
            return np.full((n, 1), x0)
        return x0 + sp * rng.standard_normal((n, 1))

    def transition(x, rng):
        return a * x + sq * rng.standard_normal(x.shape)

    def log_likelihood(x, y):
        return log_norm - 0.5 * (y[0] - x[:, 0]) ** 2 / r

    def observation_sampler(x, rng):
        return x + sr * rng.standard_normal(x.shape)

    def transition_density(x, xp):
        d = xp[None, :] - a * x[:, None]
        return np.exp(-0.5 * d * d / q) / np.sqrt(2 * np.pi * q)

    initial_density = None
    if p0 > 0:
        def initial_density(x):
            return np.exp(-0.5 * (x - x0) ** 2 / p0) / np.sqrt(2 * np.pi * p0)

    return ModelSpec(
        name="linear_gaussian",
        state_dim=1,
        obs_dim=1,
        sample_initial=sample_initial,
        transition=transition,
        log_likelihood=log_likelihood,
        observation_sampler=observation_sampler,
        reference_measure="lebesgue",
        transition_density=transition_density,
        initial_density=initial_density,
        initial_point=np.array([x0]) if p0 == 0.0 else None,
        linear=LinearGaussianParams(a, q, r, x0, p0),
        params={"a": a, "q": q, "r": r, "x0": x0, "p0": p0},
    )


def _categorical(cum: np.ndarray, rows: np.ndarray, rng) -> np.ndarray:
    u = rng.random(len(rows))
    return (u[:, None] >= cum[rows]).sum(axis=1)


def make_finite_hmm(transition_matrix, emission, initial) -> ModelSpec:
    """Finite-state HMM with a finite observation alphabet.

    ``emission[i, s]`` is the probability of symbol ``s`` in state ``i``.
    """
    P = np.array(transition_matrix, dtype=float)
    B = np.array(emission, dtype=float)
    mu = np.array(initial, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ModelError("transition_matrix must be square")
    if B.ndim != 2 or B.shape[0] != P.shape[0]:
        raise ModelError("emission must have one row per state")
    if mu.shape != (P.shape[0],):
        raise ModelError("initial law must have one entry per state")
    if np.any(B <= 0):
        raise ModelError(
            "nondegeneracy assumption violated: every emission probability must be strictly positive"
        )
    _check_stochastic(P, "transition_matrix")
    _check_stochastic(B, "emission")
    _check_stochastic(mu[None, :], "initial law")
    for arr in (P, B, mu):
        arr.setflags(write=False)
    cum_p = _cumulative(P)
    cum_b = _cumulative(B)
    cum_mu = _cumulative(mu[None, :])
    log_b = np.log(B)

    def sample_initial(rng, n):
        return _categorical(cum_mu, np.zeros(n, dtype=int), rng)[:, None]

    def transition(x, rng):
        return _categorical(cum_p, x[:, 0], rng)[:, None]

    def log_likelihood(x, y):
        return log_b[x[:, 0], int(y[0])]

    def observation_sampler(x, rng):
        return _categorical(cum_b, x[:, 0], rng)[:, None]

    return ModelSpec(
        name="finite_hmm",
        state_dim=1,
        obs_dim=1,
        sample_initial=sample_initial,
        transition=transition,
        log_likelihood=log_likelihood,
        observation_sampler=observation_sampler,
        reference_measure="counting",
        finite=True,
        initial_probs=mu,
        transition_matrix=P,
        emission=B,
    )


def bounded_obs_envelope(sigma: np.ndarray, h_sup: float) -> Envelope:
    """Envelope of the Gaussian bounded-h likelihood.

    With ``s = ||sigma^{-1}||`` (spectral norm) and ``c = sup ||h||``::

        u_+(y) = exp(||y|| s c)
        u_-(y) = exp(-(||y|| + c/2) s c)
    """
    s = np.linalg.norm(np.linalg.inv(sigma), 2)
    c = float(h_sup)

    def log_u_minus(y):
        return -(np.linalg.norm(np.atleast_2d(y), axis=1) + 0.5 * c) * s * c

    def log_u_plus(y):
        return np.linalg.norm(np.atleast_2d(y), axis=1) * s * c

    return Envelope(log_u_minus, log_u_plus)


def make_bounded_obs_model(
    base: ModelSpec,
    h: Callable[[np.ndarray], np.ndarray],
    sigma,
    h_sup: float,
) -> ModelSpec:
    """Observe ``Y = h(X) + xi`` with ``xi ~ N(0, sigma)`` and bounded ``h``.

    The likelihood is taken against the ``N(0, sigma)`` reference measure::

        likelihood(x, y) = exp(y' S h(x) - h(x)' S h(x) / 2),  S = sigma^{-1}

    so that it lies between the envelope functions of
    :func:`bounded_obs_envelope`.  ``h`` maps ``(n, state_dim)`` rows to
    ``(n, obs_dim)`` rows; ``h_sup`` is the caller's bound on ``||h||``.
    """
    if base.finite:
        raise ModelError("bounded-observation models need a real state space")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    _check_pd(sigma, "sigma")
    if h_sup < 0:
        raise ModelError("h_sup must be nonnegative")
    noise = GaussianNoise(sigma)
    prec = np.linalg.inv(sigma)
    d = sigma.shape[0]

    def hx(x):
        return np.asarray(h(x), dtype=float).reshape(len(x), d)

    def log_likelihood(x, y):
        hv = hx(x)
        return hv @ (prec @ y) - 0.5 * np.einsum("ni,ij,nj->n", hv, prec, hv)

    def observation_sampler(x, rng):
        return hx(x) + noise.sample(rng, len(x))

    def log_reference_density(y):
        return noise.log_density(np.atleast_2d(y))

    def reference_density(y):
        return np.exp(log_reference_density(y))

    return ModelSpec(
        name="bounded_obs",
        state_dim=base.state_dim,
        obs_dim=d,
        sample_initial=base.sample_initial,
        transition=base.transition,
        log_likelihood=log_likelihood,
        observation_sampler=observation_sampler,
        reference_measure="gaussian",
        transition_density=base.transition_density,
        initial_density=base.initial_density,
        initial_point=base.initial_point,
        reference_density=reference_density,
        log_reference_density=log_reference_density,
        envelope=bounded_obs_envelope(sigma, h_sup),
        params={**base.params, "h_sup": float(h_sup), "base": base.name},
    )


def gaussian_noise_envelope(cov):
    """Radial envelope of a Gaussian density.

    Returns ``(q, norm, a1, a2)`` with ``norm(z)**2 = z' cov^{-1} z``,
    ``q(v) = exp(-v**2 / 2)`` and ``a1 = a2 = (2 pi)^{-d/2} |cov|^{-1/2}``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    _check_pd(cov, "cov")
    prec = np.linalg.inv(cov)
    d = cov.shape[0]
    a = (2 * np.pi) ** (-d / 2) * np.linalg.det(cov) ** -0.5

    def norm(z):
        z = np.atleast_2d(z)
        return np.sqrt(np.einsum("ni,ij,nj->n", z, prec, z))

    def q(v):
        return np.exp(-0.5 * np.asarray(v) ** 2)

    return q, norm, a, a


def bi_lipschitz_sandwich(b1p, b2p, b3p, b4p, l1, l2, alpha, p):
    """Translate ``b1'|x|^p + b2' <= V <= b3'|x|^p + b4'`` into bounds in ``||h(x)||^p``.

    ``h = h0 + h1`` with ``l1|x-z| <= |h0(x)-h0(z)| <= l2|x-z|`` and
    ``alpha = ||h0(0)|| + sup||h1||``.  Uses ``(a+b)^p <= C_p (a^p + b^p)``
    with ``C_p = max(1, 2^(p-1))``.
    """
    cp = max(1.0, 2.0 ** (p - 1))
    b1 = b1p / (cp * l2**p)
    b2 = b2p - b1p * alpha**p / l2**p
    b3 = cp * b3p / l1**p
    b4 = cp * b3p * alpha**p / l1**p + b4p
    return b1, b2, b3, b4


def make_additive_noise_model(
    base: ModelSpec,
    h: Callable[[np.ndarray], np.ndarray],
    noise: NoiseDistribution,
    sigma: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    *,
    q=None,
    norm=None,
    a1: Optional[float] = None,
    a2: Optional[float] = None,
    p: float = 2.0,
    sandwich: Optional[tuple] = None,
    epsilon: Optional[float] = None,
) -> ModelSpec:
    """Observe ``Y = h(X) + sigma(X) xi`` with Lebesgue reference measure.

    The likelihood is ``q_xi(sigma(x)^{-1}(y - h(x))) / |det sigma(x)|``.  The
    Jacobian factor makes ``likelihood(x, .)`` a density for state-dependent
    ``sigma``; it is constant (and cancels in the filter) otherwise.

    Passing the envelope (``q``, ``norm``, ``a1``, ``a2``) and the
    Lyapunov sandwich ``(b1, b2, b3, b4)`` attaches a :class:`CaseIIStructure`.
    """
    if base.finite:
        raise ModelError("additive-noise models need a real state space")
    d = noise.dim

    def hx(x):
        return np.asarray(h(x), dtype=float).reshape(len(x), d)

    if sigma is None:
        def sigma(x):
            return np.broadcast_to(np.eye(d), (len(x), d, d))
        sigma_const = True
    else:
        sigma_const = False

    def log_likelihood(x, y):
        resid = y[None, :] - hx(x)
        if sigma_const:
            return noise.log_density(resid)
        s = np.asarray(sigma(x), dtype=float)
        z = np.linalg.solve(s, resid[..., None])[..., 0]
        _, logdet = np.linalg.slogdet(s)
        return noise.log_density(z) - logdet

    def observation_sampler(x, rng):
        xi = noise.sample(rng, len(x))
        if sigma_const:
            return hx(x) + xi
        return hx(x) + np.einsum("nij,nj->ni", np.asarray(sigma(x), dtype=float), xi)

    structure = None
    if q is not None and sandwich is not None:
        b1, b2, b3, b4 = sandwich
        structure = CaseIIStructure(
            h=hx, sigma=sigma, noise=noise, q=q, norm=norm,
            a1=float(a1), a2=float(a2), p=float(p),
            b1=float(b1), b2=float(b2), b3=float(b3), b4=float(b4),
            epsilon=epsilon,
        )

    return ModelSpec(
        name="additive_noise",
        state_dim=base.state_dim,
        obs_dim=d,
        sample_initial=base.sample_initial,
        transition=base.transition,
        log_likelihood=log_likelihood,
        observation_sampler=observation_sampler,
        reference_measure="lebesgue",
        transition_density=base.transition_density,
        initial_density=base.initial_density,
        initial_point=base.initial_point,
        case_ii=structure,
        params={**base.params, "base": base.name},
    )


# --------------------------------------------------------------------------
# Lyapunov functions


def quadratic_lyapunov() -> LyapunovSpec:
    """``V(x) = 1 + ||x||^2``."""

    def v(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return 1.0 + np.sum(x * x, axis=1)

    def radius(r):
        return f"closed ball of radius {np.sqrt(max(r - 1.0, 0.0)):.6g}"

    return LyapunovSpec(v, radius, name="quadratic")


def constant_lyapunov() -> LyapunovSpec:
    """``V = 1``; only has compact level sets on compact spaces."""

    def v(x):
        return np.ones(len(np.atleast_2d(x)))

    return LyapunovSpec(v, lambda r: "whole space", name="constant")


def tabulated_lyapunov(values) -> LyapunovSpec:
    """Lyapunov function on a finite state space, ``V(i) = values[i]``."""
    table = np.asarray(values, dtype=float)
    if np.any(table < 1):
        raise ModelError("Lyapunov values must be >= 1")

    def v(x):
        return table[np.asarray(x).reshape(-1).astype(int)]

    def radius(r):
        return f"states {np.flatnonzero(table <= r).tolist()}"

    return LyapunovSpec(v, radius, name="tabulated")


# --------------------------------------------------------------------------
# validation helpers


def _check_stochastic(M: np.ndarray, what: str) -> None:
    M = np.asarray(M, dtype=float)
    if np.any(M < 0):
        raise ModelError(f"{what} has negative entries")
    if np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-12):
        raise ModelError(f"{what} rows must sum to 1 within 1e-12")


def _check_pd(M: np.ndarray, what: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
        raise ModelError(f"{what} must be a symmetric square matrix")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ModelError(f"{what} must be positive definite") from None


def _cumulative(M: np.ndarray) -> np.ndarray:
    cum = np.cumsum(M, axis=1)
    cum[:, -1] = 1.0
    return cum
