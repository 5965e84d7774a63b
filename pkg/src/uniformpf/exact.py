"""Exact reference filters.

* Kalman recursion for linear-Gaussian models (general matrix form, Joseph
  covariance update).
* Forward Bayes recursion for finite hidden Markov models.
* A grid discretisation for one-dimensional continuous models, used as an
  oracle where no closed form exists.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from uniformpf.models import ModelSpec


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        P = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if P.shape != (m.size, m.size):
            raise ValueError("covariance shape does not match mean")
        if np.max(np.abs(P - P.T), initial=0.0) > 1e-12:
            raise ValueError("covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(P)) < -1e-12:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", P)

    @classmethod
    def scalar(cls, mean: float, var: float) -> "GaussianBelief":
        return cls(np.array([mean]), np.array([[var]]))


@dataclass(frozen=True)
class DiscreteBelief:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or np.any(p < 0):
            raise ValueError("probs must be a nonnegative vector")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probs must sum to 1 within 1e-12")
        object.__setattr__(self, "probs", p)

    def mean(self) -> float:
        return float(np.arange(len(self.probs)) @ self.probs)


@dataclass(frozen=True)
class GridBelief:
    nodes: np.ndarray
    masses: np.ndarray
    coverage_warning: bool = False

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        w = np.asarray(self.masses, dtype=float)
        if x.shape != w.shape or x.ndim != 1:
            raise ValueError("nodes and masses must be 1-D arrays of equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("masses must be nonnegative and sum to 1 within 1e-10")
        object.__setattr__(self, "nodes", x)
        object.__setattr__(self, "masses", w)

    def mean(self) -> float:
        return float(self.nodes @ self.masses)

    def var(self) -> float:
        m = self.mean()
        return float(((self.nodes - m) ** 2) @ self.masses)


# --------------------------------------------------------------------------
# Kalman


def kalman_predict(belief: GaussianBelief, a, q) -> GaussianBelief:
    A = np.atleast_2d(a)
    Q = np.atleast_2d(q)
    P = A @ belief.covariance @ A.T + Q
    return GaussianBelief(A @ belief.mean, 0.5 * (P + P.T))


def kalman_update(belief: GaussianBelief, y, r, h=None) -> GaussianBelief:
    """Condition on ``y = H x + noise``, ``noise ~ N(0, r)``; ``H`` defaults to identity."""
    m, P = belief.mean, belief.covariance
    d = m.size
    H = np.eye(d) if h is None else np.atleast_2d(h)
    R = np.atleast_2d(r)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    S = H @ P @ H.T + R
    K = np.linalg.solve(S.T, (P @ H.T).T).T
    m_new = m + K @ (y - H @ m)
    IKH = np.eye(d) - K @ H
    P_new = IKH @ P @ IKH.T + K @ R @ K.T
    return GaussianBelief(m_new, 0.5 * (P_new + P_new.T))


def kalman_step(belief: GaussianBelief, y, a, q, r, h=None) -> GaussianBelief:
    """One predict/update cycle of the Kalman filter."""
    return kalman_update(kalman_predict(belief, a, q), y, r, h)


def steady_state_variance(a: float, q: float, r: float, start: float = 1.0,
                          tol: float = 1e-12, max_iter: int = 10_000) -> tuple[float, int]:
    """Iterate the scalar filtered-variance map to its fixed point.

    Returns ``(variance, iterations)``.
    """
    s = float(start)
    for it in range(1, max_iter + 1):
        pred = a * a * s + q
        s_new = pred * r / (pred + r)
        if abs(s_new - s) < tol:
            return s_new, it
        s = s_new
    raise RuntimeError("variance recursion did not converge")


def kalman_filter(model: ModelSpec, observations) -> list[GaussianBelief]:
    """Filtered beliefs for ``k = 0..T`` of a linear-Gaussian model."""
    lin = model.linear
    if lin is None:
        raise ValueError(f"model {model.name!r} is not linear-Gaussian")
    prior = GaussianBelief.scalar(lin.x0, lin.p0)
    belief = kalman_update(prior, observations[0], lin.r)
    out = [belief]
    for y in observations[1:]:
        belief = kalman_step(belief, y, lin.a, lin.q, lin.r)
        out.append(belief)
    return out


# --------------------------------------------------------------------------
# Finite state: forward recursion


def forward_update(belief: DiscreteBelief, y, model: ModelSpec) -> DiscreteBelief:
    """Bayes reweighting of ``belief`` by the likelihood of ``y``."""
    states = np.arange(model.n_states)[:, None]
    u = belief.probs * model.likelihood(states, np.atleast_1d(y))
    total = u.sum()
    if not total > 0:
        raise AssertionError("forward recursion produced an all-zero vector; bad model")
    return DiscreteBelief(u / total)


def forward_predict(belief: DiscreteBelief, model: ModelSpec) -> DiscreteBelief:
    p = belief.probs @ model.transition_matrix
    return DiscreteBelief(p / p.sum())


def forward_step(belief: DiscreteBelief, y, model: ModelSpec) -> DiscreteBelief:
    """Predict through the transition matrix, then condition on ``y``."""
    if not model.finite:
        raise ValueError("forward_step needs a finite model")
    return forward_update(forward_predict(belief, model), y, model)


def forward_filter(model: ModelSpec, observations) -> list[DiscreteBelief]:
    belief = forward_update(DiscreteBelief(model.initial_probs), observations[0], model)
    out = [belief]
    for y in observations[1:]:
        belief = forward_step(belief, y, model)
        out.append(belief)
    return out


# --------------------------------------------------------------------------
# Grid oracle


def quadrature_weights(nodes: np.ndarray) -> np.ndarray:
    """Cell widths: midpoint rule in the interior, half cells at both ends."""
    x = np.asarray(nodes, dtype=float)
    if x.size == 1:
        return np.ones(1)
    w = np.empty_like(x)
    w[1:-1] = 0.5 * (x[2:] - x[:-2])
    w[0] = 0.5 * (x[1] - x[0])
    w[-1] = 0.5 * (x[-1] - x[-2])
    return w


def transition_kernel(nodes: np.ndarray, transition_density: Callable) -> np.ndarray:
    """``K[i, j] = p(node_i -> node_j) * width_j``."""
    return transition_density(nodes, nodes) * quadrature_weights(nodes)[None, :]


def _posterior(nodes, unnorm_log, warn_sd=6.0) -> GridBelief:
    finite = np.isfinite(unnorm_log)
    if not finite.any():
        raise AssertionError("grid filter lost all mass; grid does not cover the signal")
    w = np.zeros_like(unnorm_log)
    w[finite] = np.exp(unnorm_log[finite] - unnorm_log[finite].max())
    w /= w.sum()
    m = nodes @ w
    sd = np.sqrt(max(((nodes - m) ** 2) @ w, 0.0))
    warn = bool(m - warn_sd * sd < nodes[0] or m + warn_sd * sd > nodes[-1]) if nodes.size > 1 else False
    return GridBelief(nodes, w, coverage_warning=warn)


def grid_prior(model: ModelSpec, nodes) -> GridBelief:
    """Discretise the initial law onto ``nodes``."""
    nodes = np.asarray(nodes, dtype=float)
    if model.initial_point is not None:
        masses = np.zeros(nodes.size)
        masses[np.argmin(np.abs(nodes - model.initial_point[0]))] = 1.0
        return GridBelief(nodes, masses)
    if model.initial_density is None:
        raise ValueError("model has neither an initial point nor an initial density")
    w = model.initial_density(nodes) * quadrature_weights(nodes)
    return GridBelief(nodes, w / w.sum())


def grid_update(belief: GridBelief, y, model: ModelSpec) -> GridBelief:
    nodes = belief.nodes
    with np.errstate(divide="ignore"):
        log_mass = np.log(belief.masses)
    loglik = model.log_likelihood(nodes[:, None], np.atleast_1d(y))
    return _posterior(nodes, log_mass + loglik)


def grid_filter_step(belief: GridBelief, y, model: ModelSpec,
                     transition_density: Optional[Callable] = None,
                     kernel: Optional[np.ndarray] = None) -> GridBelief:
    """Propagate grid masses through the transition density and condition on ``y``.

    The likelihood product is formed in log space.  Pass a precomputed
    ``kernel`` (see :func:`transition_kernel`) to avoid rebuilding it.
    """
    if model.state_dim != 1:
        raise ValueError("grid filter supports one-dimensional models only")
    nodes = belief.nodes
    if kernel is None:
        density = transition_density or model.transition_density
        if density is None:
            raise ValueError("model has no transition density")
        kernel = transition_kernel(nodes, density)
    predicted = belief.masses @ kernel
    with np.errstate(divide="ignore"):
        log_pred = np.log(predicted)
    loglik = model.log_likelihood(nodes[:, None], np.atleast_1d(y))
    return _posterior(nodes, log_pred + loglik)


def grid_filter(model: ModelSpec, observations, nodes) -> list[GridBelief]:
    nodes = np.asarray(nodes, dtype=float)
    kernel = transition_kernel(nodes, model.transition_density)
    belief = grid_update(grid_prior(model, nodes), observations[0], model)
    out = [belief]
    for y in observations[1:]:
        belief = grid_filter_step(belief, y, model, kernel=kernel)
        out.append(belief)
    return out
