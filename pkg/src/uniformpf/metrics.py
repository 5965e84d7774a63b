"""Distances between atomic beliefs and time-average error functionals.

Conventions:

* ``tv_distance`` is ``sup_{|f| <= 1} |mu(f) - nu(f)|``, i.e. the full
  variation ``sum |mu - nu|`` with range ``[0, 2]``.
* ``bl_distance`` is the dual bounded-Lipschitz distance, solved exactly as
  a linear program over the values of ``f`` on the merged support.  The
  ground metric is Euclidean on real state spaces and the discrete metric
  (distance 1 between distinct labels) on finite ones.  Under the discrete
  metric the Lipschitz constraint caps the oscillation of ``f`` at 1, so
  ``bl = tv / 2`` there.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from uniformpf.exact import DiscreteBelief, GridBelief
from uniformpf.models import LyapunovSpec, Trajectory
from uniformpf.particles import ParticleEnsemble

MAX_LP_SUPPORT = 5000
LP_TOL = 1e-9


class SupportTooLarge(ValueError):
    """The merged support exceeds the LP size guard; coarsen first."""


def atoms(measure) -> tuple[np.ndarray, np.ndarray, bool]:
    """Return ``(locations (m, d), masses (m,), is_discrete)`` of an atomic measure."""
    if isinstance(measure, DiscreteBelief):
        return np.arange(len(measure.probs))[:, None], measure.probs, True
    if isinstance(measure, GridBelief):
        return measure.nodes[:, None], measure.masses, False
    if isinstance(measure, ParticleEnsemble):
        x = measure.locations
        return x, measure.weights, np.issubdtype(x.dtype, np.integer)
    raise TypeError(f"not an atomic measure: {type(measure).__name__}")


def _merge(mu, nu):
    xa, wa, da = atoms(mu)
    xb, wb, db = atoms(nu)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("measures live on spaces of different dimension")
    x = np.concatenate([xa.astype(float), xb.astype(float)])
    c = np.concatenate([wa, -wb])
    support, inv = np.unique(x, axis=0, return_inverse=True)
    signed = np.bincount(inv.reshape(-1), weights=c, minlength=len(support))
    return support, signed, da and db


@dataclass(frozen=True)
class BlProblem:
    """``maximize sum_i c_i f_i`` over ``|f_i| <= 1``, ``|f_i - f_j| <= d(x_i, x_j)``."""

    support: np.ndarray
    signed_masses: np.ndarray
    discrete: bool = False

    def __post_init__(self):
        if abs(float(np.sum(self.signed_masses))) > 1e-10:
            raise ValueError("signed masses must sum to zero")

    @property
    def size(self) -> int:
        return len(self.signed_masses)

    @cached_property
    def pairwise_distances(self) -> np.ndarray:
        x = self.support
        if self.discrete:
            return (np.abs(x[:, None, :] - x[None, :, :]).sum(-1) > 0).astype(float)
        return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))


def bl_problem(mu, nu, discrete: Optional[bool] = None) -> BlProblem:
    support, signed, is_discrete = _merge(mu, nu)
    return BlProblem(support, signed, is_discrete if discrete is None else discrete)


def _constraint_pairs(problem: BlProblem):
    """Pairs ``(i, j, d_ij)`` whose Lipschitz constraints imply all others.

    On the real line, consecutive points suffice because distances add up.
    """
    x = problem.support
    m = problem.size
    if not problem.discrete and x.shape[1] == 1:
        order = np.argsort(x[:, 0], kind="stable")
        i, j = order[:-1], order[1:]
        return i, j, x[j, 0] - x[i, 0]
    i, j = np.triu_indices(m, k=1)
    return i, j, problem.pairwise_distances[i, j]


def solve_bl(problem: BlProblem) -> float:
    """Exact optimum of the bounded-Lipschitz LP (HiGHS dual simplex)."""
    m = problem.size
    if m > MAX_LP_SUPPORT:
        raise SupportTooLarge(f"merged support has {m} atoms (limit {MAX_LP_SUPPORT}); coarsen first")
    c = problem.signed_masses
    if m < 2 or not np.any(np.abs(c) > 0):
        return 0.0
    i, j, d = _constraint_pairs(problem)
    k = len(i)
    rows = np.concatenate([np.arange(k), np.arange(k), k + np.arange(k), k + np.arange(k)])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([np.ones(k), -np.ones(k), np.ones(k), -np.ones(k)])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * k, m))
    b = np.concatenate([d, d])
    res = linprog(
        -c, A_ub=A, b_ub=b, bounds=(-1.0, 1.0), method="highs-ds",
        options={"primal_feasibility_tolerance": LP_TOL, "dual_feasibility_tolerance": LP_TOL},
    )
    if res.status != 0:
        raise RuntimeError(f"BL linear program failed: {res.message}")
    return float(np.clip(-res.fun, 0.0, 2.0))


def bl_vertex_enumeration(problem: BlProblem) -> float:
    """Brute-force optimum of the BL LP by enumerating every vertex.

    Only for tiny supports (``m <= 5``); used as an independent oracle.
    """
    m = problem.size
    if m > 5:
        raise ValueError("vertex enumeration is limited to 5 atoms")
    c = problem.signed_masses
    if m < 2:
        return 0.0
    D = problem.pairwise_distances
    A, b = [], []
    for r in range(m):
        e = np.zeros(m)
        e[r] = 1.0
        A += [e, -e]
        b += [1.0, 1.0]
    for r, s in itertools.permutations(range(m), 2):
        e = np.zeros(m)
        e[r], e[s] = 1.0, -1.0
        A.append(e)
        b.append(D[r, s])
    A = np.array(A)
    b = np.array(b)
    best = -np.inf
    for rows in itertools.combinations(range(len(A)), m):
        sub = A[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        f = np.linalg.solve(sub, b[list(rows)])
        if np.all(A @ f <= b + 1e-12):
            best = max(best, float(c @ f))
    return best


def bl_distance(mu, nu, discrete: Optional[bool] = None) -> float:
    """Dual bounded-Lipschitz distance between two atomic measures."""
    return solve_bl(bl_problem(mu, nu, discrete))


def tv_distance(mu, nu) -> float:
    """Total variation ``sum |mu - nu|`` over the merged support; range ``[0, 2]``."""
    _, signed, _ = _merge(mu, nu)
    return float(min(np.abs(signed).sum(), 2.0))


def v_norm_distance(mu, nu, v: LyapunovSpec) -> float:
    """V-weighted total variation ``sum V(x) |mu - nu|(x)``."""
    support, signed, _ = _merge(mu, nu)
    return float(v(support) @ np.abs(signed))


def coarsen(ensemble: ParticleEnsemble, n_bins: int, lo: Optional[float] = None,
            hi: Optional[float] = None) -> ParticleEnsemble:
    """Aggregate mass onto midpoints of ``n_bins`` equal bins spanning ``[lo, hi]``.

    Moves each atom by at most half a bin width.  Empty bins are dropped.
    """
    x, w, _ = atoms(ensemble)
    if x.shape[1] != 1:
        raise ValueError("coarsen supports one-dimensional state spaces only")
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    x = x[:, 0].astype(float)
    lo = float(x.min()) if lo is None else float(lo)
    hi = float(x.max()) if hi is None else float(hi)
    if hi <= lo:
        return ParticleEnsemble(np.array([[lo]]), np.ones(1))
    width = (hi - lo) / n_bins
    idx = np.clip(np.floor((x - lo) / width).astype(int), 0, n_bins - 1)
    mass = np.bincount(idx, weights=w, minlength=n_bins)
    keep = mass > 0
    mids = lo + (np.arange(n_bins) + 0.5) * width
    mass = mass[keep]
    return ParticleEnsemble(mids[keep][:, None], mass / mass.sum())


def coarsen_pair(mu, nu, n_bins: int = 200):
    """Coarsen two measures onto a common grid spanning their joint support.

    Returns ``(mu', nu', bin_width)``.
    """
    xa, wa, _ = atoms(mu)
    xb, wb, _ = atoms(nu)
    lo = float(min(xa.min(), xb.min()))
    hi = float(max(xa.max(), xb.max()))
    as_ens = [ParticleEnsemble(xa.astype(float), wa), ParticleEnsemble(xb.astype(float), wb)]
    width = (hi - lo) / n_bins if hi > lo else 0.0
    return coarsen(as_ens[0], n_bins, lo, hi), coarsen(as_ens[1], n_bins, lo, hi), width


def bl_distance_coarsened(mu, nu, n_bins: int = 200) -> float:
    """BL distance after coarsening both measures; exact to within one bin width."""
    a, b, _ = coarsen_pair(mu, nu, n_bins)
    return bl_distance(a, b)


@dataclass(frozen=True)
class ErrorSeries:
    per_step_values: np.ndarray
    bound: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.per_step_values, dtype=float)
        if np.any(v < 0):
            raise ValueError("error series entries must be nonnegative")
        if self.bound is not None and np.any(v > self.bound + 1e-12):
            raise ValueError(f"error series entries must be <= {self.bound}")
        object.__setattr__(self, "per_step_values", v)

    @property
    def horizon(self) -> int:
        return len(self.per_step_values)


def time_average(series: ErrorSeries, up_to: int) -> float:
    """Mean of the first ``up_to`` entries of ``series``."""
    if not 1 <= up_to <= series.horizon:
        raise ValueError(f"up_to must be in [1, {series.horizon}]")
    return float(np.mean(series.per_step_values[:up_to]))


def mse_comparison(trajectory: Trajectory, exact_means: Sequence[float], approx_means: Sequence[float],
                   f: Callable[[np.ndarray], np.ndarray], up_to: int) -> float:
    """Gap between the time-averaged squared errors of the approximate and exact estimates.

    ``exact_means[k]`` and ``approx_means[k]`` are the filters' integrals of
    ``f`` at step ``k``, aligned with ``trajectory`` (index 0 is time 0).
    The averages run over ``k = 1..up_to``.
    """
    if not 1 <= up_to <= trajectory.horizon:
        raise ValueError(f"up_to must be in [1, {trajectory.horizon}]")
    fx = np.asarray(f(trajectory.states[1 : up_to + 1]), dtype=float).reshape(-1)
    e = np.asarray(exact_means, dtype=float)[1 : up_to + 1]
    a = np.asarray(approx_means, dtype=float)[1 : up_to + 1]
    return float(abs(np.mean((fx - a) ** 2) - np.mean((fx - e) ** 2)))
