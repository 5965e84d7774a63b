"""Tightness diagnostics and sampling-based assumption checkers.

The checkers are samplers, not provers: a reported violation is exact (it
comes with a witness), while a pass only certifies the sampled points.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from uniformpf import rng as rngmod
from uniformpf.models import LyapunovSpec, ModelSpec, simulate
from uniformpf.particles import iterate_bootstrap

SAMPLER_NOTE = "sampled check: violations are certain, passes hold on sampled points only"


class EnvelopeViolation(ValueError):
    def __init__(self, x, y, value, lower, upper):
        self.witness = (np.asarray(x), np.asarray(y))
        self.value, self.lower, self.upper = float(value), float(lower), float(upper)
        super().__init__(
            f"likelihood {self.value:.6g} outside envelope [{self.lower:.6g}, {self.upper:.6g}] "
            f"at x={np.asarray(x).tolist()}, y={np.asarray(y).tolist()}"
        )


class ItemViolation(ValueError):
    def __init__(self, item: int, what: str, witness):
        self.item = item
        self.witness = witness
        super().__init__(f"item {item} violated ({what}) at {np.asarray(witness).tolist()}")


class HypothesisNotMet(ValueError):
    def __init__(self, k: int, lhs: float, rhs: float):
        self.k = k
        super().__init__(f"alpha_{k} = {lhs:.6g} exceeds A + sum B alpha = {rhs:.6g}")


# --------------------------------------------------------------------------
# Tightness


@dataclass(frozen=True)
class TightnessTrace:
    step: int
    lyapunov_avg: float
    running_max: float
    predictor_avg: float


def _one_replication(model, lyapunov, n_particles, horizon, seed, rep):
    traj = simulate(model, horizon, rngmod.derive_seed(seed, rngmod.TRAJECTORY, rep))
    gen = rngmod.stream(seed, rngmod.DIAGNOSTIC, rep)
    filt = np.empty(horizon + 1)
    pred = np.empty(horizon + 1)
    for k, (p, f) in enumerate(iterate_bootstrap(model, traj.observations, n_particles, gen)):
        pred[k] = p.integrate(lyapunov)
        filt[k] = f.integrate(lyapunov)
    return filt, pred


def tightness_trace(model: ModelSpec, lyapunov: LyapunovSpec, n_particles: int, horizon: int,
                    n_replications: int = 20, seed: int = 0, threads: int = 1) -> list[TightnessTrace]:
    """Monte Carlo estimate of ``E pi_k^N(V)`` and ``E pi_{k-}^N(V)`` for ``k = 0..horizon``.

    Each replication draws a fresh signal/observation path and runs its own
    bootstrap filter; the expectation is the average over replications.
    """
    def job(rep):
        return _one_replication(model, lyapunov, n_particles, horizon, seed, rep)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(job, range(n_replications)))
    filt = np.mean([r[0] for r in results], axis=0)
    pred = np.mean([r[1] for r in results], axis=0)
    running = np.maximum.accumulate(filt)
    return [TightnessTrace(k, float(filt[k]), float(running[k]), float(pred[k])) for k in range(horizon + 1)]


def drift_constants(trace: Sequence[TightnessTrace]) -> tuple[float, float]:
    """Least-squares fit of ``E pi_k(V) ~ c1 E pi_{k-}(V) + c2`` over the trace."""
    pred = np.array([t.predictor_avg for t in trace])
    filt = np.array([t.lyapunov_avg for t in trace])
    design = np.column_stack([pred, np.ones_like(pred)])
    (c1, c2), *_ = np.linalg.lstsq(design, filt, rcond=None)
    return float(c1), float(c2)


def stabilization_ratio(trace: Sequence[TightnessTrace]) -> float:
    """``|max over [T/2, T] - max over [T/4, T/2]| / max over [T/4, T/2]``."""
    v = np.array([t.lyapunov_avg for t in trace])
    T = len(v) - 1
    early = v[T // 4 : T // 2 + 1].max()
    late = v[T // 2 :].max()
    return float(abs(late - early) / early)


# --------------------------------------------------------------------------
# Case I: bounded likelihood envelope


@dataclass(frozen=True)
class QuadratureSpec:
    start_length: float = 32.0
    max_doublings: int = 8
    growth_tol: float = 0.01
    rel_tol: float = 1e-12
    n_envelope_samples: int = 10_000
    x_scale: float = 10.0
    y_scale: float = 10.0
    seed: int = 0


@dataclass
class CaseIReport:
    u_plus: Callable = field(repr=False)
    u_minus: Callable = field(repr=False)
    integral_value: float
    finite: bool
    lengths: list
    estimates: list
    n_envelope_samples: int
    note: str = SAMPLER_NOTE


def _log_integrand(model: ModelSpec):
    env = model.envelope
    if model.reference_measure == "gaussian":
        def log_ref(y):
            if model.log_reference_density is not None:
                return model.log_reference_density(np.array([[y]]))[0]
            with np.errstate(divide="ignore"):
                return np.log(model.reference_density(np.array([[y]]))[0])
    elif model.reference_measure == "lebesgue":
        def log_ref(y):
            return 0.0
    else:
        raise ValueError(f"cannot integrate against a {model.reference_measure!r} reference measure")

    def g(y):
        yy = np.array([[y]])
        return np.exp(2 * env.log_u_plus(yy)[0] - env.log_u_minus(yy)[0] + log_ref(y))

    return g


def _shell_integral(g, L, rel_tol):
    """Integrate ``g`` over ``[-L, L]`` in dyadic shells so quad never misses the bulk."""
    edges = [0.0]
    e = 1.0
    while e < L:
        edges.append(e)
        e *= 2.0
    edges.append(L)
    total = 0.0
    with np.errstate(over="ignore"):
        for a, b in zip(edges[:-1], edges[1:]):
            for lo, hi in ((a, b), (-b, -a)):
                val, _ = integrate.quad(g, lo, hi, epsabs=0.0, epsrel=rel_tol, limit=200)
                total += val
                if not np.isfinite(total):
                    return np.inf
    return total


def check_case_i(model: ModelSpec, quadrature: QuadratureSpec = QuadratureSpec(),
                 x_sampler: Optional[Callable] = None, y_sampler: Optional[Callable] = None) -> CaseIReport:
    """Check the likelihood envelope on sampled pairs and integrate ``u_+^2 / u_-``.

    The integral is taken over ``[-L, L]`` with ``L`` doubling from
    ``start_length``; it is declared divergent when it grows by more than
    ``growth_tol`` across three consecutive doublings (or overflows), and
    finite once successive estimates agree to ``growth_tol``.
    """
    env = model.envelope
    if env is None:
        raise ValueError("model declares no likelihood envelope")
    if model.obs_dim != 1:
        raise ValueError("quadrature check needs a one-dimensional observation space")

    gen = rngmod.stream(quadrature.seed, rngmod.DIAGNOSTIC)
    n = quadrature.n_envelope_samples
    xs = x_sampler(gen, n) if x_sampler else quadrature.x_scale * gen.standard_normal((n, model.state_dim))
    ys = y_sampler(gen, n) if y_sampler else quadrature.y_scale * gen.standard_normal((n, 1))
    lo, hi = env.log_u_minus(ys), env.log_u_plus(ys)
    tol = 1e-12
    for i in range(n):
        ll = model.log_likelihood(xs[i : i + 1], ys[i])[0]
        if ll < lo[i] - tol * max(1.0, abs(lo[i])) or ll > hi[i] + tol * max(1.0, abs(hi[i])):
            raise EnvelopeViolation(xs[i], ys[i], np.exp(ll), np.exp(lo[i]), np.exp(hi[i]))

    g = _log_integrand(model)
    L = quadrature.start_length
    lengths, estimates = [], []
    growth_run = 0
    finite = False
    for _ in range(quadrature.max_doublings + 1):
        est = _shell_integral(g, L, quadrature.rel_tol)
        lengths.append(L)
        estimates.append(est)
        if not np.isfinite(est):
            break
        if len(estimates) > 1:
            rel = (est - estimates[-2]) / estimates[-2]
            if rel > quadrature.growth_tol:
                growth_run += 1
                if growth_run >= 3:
                    break
            else:
                growth_run = 0
                if abs(rel) <= quadrature.growth_tol:
                    finite = True
                    break
        L *= 2.0
    value = estimates[-1]
    return CaseIReport(env.u_plus, env.u_minus, float(value), bool(finite and np.isfinite(value)),
                       lengths, [float(e) for e in estimates], n)


# --------------------------------------------------------------------------
# Case II: strongly unbounded observation function


@dataclass
class CaseIIReport:
    epsilon: float
    a1: float
    a2: float
    p: float
    b1: float
    b2: float
    b3: float
    b4: float
    xi_p_moment: float
    kappa: float
    items: dict
    n_samples: int
    note: str = SAMPLER_NOTE


def norm_equivalence_constant(cov) -> float:
    """Smallest ``kappa`` with ``|v|/kappa <= sqrt(v' cov^{-1} v) <= kappa |v|``."""
    lam = np.linalg.eigvalsh(np.linalg.inv(np.atleast_2d(cov)))
    return float(max(np.sqrt(lam.max()), 1.0 / np.sqrt(lam.min())))


def check_case_ii(model: ModelSpec, lyapunov: LyapunovSpec, n_samples: int = 10_000, seed: int = 0,
                  x_scale: float = 10.0, z_scale: float = 3.0) -> CaseIIReport:
    """Verify the declared Case II structure on sampled points.

    Items: 2 conditioning of ``sigma``; 3 positivity of the noise density;
    4 the radial envelope ``a1 q(|z|) <= q_xi(z) <= a2 q(|z|)``; 5 the
    Lyapunov sandwich and the noise moment ``E ||xi||^p``.  Item 1
    (geometric ergodicity) is not sampled.  States are drawn as
    ``x_scale * N(0, I)`` and noise points as ``z_scale`` times noise draws.
    """
    s = model.case_ii
    if s is None:
        raise ValueError("model declares no Case II structure")
    gen = rngmod.stream(seed, rngmod.DIAGNOSTIC, 2)
    d = s.noise.dim
    items = {}
    rel = 1e-12

    if not (s.b1 > 0 and s.b3 > 0 and s.p > 0):
        raise ItemViolation(5, "b1, b3 and p must be positive", [s.b1, s.b3, s.p])
    if not (0 < s.a1 <= s.a2):
        raise ItemViolation(4, "need 0 < a1 <= a2", [s.a1, s.a2])

    xs = x_scale * gen.standard_normal((n_samples, model.state_dim))
    sig = np.asarray(s.sigma(xs), dtype=float).reshape(n_samples, d, d)
    sv = np.linalg.svd(sig, compute_uv=False)
    smin, smax = sv[:, -1], sv[:, 0]
    if np.any(smin <= 0):
        i = int(np.argmin(smin))
        raise ItemViolation(2, "sigma(x) is singular", xs[i])
    eps_est = float(np.min(np.minimum(smin, 1.0 / smax)))
    if s.epsilon is not None:
        bad = (smin < s.epsilon * (1 - rel)) | (smax > (1 + rel) / s.epsilon)
        if np.any(bad):
            raise ItemViolation(2, f"sigma conditioning fails for epsilon={s.epsilon}", xs[np.argmax(bad)])
    items[2] = "pass"

    zs = z_scale * s.noise.sample(gen, n_samples)
    # compare in log space so tail samples do not underflow to a false zero
    log_qxi = s.noise.log_density(zs)
    if np.any(~np.isfinite(log_qxi)):
        raise ItemViolation(3, "noise density not strictly positive", zs[np.argmin(log_qxi)])
    items[3] = "pass"

    with np.errstate(divide="ignore"):
        log_env = np.log(s.q(s.norm(zs)))
    ok = np.isfinite(log_env)  # points where q underflows cannot be compared
    tol = rel * np.maximum(1.0, np.abs(log_qxi))
    low = ok & (log_qxi < np.log(s.a1) + log_env - tol)
    high = ok & (log_qxi > np.log(s.a2) + log_env + tol)
    if np.any(low | high):
        raise ItemViolation(4, "noise density outside a1 q(|z|), a2 q(|z|)", zs[np.argmax(low | high)])
    grid = np.linspace(0.0, 50.0, 2001)
    if np.any(np.diff(s.q(grid)) > 0):
        raise ItemViolation(4, "q is not nonincreasing", grid[np.argmax(np.diff(s.q(grid)) > 0)])
    items[4] = "pass"

    hp = np.linalg.norm(s.h(xs), axis=1) ** s.p
    v = lyapunov(xs)
    lo = s.b1 * hp + s.b2
    hi = s.b3 * hp + s.b4
    bad = (v < lo - rel * np.abs(lo)) | (v > hi + rel * np.abs(hi))
    if np.any(bad):
        raise ItemViolation(5, "Lyapunov sandwich fails", xs[np.argmax(bad)])
    xi = s.noise.sample(gen, n_samples)
    moment = float(np.mean(np.linalg.norm(xi, axis=1) ** s.p))
    if not np.isfinite(moment):
        raise ItemViolation(5, "noise moment is not finite", [moment])
    items[5] = "pass"
    items[1] = "not checked"

    cov = getattr(s.noise, "cov", None)
    kappa = s.kappa if s.kappa is not None else (norm_equivalence_constant(cov) if cov is not None else float("nan"))
    return CaseIIReport(
        epsilon=s.epsilon if s.epsilon is not None else eps_est,
        a1=s.a1, a2=s.a2, p=s.p, b1=s.b1, b2=s.b2, b3=s.b3, b4=s.b4,
        xi_p_moment=moment, kappa=kappa, items=items, n_samples=n_samples,
    )


# --------------------------------------------------------------------------
# Utility inequalities


def chebyshev_covariance_check(psi, phi, nu, tol: float = 1e-12) -> float:
    """Covariance of ``psi`` and ``phi`` under the atomic measure ``nu``.

    Nonnegative whenever both functions are nondecreasing on the support;
    an ``AssertionError`` signals non-monotone input.
    """
    from uniformpf.metrics import atoms

    x, w, _ = atoms(nu)
    x = x[:, 0].astype(float)
    a = np.asarray(psi(x), dtype=float)
    b = np.asarray(phi(x), dtype=float)
    cov = float(w @ ((a - w @ a) * (b - w @ b)))
    if cov < -tol:
        raise AssertionError(f"negative covariance {cov:.3g} for nondecreasing functions")
    return cov


def gronwall_bound(A: float, B: Sequence[float], alpha: Sequence[float], rel_tol: float = 1e-12) -> bool:
    """Check ``alpha_k <= A exp(B_1 + ... + B_k)`` given the Gronwall hypothesis.

    ``alpha`` holds ``alpha_0..alpha_K`` and ``B`` holds ``B_1..B_K``.  The
    hypothesis ``alpha_k <= A + sum_{l<=k} B_l alpha_{l-1}`` is verified
    first; a failure raises :class:`HypothesisNotMet`.
    """
    alpha = np.asarray(alpha, dtype=float)
    B = np.asarray(B, dtype=float)
    if len(B) != len(alpha) - 1:
        raise ValueError("need len(B) == len(alpha) - 1")
    if A < 0 or np.any(B < 0) or np.any(alpha < 0):
        raise ValueError("A, B and alpha must be nonnegative")
    rhs = A + np.concatenate([[0.0], np.cumsum(B * alpha[:-1])])
    for k in range(len(alpha)):
        if alpha[k] > rhs[k] * (1 + rel_tol) + 1e-300:
            raise HypothesisNotMet(k, alpha[k], rhs[k])
    bound = A * np.exp(np.concatenate([[0.0], np.cumsum(B)]))
    return bool(np.all(alpha <= bound * (1 + rel_tol)))


# --------------------------------------------------------------------------
# Serialisation


def to_key_value(report) -> str:
    """Flat ``key=value`` lines; nested dicts become dotted keys."""
    data = asdict(report) if hasattr(report, "__dataclass_fields__") else dict(report)
    lines = []

    def emit(prefix, value):
        if callable(value):
            return
        if isinstance(value, dict):
            for k in sorted(value, key=str):
                emit(f"{prefix}.{k}" if prefix else str(k), value[k])
        elif isinstance(value, (list, tuple)):
            lines.append(f"{prefix}=" + ",".join(_fmt(v) for v in value))
        else:
            lines.append(f"{prefix}={_fmt(value)}")

    emit("", data)
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)
