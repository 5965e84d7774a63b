"""Config-driven experiment runner.

Every replication simulates one trajectory, feeds the same observation
sequence to every configured filter and records per-step estimates and
errors.  Replications may run on several threads; each owns keyed random
streams and results are reduced in replication order, so the output bytes
do not depend on the thread count.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from uniformpf import rng as rngmod
from uniformpf.exact import DiscreteBelief, forward_filter, grid_filter, kalman_filter
from uniformpf.harness.config import APPROX_KINDS, EXACT_KINDS, ExperimentConfig, build_model
from uniformpf.metrics import bl_distance, bl_distance_coarsened, mse_comparison, tv_distance
from uniformpf.models import ModelSpec, Trajectory, quadratic_lyapunov, simulate
from uniformpf.particles import UnderflowError, iterate_bootstrap, iterate_naive

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_PREFIX = {"mean_abs_err": "abs_err", "tv": "tv", "bl": "bl", "ess": "ess"}
SUMMARY_HEADER = ["schema", "n", "filter", "metric", "t", "mean", "stderr", "reps"]
SWEEP_HEADER = ["schema", "filter", "n", "t", "time_avg_mean", "time_avg_stderr", "max_over_t"]
REPLICATION_HEADER = ["rep", "trajectory_seed", "observations_sha256", "status"]

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def fmt(v) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def observation_hash(observations: np.ndarray) -> str:
    arr = np.ascontiguousarray(observations)
    return hashlib.sha256(arr.dtype.str.encode() + repr(arr.shape).encode() + arr.tobytes()).hexdigest()


def make_test_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name == "tanh":
        return lambda x: np.tanh(np.asarray(x, dtype=float)).reshape(-1)
    return lambda x: np.asarray(x, dtype=float).reshape(-1)


# --------------------------------------------------------------------------
# Per-filter runs


@dataclass
class FilterRun:
    """Per-step outputs of one filter on one trajectory."""

    means: np.ndarray
    f_values: np.ndarray
    measures: list = field(default_factory=list, repr=False)
    ess: Optional[np.ndarray] = None
    lyapunov: Optional[np.ndarray] = None
    obs_hash: str = ""


def _run_exact(kind, block, model: ModelSpec, traj: Trajectory, f) -> FilterRun:
    obs = traj.observations
    if kind == "kalman":
        beliefs = kalman_filter(model, obs)
        means = np.array([b.mean[0] for b in beliefs])
        sds = np.array([np.sqrt(b.covariance[0, 0]) for b in beliefs])
        fv = np.array([_GH_WEIGHTS @ f(m + s * _GH_NODES) for m, s in zip(means, sds)])
        return FilterRun(means, fv, [], obs_hash=observation_hash(obs))
    if kind == "forward":
        beliefs = forward_filter(model, obs)
        states = np.arange(model.n_states)
        means = np.array([b.mean() for b in beliefs])
        fv = np.array([b.probs @ f(states) for b in beliefs])
        return FilterRun(means, fv, beliefs, obs_hash=observation_hash(obs))
    nodes = np.linspace(block.lo, block.hi, block.nodes)
    beliefs = grid_filter(model, obs, nodes)
    means = np.array([b.mean() for b in beliefs])
    fv = np.array([b.masses @ f(b.nodes) for b in beliefs])
    return FilterRun(means, fv, beliefs, obs_hash=observation_hash(obs))


def _run_approx(kind, n, model, traj, gen, f, keep_measures, lyapunov) -> FilterRun:
    obs = traj.observations
    T1 = len(obs)
    means = np.empty(T1)
    fv = np.empty(T1)
    ess = np.empty(T1)
    lyap = np.empty(T1) if lyapunov is not None else None
    measures = []
    if kind == "bootstrap":
        source = (filtered for _, filtered in iterate_bootstrap(model, obs, n, gen))
    else:
        source = (state.as_ensemble() for state in iterate_naive(model, obs, n, gen))
    for k, ens in enumerate(source):
        w = ens.weights
        means[k] = float(w @ ens.locations[:, 0])
        fv[k] = float(w @ f(ens.locations))
        ess[k] = 1.0 / float(w @ w)
        if lyap is not None:
            lyap[k] = ens.integrate(lyapunov)
        if keep_measures:
            measures.append(ens)
    return FilterRun(means, fv, measures, ess=ess, lyapunov=lyap, obs_hash=observation_hash(obs))


def _as_discrete(ens, n_states: int) -> DiscreteBelief:
    p = np.bincount(ens.locations[:, 0].astype(int), weights=ens.weights, minlength=n_states)
    return DiscreteBelief(p / p.sum())


def step_distance(metric: str, approx, ref, model: ModelSpec, bl_bins: int) -> float:
    if model.finite:
        a = _as_discrete(approx, model.n_states)
        return tv_distance(a, ref) if metric == "tv" else bl_distance(a, ref)
    if metric == "tv":
        return tv_distance(approx, ref)
    return bl_distance_coarsened(approx, ref, bl_bins)


# --------------------------------------------------------------------------
# run_experiment


@dataclass
class RepResult:
    rep: int
    trajectory: Optional[Trajectory]
    obs_hash: str
    status: str
    # n -> {column: array}
    columns: dict = field(default_factory=dict)
    # (n, filter, metric) -> per-step array
    errors: dict = field(default_factory=dict)
    # (n, filter) -> (exact f-values, approx f-values)
    f_pairs: dict = field(default_factory=dict)


def _column_plan(config: ExperimentConfig) -> list[str]:
    cols = ["rep", "n", "k"]
    if "mse" in config.metrics:
        cols.append("state")
    cols += [f"{f.kind}_mean" for f in config.filters]
    ref = config.reference
    others = [f for f in config.filters if f is not ref]
    for metric in ("mean_abs_err", "tv", "bl", "ess"):
        if metric not in config.metrics:
            continue
        for f in others:
            if metric in ("tv", "bl", "ess") and f.kind not in APPROX_KINDS:
                continue
            cols.append(f"{METRIC_PREFIX[metric]}_{f.kind}")
    if config.lyapunov:
        cols += [f"lyap_{f.kind}" for f in config.filters if f.kind in APPROX_KINDS]
    return cols


def _run_replication(config: ExperimentConfig, model: ModelSpec, rep: int) -> RepResult:
    T = config.horizon
    traj_seed = rngmod.derive_seed(config.seed, rngmod.TRAJECTORY, rep)
    traj = simulate(model, T, traj_seed)
    obs_hash = observation_hash(traj.observations)
    f = make_test_function(config.test_function)
    lyapunov = quadratic_lyapunov() if config.lyapunov else None
    ref = config.reference
    want_dist = [m for m in ("tv", "bl") if m in config.metrics]
    result = RepResult(rep, traj, obs_hash, "ok")
    try:
        exact = {b.kind: _run_exact(b.kind, b, model, traj, f)
                 for b in config.filters if b.kind in EXACT_KINDS}
        counts = config.particle_counts or [0]
        for n in counts:
            runs = dict(exact)
            for idx, b in enumerate(config.filters):
                if b.kind in APPROX_KINDS:
                    gen = rngmod.stream(config.seed, rngmod.FILTER, rep, idx, n)
                    runs[b.kind] = _run_approx(b.kind, n, model, traj, gen, f, bool(want_dist), lyapunov)
            hashes = {r.obs_hash for r in runs.values()}
            if hashes != {obs_hash}:
                raise RuntimeError("filters consumed different observation sequences")
            cols = {"rep": np.full(T + 1, rep), "n": np.full(T + 1, n), "k": np.arange(T + 1)}
            if "mse" in config.metrics:
                cols["state"] = traj.states[:, 0].astype(float)
            for b in config.filters:
                cols[f"{b.kind}_mean"] = runs[b.kind].means
            rr = runs[ref.kind] if ref else None
            for b in config.filters:
                if b is ref:
                    continue
                run = runs[b.kind]
                if "mean_abs_err" in config.metrics:
                    err = np.abs(run.means - rr.means)
                    cols[f"abs_err_{b.kind}"] = err
                    result.errors[(n, b.kind, "abs_err")] = err
                if b.kind not in APPROX_KINDS:
                    continue
                for metric in want_dist:
                    d = np.array([step_distance(metric, a, e, model, config.bl_bins)
                                  for a, e in zip(run.measures, rr.measures)])
                    cols[f"{metric}_{b.kind}"] = d
                    result.errors[(n, b.kind, metric)] = d
                if "ess" in config.metrics:
                    cols[f"ess_{b.kind}"] = run.ess
                if config.lyapunov:
                    cols[f"lyap_{b.kind}"] = run.lyapunov
                if "mse" in config.metrics:
                    result.f_pairs[(n, b.kind)] = (rr.f_values, run.f_values)
            result.columns[n] = cols
    except (UnderflowError, FloatingPointError, AssertionError) as exc:
        log.error("replication %d aborted: %s", rep, exc)
        result.status = f"failed: {exc}"
        result.columns.clear()
        result.errors.clear()
        result.f_pairs.clear()
    return result


def t_prefixes(T: int) -> list[int]:
    """Deciles ``T/10, 2T/10, ..., T`` (rounded, deduplicated, at least 1)."""
    return sorted({max(1, round(T * i / 10)) for i in range(1, 11)})


def _mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class ExperimentResult:
    steps_csv: Path
    summary_csv: Path
    replications_csv: Path
    summary: list
    failures: list
    columns: list


def map_replications(fn, n_reps: int, threads: int):
    if threads <= 1:
        return [fn(r) for r in range(n_reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_reps)))


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None) -> ExperimentResult:
    """Run every replication and write ``steps.csv``, ``summary.csv`` and ``replications.csv``."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config.model)
    threads = config.threads if threads is None else threads
    results = map_replications(lambda r: _run_replication(config, model, r), config.replications, threads)

    header = _column_plan(config)
    steps_path = out / "steps.csv"
    counts = config.particle_counts or [0]

    def step_rows():
        for n in counts:
            for res in results:
                cols = res.columns.get(n)
                if cols is None:
                    continue
                for k in range(config.horizon + 1):
                    yield [cols[c][k] for c in header]

    write_csv(steps_path, header, step_rows())

    summary = []
    ok = [r for r in results if r.status == "ok"]
    prefixes = t_prefixes(config.horizon)
    keys = sorted({k for r in ok for k in r.errors}, key=lambda k: (k[0], _filter_order(config, k[1]), k[2]))
    for n, name, metric in keys:
        for t in prefixes:
            vals = [float(np.mean(r.errors[(n, name, metric)][1 : t + 1])) for r in ok]
            m, se = _mean_stderr(vals)
            summary.append([SCHEMA_VERSION, n, name, metric, t, m, se, len(vals)])
    if "mse" in config.metrics:
        f = make_test_function(config.test_function)
        pair_keys = sorted({k for r in ok for k in r.f_pairs}, key=lambda k: (k[0], _filter_order(config, k[1])))
        for n, name in pair_keys:
            for t in prefixes:
                vals = []
                for r in ok:
                    e, a = r.f_pairs[(n, name)]
                    vals.append(mse_comparison(r.trajectory, e, a, f, t))
                m, se = _mean_stderr(vals)
                summary.append([SCHEMA_VERSION, n, name, "mse", t, m, se, len(vals)])
    summary_path = out / "summary.csv"
    write_csv(summary_path, SUMMARY_HEADER, summary)

    rep_path = out / "replications.csv"
    derive = rngmod.derive_seed
    write_csv(rep_path, REPLICATION_HEADER,
              [[r.rep, derive(config.seed, rngmod.TRAJECTORY, r.rep), r.obs_hash, r.status] for r in results])
    failures = [(r.rep, r.status) for r in results if r.status != "ok"]
    return ExperimentResult(steps_path, summary_path, rep_path, summary, failures, header)


def _filter_order(config: ExperimentConfig, kind: str) -> int:
    return [f.kind for f in config.filters].index(kind)


def _stream_index(config: ExperimentConfig, kind: str) -> int:
    """Stream key of a filter: its position in the config, so sweeps reuse run streams."""
    kinds = [f.kind for f in config.filters]
    return kinds.index(kind) if kind in kinds else len(kinds) + APPROX_KINDS.index(kind)


# --------------------------------------------------------------------------
# sweep_uniformity


@dataclass
class SweepResult:
    csv_path: Path
    rows: list
    max_over_t: dict
    failures: list


def _sweep_replication(config, model, rep, n_values, t_max, filters, metric):
    traj = simulate(model, t_max, rngmod.derive_seed(config.seed, rngmod.TRAJECTORY, rep))
    f = make_test_function(config.test_function)
    ref = config.reference
    ref_run = _run_exact(ref.kind, ref, model, traj, f)
    out = {}
    try:
        for name in filters:
            idx = _stream_index(config, name)
            for n in n_values:
                gen = rngmod.stream(config.seed, rngmod.FILTER, rep, idx, n)
                run = _run_approx(name, n, model, traj, gen, f, True, None)
                out[(name, n)] = np.array([step_distance(metric, a, e, model, config.bl_bins)
                                           for a, e in zip(run.measures, ref_run.measures)])
    except (UnderflowError, FloatingPointError, AssertionError) as exc:
        log.error("sweep replication %d aborted: %s", rep, exc)
        return rep, None, str(exc)
    return rep, out, "ok"


def sweep_uniformity(base_config: ExperimentConfig, n_values: list[int], t_values: list[int],
                     filters=("bootstrap",), metric: Optional[str] = None,
                     threads: Optional[int] = None) -> SweepResult:
    """Grid of time-averaged distances over ``(N, T)`` and the max over ``T`` per ``N``.

    The supremum over horizons is approximated by the maximum over
    ``t_values``.  All particle counts share the same trajectories.
    """
    ref = base_config.reference
    if ref is None or ref.kind == "kalman":
        raise ValueError("sweep needs an atomic exact reference (forward or grid)")
    model = build_model(base_config.model)
    if metric is None:
        listed = [m for m in base_config.metrics if m in ("tv", "bl")]
        metric = listed[0] if listed else ("tv" if model.finite else "bl")
    t_values = sorted(set(int(t) for t in t_values))
    t_max = t_values[-1]
    threads = base_config.threads if threads is None else threads
    results = map_replications(
        lambda r: _sweep_replication(base_config, model, r, n_values, t_max, list(filters), metric),
        base_config.replications, threads)
    ok = [d for _, d, status in results if status == "ok"]
    failures = [(rep, status) for rep, _, status in results if status != "ok"]
    rows, maxima = [], {}
    for name in filters:
        for n in n_values:
            stats = []
            for t in t_values:
                vals = [float(np.mean(d[(name, n)][1 : t + 1])) for d in ok]
                stats.append((t, *_mean_stderr(vals)))
            mx = max(s[1] for s in stats)
            maxima[(name, n)] = mx
            for t, m, se in stats:
                rows.append([SCHEMA_VERSION, name, n, t, m, se, mx])
    out = Path(base_config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    write_csv(path, SWEEP_HEADER, rows)
    return SweepResult(path, rows, maxima, failures)


def write_trajectories(config: ExperimentConfig) -> Path:
    """Simulate every replication's trajectory and write ``trajectories.csv``."""
    model = build_model(config.model)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["rep", "k"] + [f"state_{i}" for i in range(model.state_dim)] + [f"obs_{i}" for i in range(model.obs_dim)]
    rows = []
    for rep in range(config.replications):
        traj = simulate(model, config.horizon, rngmod.derive_seed(config.seed, rngmod.TRAJECTORY, rep))
        for k in range(config.horizon + 1):
            rows.append([rep, k, *traj.states[k].tolist(), *traj.observations[k].tolist()])
    path = out / "trajectories.csv"
    write_csv(path, header, rows)
    return path
