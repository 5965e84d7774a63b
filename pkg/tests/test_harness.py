import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from uniformpf import rng as rngmod
from uniformpf.cli import main
from uniformpf.exact import forward_filter
from uniformpf.harness import ConfigError, SchemaError, emit_plot_script, load_config, run_experiment, sweep_uniformity
from uniformpf.harness.runner import (
    REPLICATION_HEADER,
    SUMMARY_HEADER,
    SWEEP_HEADER,
    observation_hash,
    t_prefixes,
)
from uniformpf.metrics import tv_distance
from uniformpf.models import make_finite_hmm, simulate
from uniformpf.exact import DiscreteBelief
from uniformpf.particles import iterate_bootstrap

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def figure1_tree(out, **kw):
    tree = {
        "seed": 5, "horizon": 40, "replications": 3, "metrics": ["mean_abs_err"], "output_dir": str(out),
        "model": {"kind": "linear_gaussian", "a": 0.9, "q": 1.0, "r": 1.0, "x0": 0.0},
        "filters": [{"kind": "kalman"}, {"kind": "bootstrap", "n": [50, 100, 400]}, {"kind": "naive", "n": [50, 100, 400]}],
    }
    tree.update(kw)
    return tree


def hmm_tree(out, **kw):
    tree = {
        "seed": 2, "horizon": 30, "replications": 2, "metrics": ["tv", "bl"], "output_dir": str(out),
        "model": {"kind": "finite_hmm", "transition": [[0.9, 0.1], [0.2, 0.8]],
                  "emission": [[0.7, 0.3], [0.4, 0.6]], "initial": [0.5, 0.5]},
        "filters": [{"kind": "forward"}, {"kind": "bootstrap", "n": [40]}],
    }
    tree.update(kw)
    return tree


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def write_config(tmp_path, tree, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(tree), encoding="utf-8")
    return path


# -- schema -----------------------------------------------------------------


def test_golden_headers(tmp_path):
    res = run_experiment(load_config(tree=figure1_tree(tmp_path)))
    rows = read_rows(res.steps_csv)
    assert rows[0] == ["rep", "n", "k", "kalman_mean", "bootstrap_mean", "naive_mean",
                       "abs_err_bootstrap", "abs_err_naive"]
    assert read_rows(res.summary_csv)[0] == SUMMARY_HEADER
    assert read_rows(res.replications_csv)[0] == REPLICATION_HEADER
    assert SUMMARY_HEADER == ["schema", "n", "filter", "metric", "t", "mean", "stderr", "reps"]
    assert SWEEP_HEADER == ["schema", "filter", "n", "t", "time_avg_mean", "time_avg_stderr", "max_over_t"]
    assert len(rows) == 1 + 3 * 3 * 41
    assert all(len(r) == len(rows[0]) for r in rows)


def test_hmm_header(tmp_path):
    res = run_experiment(load_config(tree=hmm_tree(tmp_path)))
    assert res.columns == ["rep", "n", "k", "forward_mean", "bootstrap_mean", "tv_bootstrap", "bl_bootstrap"]


def test_csv_format(tmp_path):
    res = run_experiment(load_config(tree=figure1_tree(tmp_path)))
    raw = res.steps_csv.read_bytes()
    assert b"\r" not in raw
    raw.decode("utf-8")
    for row in read_rows(res.steps_csv)[1:]:
        for cell in row[3:]:
            v = float(cell)
            assert np.isfinite(v)
            assert repr(v) == cell  # shortest round-trip representation


def test_t_prefixes():
    assert t_prefixes(500) == [50, 100, 150, 200, 250, 300, 350, 400, 450, 500]
    assert t_prefixes(1) == [1]
    assert t_prefixes(3) == [1, 2, 3]


# -- run_experiment ---------------------------------------------------------


def test_single_step_single_replication(tmp_path):
    tree = figure1_tree(tmp_path, horizon=1, replications=1, metrics=["mean_abs_err", "mse", "ess"])
    tree["filters"] = [{"kind": "kalman"}, {"kind": "bootstrap", "n": 20}]
    res = run_experiment(load_config(tree=tree))
    rows = read_rows(res.steps_csv)
    assert len(rows) == 3  # header, k = 0, k = 1
    summary = read_rows(res.summary_csv)[1:]
    assert {(r[2], r[3]) for r in summary} == {("bootstrap", "abs_err"), ("bootstrap", "mse")}
    assert all(r[4] == "1" and r[7] == "1" for r in summary)
    for r in rows[1:] + summary:
        assert all(c not in ("nan", "inf") for c in r)


def test_hmm_tv_column_matches_oracle(tmp_path):
    config = load_config(tree=hmm_tree(tmp_path))
    res = run_experiment(config)
    rows = read_rows(res.steps_csv)
    header = rows[0]
    tv_col = header.index("tv_bootstrap")
    bl_col = header.index("bl_bootstrap")
    model = make_finite_hmm(**{"transition_matrix": config.model.transition, "emission": config.model.emission,
                               "initial": config.model.initial})
    for rep in range(config.replications):
        traj = simulate(model, config.horizon, rngmod.derive_seed(config.seed, rngmod.TRAJECTORY, rep))
        exact = forward_filter(model, traj.observations)
        gen = rngmod.stream(config.seed, rngmod.FILTER, rep, 1, 40)
        got = [r for r in rows[1:] if r[0] == str(rep)]
        for (_, f), ex, row in zip(iterate_bootstrap(model, traj.observations, 40, gen), exact, got):
            p = np.bincount(f.locations[:, 0], weights=f.weights, minlength=2)
            tv = tv_distance(DiscreteBelief(p / p.sum()), ex)
            assert float(row[tv_col]) == pytest.approx(tv, abs=1e-15)
            assert float(row[bl_col]) == pytest.approx(tv / 2, abs=1e-9)


def test_observation_hashes_recorded(tmp_path):
    config = load_config(tree=figure1_tree(tmp_path))
    res = run_experiment(config)
    from uniformpf.harness import build_model

    model = build_model(config.model)
    for row in read_rows(res.replications_csv)[1:]:
        rep, seed, digest, status = row
        assert status == "ok"
        assert int(seed) == rngmod.derive_seed(config.seed, rngmod.TRAJECTORY, int(rep))
        assert digest == observation_hash(simulate(model, config.horizon, int(seed)).observations)


def test_byte_identical_across_runs_and_threads(tmp_path):
    outs = []
    for i, threads in enumerate([1, 1, 8]):
        res = run_experiment(load_config(tree=hmm_tree(tmp_path / str(i), replications=6, threads=threads)))
        outs.append([p.read_bytes() for p in (res.steps_csv, res.summary_csv, res.replications_csv)])
    assert outs[0] == outs[1] == outs[2]


def test_underflow_aborts_replication_and_is_logged(tmp_path, caplog):
    tree = figure1_tree(tmp_path, replications=2)
    tree["model"]["r"] = 1e-8
    tree["filters"] = [{"kind": "kalman"}, {"kind": "bootstrap", "n": 1}]
    res = run_experiment(load_config(tree=tree))
    assert res.failures and all(status.startswith("failed") for _, status in res.failures)
    assert "aborted" in caplog.text
    statuses = [r[3] for r in read_rows(res.replications_csv)[1:]]
    assert all(s.startswith("failed") for s in statuses)


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize("mutate, path", [
    (lambda t: t["model"].update(q=-1.0), "model.linear_gaussian.q"),
    (lambda t: t.pop("horizon"), "horizon"),
    (lambda t: t.update(horizon=0), "horizon"),
    (lambda t: t.update(replications=0), "replications"),
    (lambda t: t.update(colour="red"), "colour"),
    (lambda t: t["filters"][1].pop("n"), "filters.1"),
])
def test_config_errors_carry_field_paths(tmp_path, mutate, path):
    tree = figure1_tree(tmp_path)
    mutate(tree)
    with pytest.raises(ConfigError) as info:
        load_config(tree=tree)
    assert any(p == path or p.startswith(path) for p, _ in info.value.errors)


def test_distance_metric_needs_exact_filter(tmp_path):
    tree = hmm_tree(tmp_path)
    tree["filters"] = [{"kind": "bootstrap", "n": [10]}]
    with pytest.raises(ConfigError, match="exact filter"):
        load_config(tree=tree)
    tree = figure1_tree(tmp_path, metrics=["tv"])
    with pytest.raises(ConfigError, match="atomic reference"):
        load_config(tree=tree)


def test_overrides_and_toml(tmp_path):
    config = load_config(CONFIGS / "figure1.toml", ["model.a=0.5", "filters.1.n=[7]", "filters.2.n=[7]", f'output_dir="{tmp_path}"'])
    assert config.model.a == 0.5
    assert config.filters[1].n == [7]
    with pytest.raises(ConfigError):
        load_config(CONFIGS / "figure1.toml", ["horizon"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


@pytest.mark.parametrize("name", ["figure1", "hmm_sweep", "tightness", "case_i"])
def test_shipped_configs_validate(name):
    load_config(CONFIGS / f"{name}.toml")


# -- sweep ------------------------------------------------------------------


def test_sweep_single_point_reduces_to_run_summary(tmp_path):
    tree = hmm_tree(tmp_path, metrics=["tv"], replications=3, horizon=25)
    config = load_config(tree=tree)
    run = run_experiment(config)
    sweep = sweep_uniformity(config, [40], [25])
    run_row = [r for r in run.summary if r[3] == "tv" and r[4] == 25][0]
    assert len(sweep.rows) == 1
    assert sweep.rows[0][4] == run_row[5]
    assert sweep.rows[0][5] == run_row[6]
    assert sweep.max_over_t[("bootstrap", 40)] == run_row[5]


def test_sweep_naive_negative_control(tmp_path):
    config = load_config(tree=hmm_tree(tmp_path, replications=4))
    sweep = sweep_uniformity(config, [50], [10, 100, 1000], filters=("naive",))
    by_t = {row[3]: row[4] for row in sweep.rows}
    assert by_t[10] < by_t[100] < by_t[1000]


def test_sweep_header_and_max_column(tmp_path):
    config = load_config(tree=hmm_tree(tmp_path, replications=2))
    sweep = sweep_uniformity(config, [20, 80], [1, 5, 30])
    rows = read_rows(sweep.csv_path)
    assert rows[0] == SWEEP_HEADER
    for n in ("20", "80"):
        sub = [r for r in rows[1:] if r[2] == n]
        assert len({r[6] for r in sub}) == 1
        assert float(sub[0][6]) == max(float(r[4]) for r in sub)


def test_sweep_needs_atomic_reference(tmp_path):
    with pytest.raises(ValueError):
        sweep_uniformity(load_config(tree=figure1_tree(tmp_path)), [10], [5])


# -- plot scripts -----------------------------------------------------------


def _run_script(script):
    subprocess.run([sys.executable, str(script)], check=True, capture_output=True, timeout=120)


def test_error_vs_time_script(tmp_path):
    res = run_experiment(load_config(tree=figure1_tree(tmp_path, horizon=10, replications=2)))
    script = emit_plot_script(res.steps_csv, "error-vs-time")
    text = script.read_text()
    assert "abs_err_bootstrap" in text and "abs_err_naive" in text
    _run_script(script)
    assert res.steps_csv.with_suffix(".png").exists()


def test_plot_script_with_empty_body(tmp_path):
    csv_path = tmp_path / "steps.csv"
    csv_path.write_text("rep,n,k,kalman_mean,bootstrap_mean,abs_err_bootstrap\n", encoding="utf-8")
    _run_script(emit_plot_script(csv_path, "error-vs-time"))
    sweep_path = tmp_path / "sweep.csv"
    sweep_path.write_text(",".join(SWEEP_HEADER) + "\n", encoding="utf-8")
    _run_script(emit_plot_script(sweep_path, "error-vs-n"))


def test_error_vs_n_script(tmp_path):
    config = load_config(tree=hmm_tree(tmp_path, replications=2))
    sweep = sweep_uniformity(config, [20, 80, 320], [5, 30])
    script = emit_plot_script(sweep.csv_path, "error-vs-n")
    assert "loglog" in script.read_text()
    _run_script(script)


def test_schema_mismatch(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
    with pytest.raises(SchemaError):
        emit_plot_script(bad, "error-vs-time")
    with pytest.raises(SchemaError):
        emit_plot_script(bad, "error-vs-n")
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(SchemaError):
        emit_plot_script(empty, "error-vs-time")


# -- CLI --------------------------------------------------------------------


def test_cli_commands_and_exit_codes(tmp_path, capsys):
    cfg = write_config(tmp_path, figure1_tree(tmp_path / "out", horizon=5, replications=1))
    assert main(["compare", "--config", str(cfg)]) == 0
    assert main(["filter", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    assert read_rows(tmp_path / "f" / "steps.csv")[0][-1] == "ess_naive"
    assert main(["simulate", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "s")]) == 0
    assert read_rows(tmp_path / "s" / "trajectories.csv")[0] == ["rep", "k", "state_0", "obs_0"]
    assert main(["plot-script", "--csv", str(tmp_path / "out" / "steps.csv")]) == 0
    assert main(["compare", "--config", str(cfg), "--set", "model.q=-1"]) == 2
    assert "model.linear_gaussian.q" in capsys.readouterr().err
    assert main(["compare", "--config", str(tmp_path / "nope.toml")]) == 2
    assert main(["sweep", "--config", str(cfg)]) == 2  # no sweep block
    bad = tmp_path / "bad.csv"
    bad.write_text("x\n", encoding="utf-8")
    assert main(["plot-script", "--csv", str(bad)]) == 2


def test_cli_numeric_failure(tmp_path):
    tree = figure1_tree(tmp_path / "out", horizon=5, replications=1)
    tree["model"]["r"] = 1e-8
    tree["filters"] = [{"kind": "kalman"}, {"kind": "bootstrap", "n": 1}]
    assert main(["compare", "--config", str(write_config(tmp_path, tree))]) == 3


def test_cli_sweep_and_diagnose(tmp_path):
    cfg = write_config(tmp_path, {**hmm_tree(tmp_path / "sw", horizon=20),
                                  "sweep": {"n_values": [10, 40], "t_values": [5, 20]}})
    assert main(["sweep", "--config", str(cfg), "--threads", "2"]) == 0
    assert len(read_rows(tmp_path / "sw" / "sweep.csv")) == 5
    assert main(["diagnose", "--config", str(CONFIGS / "case_i.toml"), "--out", str(tmp_path / "c")]) == 0
    text = (tmp_path / "c" / "case_i.txt").read_text()
    assert "finite=true" in text
    assert main(["diagnose", "--config", str(CONFIGS / "tightness.toml"), "--out", str(tmp_path / "t"),
                 "--set", "horizon=20", "--set", "replications=2"]) == 0
    assert read_rows(tmp_path / "t" / "tightness.csv")[0] == ["k", "lyapunov_avg", "running_max", "predictor_avg"]
    assert "c1=" in (tmp_path / "t" / "tightness.txt").read_text()


def test_cli_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, figure1_tree(tmp_path / "o", horizon=2, replications=1))
    proc = subprocess.run([sys.executable, "-m", "uniformpf", "compare", "--config", str(cfg)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
