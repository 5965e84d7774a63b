"""Emit standalone matplotlib scripts for experiment CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

from uniformpf.harness.runner import SWEEP_HEADER

PLOT_KINDS = ("error-vs-time", "error-vs-n")


class SchemaError(ValueError):
    """CSV header does not match what the plot kind expects."""


_TIME_SCRIPT = '''\
"""Error versus time, one panel per particle count.  Generated by uniformpf."""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_PATH = {csv_path!r}
OUT_PATH = {out_path!r}
ERROR_COLUMNS = {columns!r}

sums = defaultdict(lambda: defaultdict(float))
counts = defaultdict(lambda: defaultdict(int))
with open(CSV_PATH, newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        n, k = int(row["n"]), int(row["k"])
        for col in ERROR_COLUMNS:
            sums[(n, col)][k] += float(row[col])
            counts[(n, col)][k] += 1

panels = sorted({{n for n, _ in sums}}) or [0]
fig, axes = plt.subplots(len(panels), 1, figsize=(8, 2.6 * len(panels)), squeeze=False)
for ax, n in zip(axes[:, 0], panels):
    for col in ERROR_COLUMNS:
        ks = sorted(sums[(n, col)])
        ax.plot(ks, [sums[(n, col)][k] / counts[(n, col)][k] for k in ks], label=col)
    ax.set_title(f"N = {{n}}")
    ax.set_xlabel("k")
    ax.set_ylabel("mean error over replications")
    ax.legend(loc="upper left")
fig.tight_layout()
fig.savefig(OUT_PATH)
'''

_N_SCRIPT = '''\
"""Max-over-T time-average error versus N (log-log).  Generated by uniformpf."""
import csv
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

CSV_PATH = {csv_path!r}
OUT_PATH = {out_path!r}

series = defaultdict(dict)
with open(CSV_PATH, newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        series[row["filter"]][int(row["n"])] = float(row["max_over_t"])

fig, ax = plt.subplots(figsize=(6, 4.5))
for name, pts in sorted(series.items()):
    ns = sorted(pts)
    ax.loglog(ns, [pts[n] for n in ns], "o-", label=name)
    if ns:
        ref = pts[ns[0]]
        ax.loglog(ns, [ref * (n / ns[0]) ** -0.5 for n in ns], "k--", lw=0.8, label="slope -1/2")
ax.set_xlabel("N")
ax.set_ylabel("max over T of time-average error")
if series:
    ax.legend()
fig.tight_layout()
fig.savefig(OUT_PATH)
'''


def _header(csv_path: Path) -> list[str]:
    with open(csv_path, newline="", encoding="utf-8") as fh:
        try:
            return next(csv.reader(fh))
        except StopIteration:
            raise SchemaError(f"{csv_path} has no header row") from None


def emit_plot_script(csv_path, plot_kind: str, out_path: Optional[str] = None) -> Path:
    """Write a plotting script next to ``csv_path`` and return its path."""
    csv_path = Path(csv_path)
    if plot_kind not in PLOT_KINDS:
        raise ValueError(f"plot kind must be one of {PLOT_KINDS}")
    header = _header(csv_path)
    image = str(csv_path.with_suffix(".png"))
    if plot_kind == "error-vs-time":
        columns = [c for c in header if c.startswith(("abs_err_", "tv_", "bl_"))]
        missing = {"rep", "n", "k"} - set(header)
        if missing or not columns:
            raise SchemaError(f"step CSV needs rep, n, k and at least one error column; got {header}")
        text = _TIME_SCRIPT.format(csv_path=str(csv_path), out_path=image, columns=columns)
    else:
        if header != SWEEP_HEADER:
            raise SchemaError(f"sweep CSV header must be {SWEEP_HEADER}; got {header}")
        text = _N_SCRIPT.format(csv_path=str(csv_path), out_path=image)
    script = Path(out_path) if out_path else csv_path.with_name(f"plot_{csv_path.stem}.py")
    script.write_text(text, encoding="utf-8")
    return script
