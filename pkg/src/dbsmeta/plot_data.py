"""
Plot-ready CSV series from a directory of runs. Nothing is rendered.

fig4   per-DBS cumulative service rate vs. time of the saved final episode
fig5   per-DBS values at the initial state and their sum vs. iteration
fig6   per-DBS values at every step of the episode and their per-step sums vs. iteration
fig7   G vs. iteration per algorithm (median, min, max over seeds)
fig8   greedy trajectories of each initialization after a fixed number of adaptation iterations
fig9   G vs. adaptation iteration per initialization (median over tasks and seeds)
fig10  final G vs. number of DBSs per algorithm (median over seeds)

Every series carries the spec hash of the files it was built from; a series
pooled over runs of several specs carries their hashes joined by commas.
"""

import glob
import logging
import os
import re

import pandas as pd

from .errors import ConfigError
from .metrics import csv_header, read_csv, read_summaries, write_csv
from .sim import parse_event_log

logger = logging.getLogger(__name__)

FIGURES = ("fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10")

STEP_VALUE = re.compile(r"^value_dbs(\d+)_step(\d+)$")


def _source_hash(path):
    return csv_header(path).get("spec_hash", "-")


def _joined(hashes):
    return ",".join(sorted(set(hashes))) or "-"


def _runs_with(root, name):
    return [s for s in read_summaries(root) if os.path.exists(os.path.join(s["run_dir"], name))]


def _service_timeline(root):
    series = {}
    for summary in _runs_with(root, "events.txt"):
        path = os.path.join(summary["run_dir"], "events.txt")
        with open(path) as f:
            events = parse_event_log(f.read())
        rows, totals = [], {}
        for ev in sorted(events, key=lambda e: (e.time, e.dbs)):
            totals[ev.dbs] = totals.get(ev.dbs, 0.0) + ev.mu
            rows.append({"dbs": ev.dbs, "time": ev.time, "cumulative_mu": totals[ev.dbs]})
        frame = pd.DataFrame(rows, columns=["dbs", "time", "cumulative_mu"])
        spec_hash = csv_header(path).get("spec_hash", summary.get("spec_hash", "-"))
        series["fig4_{}_seed{}".format(summary["algo"], summary["seed"])] = (frame, spec_hash)
    return series


def _value_trace(root):
    series = {}
    for summary in _runs_with(root, "metrics.csv"):
        path = os.path.join(summary["run_dir"], "metrics.csv")
        frame = read_csv(path)
        columns = [c for c in frame.columns if re.fullmatch(r"value_dbs\d+", c)]
        if not columns:
            continue
        trace = frame[["iteration"] + columns].copy()
        trace["value_sum"] = frame[columns].sum(axis=1)
        series["fig5_{}_seed{}".format(summary["algo"], summary["seed"])] = (trace, _source_hash(path))
    return series


def _step_values(root):
    series = {}
    for summary in _runs_with(root, "metrics.csv"):
        path = os.path.join(summary["run_dir"], "metrics.csv")
        frame = read_csv(path)
        matched = sorted((int(m.group(2)), int(m.group(1)), m.group(0))
                         for m in map(STEP_VALUE.match, frame.columns) if m)
        if not matched:
            continue
        trace = frame[["iteration"] + [c for _, _, c in matched]].copy()
        for k in sorted({k for k, _, _ in matched}):
            trace["value_step{}".format(k)] = frame[[c for step, _, c in matched if step == k]].sum(axis=1)
        series["fig6_{}_seed{}".format(summary["algo"], summary["seed"])] = (trace, _source_hash(path))
    return series


def _utility_curves(root):
    frames = []
    for summary in _runs_with(root, "metrics.csv"):
        path = os.path.join(summary["run_dir"], "metrics.csv")
        frame = read_csv(path)[["algo", "seed", "iteration", "G"]].copy()
        frame["spec_hash"] = _source_hash(path)
        frames.append(frame)
    series = {}
    if not frames:
        return series
    merged = pd.concat(frames, ignore_index=True)
    for algo, group in merged.groupby("algo", sort=True):
        by_iter = group.groupby("iteration")["G"]
        curve = pd.DataFrame({
            "G_median": by_iter.median(), "G_min": by_iter.min(), "G_max": by_iter.max(),
        }).reset_index()
        series["fig7_{}".format(algo)] = (curve, _joined(group["spec_hash"]))
    return series


def _read_tagged(root, name):
    paths = sorted(glob.glob(os.path.join(root, "**", name), recursive=True))
    frames = []
    for path in paths:
        frame = read_csv(path)
        frame["spec_hash"] = _source_hash(path)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else None


def _trajectory_snapshots(root):
    merged = _read_tagged(root, "adaptation_snapshots.csv")
    series = {}
    if merged is None:
        return series
    columns = ["seed", "task", "dbs", "step", "cluster", "G"]
    for (init, iteration), group in merged.groupby(["init", "iteration"], sort=True):
        frame = group.sort_values(["seed", "task", "dbs", "step"])[columns].reset_index(drop=True)
        series["fig8_{}_iter{}".format(init, iteration)] = (frame, _joined(group["spec_hash"]))
    return series


def _adaptation_curves(root):
    merged = _read_tagged(root, "adaptation.csv")
    series = {}
    if merged is None:
        return series
    for init, group in merged.groupby("init", sort=True):
        by_iter = group.groupby("iteration")["G"]
        curve = pd.DataFrame({
            "G_median": by_iter.median(), "G_min": by_iter.min(), "G_max": by_iter.max(),
        }).reset_index()
        series["fig9_{}".format(init)] = (curve, _joined(group["spec_hash"]))
    return series


def _fleet_size(root):
    rows = [{"algo": s["algo"], "num_dbs": s["num_dbs"], "final_G": s["final_G"], "spec_hash": s.get("spec_hash", "-")}
            for s in read_summaries(root) if "final_G" in s and "num_dbs" in s]
    series = {}
    if not rows:
        return series
    frame = pd.DataFrame(rows)
    for algo, group in frame.groupby("algo", sort=True):
        by_n = group.groupby("num_dbs")["final_G"]
        curve = pd.DataFrame({
            "G_median": by_n.median(), "G_min": by_n.min(), "G_max": by_n.max(), "runs": by_n.size(),
        }).reset_index()
        series["fig10_{}".format(algo)] = (curve, _joined(group["spec_hash"]))
    return series


BUILDERS = {
    "fig4": _service_timeline,
    "fig5": _value_trace,
    "fig6": _step_values,
    "fig7": _utility_curves,
    "fig8": _trajectory_snapshots,
    "fig9": _adaptation_curves,
    "fig10": _fleet_size,
}


def emit_plot_data(metrics_dir, figure, out_dir=None):
    """Write one CSV per curve of ``figure``.

    Returns
    -------
    list of str
        Written files; empty when ``metrics_dir`` holds no usable runs
    """
    if figure not in BUILDERS:
        raise ConfigError("unknown figure '{}' (expected one of {})".format(figure, ", ".join(FIGURES)))
    if not os.path.isdir(metrics_dir):
        raise ConfigError("metrics directory {} does not exist".format(metrics_dir))
    series = BUILDERS[figure](metrics_dir)
    if not series:
        logger.warning("Warning: no data for %s under %s", figure, metrics_dir)
        return []
    out_dir = out_dir or os.path.join(metrics_dir, "plot_data")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, (frame, spec_hash) in sorted(series.items()):
        path = os.path.join(out_dir, "{}.csv".format(name))
        write_csv(frame, path, spec_hash)
        written.append(path)
    return written
