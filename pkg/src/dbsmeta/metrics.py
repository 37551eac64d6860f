"""
Metrics files: CSV tables with ``#`` header lines carrying the schema version
and the spec hash, and the ``summary.toml`` written next to every run.
"""

import glob
import os

import numpy as np
import pandas as pd

from .config import SCHEMA_VERSION, read_toml, write_toml


def write_csv(frame, path, spec_hash):
    """Write a DataFrame below the two header comment lines."""
    with open(path, "w", newline="") as f:
        f.write("# schema_version = {}\n".format(SCHEMA_VERSION))
        f.write("# spec_hash = {}\n".format(spec_hash))
        frame.to_csv(f, index=False)


def read_csv(path):
    return pd.read_csv(path, comment="#")


def csv_header(path):
    """Header comment lines of a metrics file as a dict."""
    header = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].partition("=")
            header[key.strip()] = value.strip()
    return header


def final_utility(utilities, window):
    g = np.asarray(utilities, dtype=np.float64)
    if g.size == 0:
        return 0.0
    return float(g[-window:].mean())


def write_summary(path, summary):
    write_toml(summary, path)


def read_summaries(root):
    """All ``summary.toml`` files below ``root`` with their directory."""
    found = []
    for path in sorted(glob.glob(os.path.join(root, "**", "summary.toml"), recursive=True)):
        summary = read_toml(path)
        summary["run_dir"] = os.path.dirname(path)
        found.append(summary)
    return found


def summarize(runs):
    """Per-algorithm table of converge iterations and final G over seeds.

    Parameters
    ----------
    runs : list of dict
        Entries with ``algo``, ``final_G`` and ``iterations_to_converge``

    Returns
    -------
    pandas.DataFrame
    """
    frame = pd.DataFrame(runs)
    if frame.empty:
        return pd.DataFrame(columns=["algo", "runs", "median_iterations_to_converge", "final_G_median",
                                     "final_G_min", "final_G_max"])
    grouped = frame.groupby("algo", sort=False)
    table = pd.DataFrame({
        "runs": grouped.size(),
        "median_iterations_to_converge": grouped["iterations_to_converge"].median(),
        "final_G_median": grouped["final_G"].median(),
        "final_G_min": grouped["final_G"].min(),
        "final_G_max": grouped["final_G"].max(),
    })
    return table.reset_index()
