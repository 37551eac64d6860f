"""
Orchestration of runs: one directory ``<out>/<algo>/seed_<s>/`` per
(algorithm, seed), fanned out to a process pool, results gathered in
submission order.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np
import pandas as pd

from .approx import ParamSet
from .baselines import BaselineKind, pretrain_init
from .checkpoint import save_params
from .config import ALGORITHMS, SCHEMA_VERSION, build_spec, read_toml, world_to_dict, write_toml
from .errors import ConfigError
from .meta import eval_adaptation, meta_task_stream, meta_train
from .metrics import read_csv, summarize, write_csv
from .runner import RunnerMeta, RunnerOracle, RunnerTrain
from .runner.RunnerBase import attach_log_file, detach_log_file
from .vdrl import converged_at

logger = logging.getLogger(__name__)

RUNNERS = {
    "vdrl": RunnerTrain,
    "vdrl-unscaled": RunnerTrain,
    BaselineKind.IAC.value: RunnerTrain,
    BaselineKind.PRETRAINED_VDRL.value: RunnerTrain,
    "meta": RunnerMeta,
    "oracle": RunnerOracle,
}


def CallRunner(spec, algo, seed, out_dir, runner, progress=True):
    """Create the runner of one (algorithm, seed) pair.

    Parameters
    ----------
    spec : ExperimentSpec
        Resolved experiment
    algo : str
        Algorithm name
    seed : int
        Run seed
    out_dir : str
        Experiment output directory
    runner : type
        Runner class to instantiate
    progress : bool, optional
        Show progress bars

    Returns
    -------
    RunnerBase
    """
    run_dir = os.path.join(out_dir, algo, "seed_{}".format(seed))
    return runner(spec, algo, seed, run_dir, progress)


def run_job(resolved, algo, seed, out_dir, progress=True):
    """Worker entry point; rebuilds the spec from its resolved tables."""
    spec = build_spec(resolved)
    return CallRunner(spec, algo, seed, out_dir, runner=RUNNERS[algo], progress=progress).run()


def run_all(spec, algos, jobs=1):
    """Run every (algorithm, seed) pair of ``spec``.

    Returns
    -------
    list of dict
        Run summaries in (algorithm, seed) order
    """
    for algo in algos:
        if algo not in RUNNERS:
            raise ConfigError("unknown algorithm '{}' (expected one of {})".format(algo, ", ".join(ALGORITHMS)))
    pairs = [(algo, seed) for algo in algos for seed in spec.seeds]
    if jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_job, spec.resolved, algo, seed, spec.output_dir, False) for algo, seed in pairs]
            return [f.result() for f in futures]
    return [CallRunner(spec, algo, seed, spec.output_dir, runner=RUNNERS[algo]).run() for algo, seed in pairs]


def read_external(name, path, window, tol):
    """Summaries of user supplied runs (CSV with iteration, G and optionally seed)."""
    frame = read_csv(path)
    if "G" not in frame.columns:
        raise ConfigError("external results {} need a G column".format(path))
    if "seed" not in frame.columns:
        frame["seed"] = 0
    runs = []
    for seed, group in frame.groupby("seed", sort=True):
        g = group.sort_values("iteration")["G"].to_numpy() if "iteration" in group else group["G"].to_numpy()
        at = converged_at(g, window, tol)
        runs.append({"algo": name, "seed": int(seed), "final_G": float(g[-window:].mean()) if g.size else 0.0,
                     "iterations_to_converge": at if at is not None else int(g.size)})
    return runs


def compare(spec, algos, externals=(), jobs=1):
    """Run the algorithms and tabulate converge iterations and final G over seeds.

    Parameters
    ----------
    spec : ExperimentSpec
        Resolved experiment
    algos : sequence of str
        Algorithms to run
    externals : sequence of str
        ``name=path.csv`` results produced elsewhere
    jobs : int
        Worker processes

    Returns
    -------
    pandas.DataFrame
    """
    summaries = run_all(spec, algos, jobs)
    runs = [{"algo": s["algo"], "seed": s["seed"], "final_G": s["final_G"],
             "iterations_to_converge": s.get("iterations_to_converge", 0)} for s in summaries]
    train_section = spec.section("train")
    for item in externals:
        if "=" not in item:
            raise ConfigError("external result '{}' must look like name=path.csv".format(item))
        name, path = item.split("=", 1)
        runs.extend(read_external(name, path, int(train_section["convergence_window"]),
                                  float(train_section["convergence_tol"])))
    table = summarize(runs)
    os.makedirs(spec.output_dir, exist_ok=True)
    write_csv(table, os.path.join(spec.output_dir, "compare.csv"), spec.spec_hash)
    return table


def gen_world(spec, out_dir):
    """Write the resolved world with explicit user positions to ``<out_dir>/world.toml``."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "world.toml")
    write_toml(world_to_dict(spec.world), path)
    return path


def adaptation_inits(spec, seed, progress=False):
    """Random, meta-trained and pre-trained initializations of one seed."""
    rng = np.random.default_rng(seed)
    random_init = ParamSet.init(spec.world, rng, spec.hidden, spec.activation)
    meta_cfg = spec.meta_config(seed)
    if not progress:
        meta_cfg = replace(meta_cfg, progress=False)
    stream = meta_task_stream(spec.world, spec.tasks, seed, meta_cfg.meta_iterations, meta_cfg.tasks_per_iteration)
    meta_init = meta_train(spec.world, spec.tasks, random_init, meta_cfg, np.random.default_rng([seed, 11]),
                           tasks=stream).params
    per_task = int(spec.section("pretrain")["iterations_per_task"])
    pre_cfg = spec.train_config(seed, "pretrain", per_task)
    if not progress:
        pre_cfg = replace(pre_cfg, progress=False)
    pre_init = pretrain_init(spec.world, [z for batch in stream for z in batch], random_init, pre_cfg,
                             np.random.default_rng([seed, 12]))
    return {
        BaselineKind.RANDOM_INIT_VDRL.value: random_init,
        "meta": meta_init,
        BaselineKind.PRETRAINED_VDRL.value: pre_init,
    }


def run_adaptation(spec, seed, progress=False):
    """Held-out adaptation experiment of one seed written to ``<out>/eval/seed_<s>/``."""
    run_dir = os.path.join(spec.output_dir, "eval", "seed_{}".format(seed))
    report_path = os.path.join(run_dir, "adaptation.toml")
    if os.path.exists(report_path):
        previous = read_toml(report_path).get("spec_hash")
        if previous != spec.spec_hash:
            raise ConfigError("{} holds an evaluation of spec {}, not {}; choose another --out".format(
                run_dir, previous, spec.spec_hash))
    os.makedirs(run_dir, exist_ok=True)
    handler = attach_log_file(run_dir)
    try:
        logger.info("start adaptation seed %d, spec_hash = %s", seed, spec.spec_hash)
        section = spec.section("eval")
        inits = adaptation_inits(spec, seed, progress)
        selected = {name: inits[name] for name in section["algorithms"] if name in inits}
        if not selected:
            raise ConfigError("eval.algorithms must name some of random, meta, pretrain")
        for name, params in selected.items():
            save_params(os.path.join(run_dir, "init_{}.h5".format(name)), params, kind=name)
        cfg = spec.train_config(seed, "vdrl", int(section["max_iterations"]))
        if not progress:
            cfg = replace(cfg, progress=False)
        rows, curves, snapshots = eval_adaptation(
            spec.world, spec.tasks, selected, cfg, seed, num_tasks=int(section["num_tasks"]),
            threshold=float(section["threshold"]), window=int(section["window"]),
            oracle_cap=int(spec.section("oracle")["cap"]), snapshot_iterations=section["snapshot_iterations"])
        report = {"schema_version": SCHEMA_VERSION, "spec_hash": spec.spec_hash, "seed": seed, "tasks": rows}
        write_toml(report, report_path)
        frame = pd.DataFrame(curves, columns=["task", "init", "iteration", "G"])
        frame.insert(0, "seed", seed)
        write_csv(frame, os.path.join(run_dir, "adaptation.csv"), spec.spec_hash)
        if snapshots:
            frame = pd.DataFrame(snapshots, columns=["task", "init", "iteration", "dbs", "step", "cluster", "G"])
            frame.insert(0, "seed", seed)
            write_csv(frame, os.path.join(run_dir, "adaptation_snapshots.csv"), spec.spec_hash)
        for name in selected:
            iters = [r["iterations"] for r in rows if r["init"] == name]
            logger.info("seed %d, %s init: median iterations to threshold %.1f", seed, name, float(np.median(iters)))
    finally:
        detach_log_file(handler)
    return rows


def _adaptation_job(resolved, seed):
    return run_adaptation(build_spec(resolved), seed)


def eval_adaptation_all(spec, jobs=1):
    """Adaptation experiment over all seeds; returns the median iterations per initialization."""
    if jobs > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_adaptation_job, spec.resolved, seed) for seed in spec.seeds]
            rows = [row for f in futures for row in f.result()]
    else:
        rows = [row for seed in spec.seeds
                for row in run_adaptation(spec, seed, bool(spec.section("train")["progress"]))]
    frame = pd.DataFrame(rows)
    return frame.groupby("init", sort=False)["iterations"].median()
