import logging
import os
import sys

import numpy as np
import pandas as pd
import pytest

from dbsmeta.baselines import BaselineKind
from dbsmeta.config import (
    ALGORITHMS,
    apply_override,
    build_spec,
    load_spec,
    read_toml,
    resolve,
    spec_hash,
)
from dbsmeta.errors import ConfigError
from dbsmeta.experiment import RUNNERS
from dbsmeta.job import run
from dbsmeta.metrics import csv_header, read_csv, read_summaries, summarize
from dbsmeta.plot_data import emit_plot_data
from dbsmeta.runner import RunnerTrain

from .conftest import SAMPLE_DIR

QUICK = ["--seed", "0", "--override", "train.max_iterations=5", "--override", "train.progress=false"]


@pytest.fixture(autouse=True)
def drop_console_handler():
    yield
    package_logger = logging.getLogger("dbsmeta")
    for handler in list(package_logger.handlers):
        if getattr(handler, "_dbsmeta_console", False):
            package_logger.removeHandler(handler)


def _train(spec_path, out, *extra):
    return run(["train", "--spec", spec_path, "--out", str(out)] + QUICK + list(extra))


def test_load_tiny_spec(tiny_spec_path):
    spec = load_spec(tiny_spec_path)
    assert spec.world.num_dbs == 2
    assert spec.world.num_clusters == 3
    assert spec.world.num_users == 30
    assert spec.world.enumeration_size() == 4096
    assert spec.seeds == list(range(10))
    assert spec.hidden == (16, 16)
    assert spec.tasks.t_max == 60.0


def test_generated_altitudes():
    spec = load_spec(str(SAMPLE_DIR / "hexagon" / "params.toml"))
    assert spec.world.altitudes == (100.0, 120.0, 140.0, 160.0, 180.0)
    assert spec.world.num_users == 300


def test_symmetric_pair_spec():
    spec = load_spec(str(SAMPLE_DIR / "symmetric_pair" / "params.toml"))
    assert spec.world.max_steps == 1
    assert spec.tasks.p_active == 1.0


def test_overrides_and_seed(tiny_spec_path):
    spec = load_spec(tiny_spec_path, ["train.max_iterations=7", "experiment.algorithm=iac"], seed=3,
                     output_dir="elsewhere")
    assert spec.algorithm == "iac"
    assert spec.seeds == [3]
    assert spec.output_dir == "elsewhere"
    assert spec.train_config(3).max_iterations == 7
    assert spec.train_config(3, "vdrl-unscaled").scale_team_reward is False
    assert spec.train_config(3, "vdrl").scale_team_reward is True


def test_apply_override_parses_toml_values():
    dic = {}
    apply_override(dic, "train.value_step=[0.1, 1.0, 0.6]")
    apply_override(dic, "experiment.output_dir=out/run")
    assert dic == {"train": {"value_step": [0.1, 1.0, 0.6]}, "experiment": {"output_dir": "out/run"}}
    with pytest.raises(ConfigError):
        apply_override(dic, "no_equals_sign")
    with pytest.raises(ConfigError):
        apply_override(dic, "toplevel=1")


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"train": {"bogus": 1}},
    {"schema_version": 2},
    {"world": {"clusters": []}},
])
def test_resolve_rejects(raw):
    raw = dict(raw)
    raw.setdefault("world", {"clusters": [{"center": [900.0, 0.0], "num_users": 2}]})
    with pytest.raises(ConfigError):
        resolve(raw)


@pytest.mark.parametrize("override", [
    "meta.mode=\"second\"",
    "radio.shadow_mode=\"loud\"",
    "train.value_step=[0.1, 1.0]",
    "experiment.algorithm=\"sarsa\"",
    "experiment.seeds=[1, 1]",
    "world.num_dbs=3",
    "eval.snapshot_iterations=[-1]",
    "eval.snapshot_iterations=5",
])
def test_invalid_values(tiny_spec_path, override):
    with pytest.raises(ConfigError):
        load_spec(tiny_spec_path, [override])


def test_spec_hash_tracks_content(tiny_spec_path):
    a = load_spec(tiny_spec_path)
    b = load_spec(tiny_spec_path)
    c = load_spec(tiny_spec_path, ["train.discount=0.9"])
    assert a.spec_hash == b.spec_hash == spec_hash(a.resolved)
    assert a.spec_hash != c.spec_hash
    assert build_spec(a.resolved).spec_hash == a.spec_hash


def test_gen_world_round_trip(tmp_path, tiny_spec_path):
    assert run(["gen-world", "--spec", tiny_spec_path, "--out", str(tmp_path)]) == 0
    world_file = tmp_path / "world.toml"
    assert "world" in read_toml(str(world_file))
    spec_file = tmp_path / "from_world.toml"
    spec_file.write_text("schema_version = 1\n\n[experiment]\nworld_file = \"world.toml\"\n")
    original = load_spec(tiny_spec_path)
    loaded = load_spec(str(spec_file))
    assert loaded.world.num_users == original.world.num_users
    assert (loaded.world.user_positions == original.world.user_positions).all()
    assert loaded.world.altitudes == original.world.altitudes


def test_train_writes_run_directory(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path) == 0
    run_dir = tmp_path / "vdrl" / "seed_0"
    for name in ("metrics.csv", "summary.toml", "params.h5", "events.txt", "log"):
        assert (run_dir / name).exists(), name
    header = csv_header(str(run_dir / "metrics.csv"))
    assert header["schema_version"] == "1"
    assert len(header["spec_hash"]) == 64
    frame = read_csv(str(run_dir / "metrics.csv"))
    assert frame["iteration"].tolist() == [0, 1, 2, 3, 4]
    assert set(frame["algo"]) == {"vdrl"}
    summary = read_toml(str(run_dir / "summary.toml"))
    assert summary["iterations"] == 5
    assert summary["spec_hash"] == header["spec_hash"]
    assert "finish vdrl seed 0" in (run_dir / "log").read_text()


def test_train_is_byte_reproducible(tmp_path, tiny_spec_path):
    path = tmp_path / "vdrl" / "seed_0" / "metrics.csv"
    assert _train(tiny_spec_path, tmp_path) == 0
    first = path.read_bytes()
    assert _train(tiny_spec_path, tmp_path) == 0
    assert path.read_bytes() == first


def test_train_records_spec_hash_everywhere(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path) == 0
    run_dir = tmp_path / "vdrl" / "seed_0"
    expected = csv_header(str(run_dir / "metrics.csv"))["spec_hash"]
    assert csv_header(str(run_dir / "events.txt"))["spec_hash"] == expected
    assert "start vdrl seed 0, spec_hash = {}".format(expected) in (run_dir / "log").read_text()


def test_run_directory_of_another_spec_is_kept(tmp_path, tiny_spec_path, capsys):
    assert _train(tiny_spec_path, tmp_path) == 0
    metrics = tmp_path / "vdrl" / "seed_0" / "metrics.csv"
    before = metrics.read_bytes()
    capsys.readouterr()
    assert _train(tiny_spec_path, tmp_path, "--override", "tasks.p_active=0.7") == 2
    assert "holds a run of spec" in capsys.readouterr().err.strip().splitlines()[-1]
    assert metrics.read_bytes() == before
    assert _train(tiny_spec_path, tmp_path / "other", "--override", "tasks.p_active=0.7") == 0


def test_train_refuses_meta(tmp_path, tiny_spec_path, capsys):
    assert _train(tiny_spec_path, tmp_path, "--override", "experiment.algorithm=\"meta\"") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1] == "Error: use meta-train for the meta algorithm"
    assert not (tmp_path / "meta").exists()


@pytest.mark.parametrize("algo", ["iac", "vdrl-unscaled"])
def test_train_other_algorithms(tmp_path, tiny_spec_path, algo):
    assert _train(tiny_spec_path, tmp_path, "--override", "experiment.algorithm=\"{}\"".format(algo)) == 0
    assert (tmp_path / algo / "seed_0" / "summary.toml").exists()


def test_pretrain_writes_initialization(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path, "--override", "experiment.algorithm=\"pretrain\"",
                  "--override", "meta.meta_iterations=1", "--override", "meta.tasks_per_iteration=2",
                  "--override", "pretrain.iterations_per_task=1") == 0
    assert (tmp_path / "pretrain" / "seed_0" / "init.h5").exists()


def test_meta_train_command(tmp_path, tiny_spec_path):
    code = run(["meta-train", "--spec", tiny_spec_path, "--out", str(tmp_path), "--override", "meta.meta_iterations=2",
                "--override", "meta.tasks_per_iteration=1"] + QUICK)
    assert code == 0
    run_dir = tmp_path / "meta" / "seed_0"
    meta_frame = read_csv(str(run_dir / "meta_metrics.csv"))
    assert meta_frame["meta_iteration"].tolist() == [0, 1]
    assert (run_dir / "init.h5").exists()
    assert "final_L_c" in read_toml(str(run_dir / "summary.toml"))


def test_oracle_command(tmp_path, tiny_spec_path, capsys):
    assert run(["oracle", "--spec", tiny_spec_path, "--out", str(tmp_path), "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "G* = " in out
    assert "DBS 0: O -> " in out
    summary = read_toml(str(tmp_path / "oracle" / "seed_0" / "summary.toml"))
    assert summary["G_star"] == summary["final_G"]
    assert len(summary["trajectory"]) == 2


def test_oracle_cap_exit_code(tmp_path, tiny_spec_path, capsys):
    code = run(["oracle", "--spec", tiny_spec_path, "--out", str(tmp_path), "--seed", "0",
                "--override", "oracle.cap=100"])
    assert code == 4
    assert "Error: enumeration needs 4096" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    assert run(["train", "--spec", str(tmp_path / "missing.toml")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert err == ["Error: file not found: {}".format(tmp_path / "missing.toml")]


def test_compare_command(tmp_path, tiny_spec_path, capsys):
    external = tmp_path / "ext.csv"
    pd.DataFrame({"iteration": range(4), "G": [0.1, 0.2, 0.3, 0.3]}).to_csv(external, index=False)
    code = run(["compare", "--spec", tiny_spec_path, "--out", str(tmp_path), "--algos", "vdrl,iac",
                "--external", "theirs={}".format(external)] + QUICK)
    assert code == 0
    table = read_csv(str(tmp_path / "compare.csv"))
    assert list(table.columns) == ["algo", "runs", "median_iterations_to_converge", "final_G_median", "final_G_min",
                                   "final_G_max"]
    assert table["algo"].tolist() == ["vdrl", "iac", "theirs"]
    assert table["runs"].tolist() == [1, 1, 1]
    # the convergence window is longer than the external run, so its final G is the plain mean
    assert table.loc[2, "final_G_median"] == pytest.approx(0.225)
    assert table.loc[2, "median_iterations_to_converge"] == 4
    assert all((table["final_G_min"] <= table["final_G_median"]) & (table["final_G_median"] <= table["final_G_max"]))
    assert "final_G_median" in capsys.readouterr().out


EVAL_QUICK = ["--override", "train.progress=false", "--override", "meta.meta_iterations=1",
              "--override", "meta.tasks_per_iteration=1", "--override", "pretrain.iterations_per_task=1",
              "--override", "eval.max_iterations=4", "--override", "eval.num_tasks=1", "--override", "eval.window=2"]


def test_eval_adaptation_command(tmp_path, tiny_spec_path):
    code = run(["eval-adaptation", "--spec", tiny_spec_path, "--out", str(tmp_path), "--seed", "0",
                "--override", "eval.snapshot_iterations=[0, 2]"] + EVAL_QUICK)
    assert code == 0
    eval_dir = tmp_path / "eval" / "seed_0"
    report = read_toml(str(eval_dir / "adaptation.toml"))
    assert {row["init"] for row in report["tasks"]} == {"meta", "pretrain", "random"}
    curves = read_csv(str(eval_dir / "adaptation.csv"))
    assert len(curves) == 3 * 4
    for name in ("meta", "pretrain", "random"):
        assert (eval_dir / "init_{}.h5".format(name)).exists()
    snapshots = read_csv(str(eval_dir / "adaptation_snapshots.csv"))
    # 3 inits, 2 snapshot iterations, 2 DBSs, 3 steps
    assert len(snapshots) == 3 * 2 * 2 * 3
    assert sorted(set(snapshots["iteration"])) == [0, 2]
    assert "spec_hash = {}".format(report["spec_hash"]) in (eval_dir / "log").read_text()

    assert run(["plot-data", "--figure", "fig8", "--metrics", str(tmp_path)]) == 0
    assert run(["plot-data", "--figure", "fig9", "--metrics", str(tmp_path)]) == 0
    plots = tmp_path / "plot_data"
    for name in ("meta", "pretrain", "random"):
        for iteration in (0, 2):
            path = plots / "fig8_{}_iter{}.csv".format(name, iteration)
            assert csv_header(str(path))["spec_hash"] == report["spec_hash"]
            assert list(read_csv(str(path)).columns) == ["seed", "task", "dbs", "step", "cluster", "G"]
        fig9 = plots / "fig9_{}.csv".format(name)
        assert csv_header(str(fig9))["spec_hash"] == report["spec_hash"]
        assert len(read_csv(str(fig9))) == 4


@pytest.mark.slow
def test_meta_init_adapts_no_slower_than_random(tmp_path, tiny_spec_path):
    code = run(["eval-adaptation", "--spec", tiny_spec_path, "--out", str(tmp_path), "--seed", "0",
                "--override", "train.progress=false", "--override", "meta.meta_iterations=100",
                "--override", "eval.max_iterations=1000", "--override", "eval.algorithms=[\"meta\", \"random\"]"])
    assert code == 0
    report = read_toml(str(tmp_path / "eval" / "seed_0" / "adaptation.toml"))
    frame = pd.DataFrame(report["tasks"])
    medians = frame.groupby("init")["iterations"].median()
    assert medians["meta"] <= medians["random"]


def test_plot_data(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path) == 0
    expected_hash = csv_header(str(tmp_path / "vdrl" / "seed_0" / "metrics.csv"))["spec_hash"]
    for figure, expected in (("fig4", "fig4_vdrl_seed0.csv"), ("fig5", "fig5_vdrl_seed0.csv"),
                             ("fig6", "fig6_vdrl_seed0.csv"), ("fig7", "fig7_vdrl.csv"), ("fig10", "fig10_vdrl.csv")):
        assert run(["plot-data", "--figure", figure, "--metrics", str(tmp_path)]) == 0
        assert csv_header(str(tmp_path / "plot_data" / expected))["spec_hash"] == expected_hash
    plots = tmp_path / "plot_data"

    fig4 = read_csv(str(plots / "fig4_vdrl_seed0.csv"))
    for _, timeline in fig4.groupby("dbs"):
        assert timeline["time"].is_monotonic_increasing
        assert timeline["cumulative_mu"].is_monotonic_increasing
    logged_g = float(csv_header(str(tmp_path / "vdrl" / "seed_0" / "events.txt"))["G"])
    assert fig4.groupby("dbs")["cumulative_mu"].max().sum() == pytest.approx(logged_g, abs=1e-9)
    assert logged_g <= 1.0 + 1e-9

    fig5 = read_csv(str(plots / "fig5_vdrl_seed0.csv"))
    assert list(fig5.columns) == ["iteration", "value_dbs0", "value_dbs1", "value_sum"]
    fig6 = read_csv(str(plots / "fig6_vdrl_seed0.csv"))
    per_step = ["value_dbs{}_step{}".format(n, k) for k in range(3) for n in range(2)]
    assert list(fig6.columns) == ["iteration"] + per_step + ["value_step0", "value_step1", "value_step2"]
    np.testing.assert_allclose(fig6["value_step0"], fig5["value_sum"], rtol=1e-12)

    fig7 = read_csv(str(plots / "fig7_vdrl.csv"))
    assert list(fig7.columns) == ["iteration", "G_median", "G_min", "G_max"]
    assert fig7["iteration"].tolist() == [0, 1, 2, 3, 4]
    fig10 = read_csv(str(plots / "fig10_vdrl.csv"))
    assert fig10["num_dbs"].tolist() == [2]
    assert fig10["runs"].tolist() == [1]


def test_plot_data_pools_spec_hashes(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path / "a") == 0
    assert _train(tiny_spec_path, tmp_path / "b", "--override", "tasks.p_active=0.7") == 0
    hashes = sorted(csv_header(str(tmp_path / d / "vdrl" / "seed_0" / "metrics.csv"))["spec_hash"] for d in "ab")
    assert emit_plot_data(str(tmp_path), "fig7")
    assert csv_header(str(tmp_path / "plot_data" / "fig7_vdrl.csv"))["spec_hash"] == ",".join(hashes)
    assert emit_plot_data(str(tmp_path), "fig10")
    fig10 = read_csv(str(tmp_path / "plot_data" / "fig10_vdrl.csv"))
    assert fig10["runs"].tolist() == [2]


def test_plot_data_on_empty_directory(tmp_path):
    assert run(["plot-data", "--figure", "fig7", "--metrics", str(tmp_path)]) == 0
    assert emit_plot_data(str(tmp_path), "fig9") == []
    assert not (tmp_path / "plot_data").exists()
    with pytest.raises(ConfigError):
        emit_plot_data(str(tmp_path / "absent"), "fig7")


def test_summarize_and_read_summaries(tmp_path, tiny_spec_path):
    assert _train(tiny_spec_path, tmp_path) == 0
    summaries = read_summaries(str(tmp_path))
    assert [s["algo"] for s in summaries] == ["vdrl"]
    table = summarize(summaries)
    assert table.loc[0, "runs"] == 1
    assert summarize([]).empty


def test_output_score_list(tmp_path, tiny_spec_path, monkeypatch, capsys):
    assert _train(tiny_spec_path, tmp_path / "runs") == 0
    from tool.output_score_list import main

    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(sys, "argv", ["output_score_list", str(tmp_path / "runs")])
    main()
    lines = (tmp_path / "score_list.csv").read_text().splitlines()
    assert lines[0].startswith("#rank")
    assert lines[1].split(", ")[1] == "vdrl"
    assert os.path.join("vdrl", "seed_0") in lines[1]


def test_algorithm_names():
    assert set(ALGORITHMS) == {"vdrl", "vdrl-unscaled", "iac", "meta", "pretrain", "oracle"}


def test_runners_cover_every_algorithm():
    assert set(RUNNERS) == set(ALGORITHMS)
    assert RUNNERS[BaselineKind.IAC.value] is RunnerTrain
    assert RUNNERS[BaselineKind.PRETRAINED_VDRL.value] is RunnerTrain
