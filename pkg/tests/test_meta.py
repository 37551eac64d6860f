import math

import numpy as np
import pytest

from dbsmeta.approx import ParamSet, ParamVector, finite_diff_check, mlp_shape
from dbsmeta.errors import ConfigError
from dbsmeta.meta import (
    GradientMode,
    MetaConfig,
    _exact_gradient,
    _first_order_gradient,
    eval_adaptation,
    held_out_tasks,
    inner_adapt,
    meta_losses,
    meta_step,
    meta_task_stream,
    meta_train,
    pipeline_losses,
    task_gradient,
)
from dbsmeta.vdrl import StepSchedule, TrainConfig, greedy_trajectory, train
from dbsmeta.world import ORIGIN, TaskDistribution, sample_realization

from .conftest import make_world


@pytest.fixture
def toy():
    """One DBS, one cluster, linear networks with 8 policy and 4 value parameters."""
    world = make_world([(300.0, 0.0)], 5, num_dbs=1, period=100.0, max_steps=2)
    z = sample_realization(TaskDistribution(p_active=1.0, t_max=50.0), world, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    init = ParamSet((ParamVector.init(mlp_shape(3, (), 2), rng),), (ParamVector.init(mlp_shape(3, (), 1), rng),))
    return world, z, init


def _episodes(world, z, init, cfg, seed):
    rng = np.random.default_rng(seed)
    adapted, inner = inner_adapt(init, z, rng, world, cfg)
    losses, evaluation = meta_losses(adapted, z, rng, world, cfg)
    return adapted, inner, evaluation, losses


def test_pipeline_reproduces_sampled_losses(toy):
    world, z, init = toy
    cfg = MetaConfig(inner_value_step=0.1, inner_policy_step=0.2)
    _, inner, evaluation, losses = _episodes(world, z, init, cfg, 3)
    l_c, l_a = pipeline_losses(init, inner, evaluation, cfg)
    assert l_c == pytest.approx(math.fsum(losses[:, 0]), rel=1e-12, abs=1e-14)
    assert l_a == pytest.approx(math.fsum(losses[:, 1]), rel=1e-12, abs=1e-14)


def test_exact_meta_gradient_matches_finite_differences(toy):
    world, z, init = toy
    cfg = MetaConfig(inner_value_step=0.1, inner_policy_step=0.2, mode=GradientMode.EXACT)
    for seed in range(5):
        _, inner, evaluation, _ = _episodes(world, z, init, cfg, seed)
        grad_c, grad_a = _exact_gradient(init, inner, evaluation, cfg)

        def value_loss(theta):
            params = ParamSet(init.policy, (init.value[0].replace(theta),))
            return pipeline_losses(params, inner, evaluation, cfg)[0]

        def policy_loss(theta):
            params = ParamSet((init.policy[0].replace(theta),), init.value)
            return pipeline_losses(params, inner, evaluation, cfg)[1]

        assert finite_diff_check(value_loss, init.value[0], grad_c[0]) < 1e-4
        if np.any(grad_a[0]):
            assert finite_diff_check(policy_loss, init.policy[0], grad_a[0]) < 1e-4


def test_first_order_equals_exact_without_inner_step(toy):
    world, z, init = toy
    cfg = MetaConfig(inner_value_step=0.0, inner_policy_step=0.0)
    adapted, inner, evaluation, _ = _episodes(world, z, init, cfg, 2)
    first_c, first_a = _first_order_gradient(adapted, evaluation, cfg)
    exact_c, exact_a = _exact_gradient(init, inner, evaluation, cfg)
    np.testing.assert_allclose(first_c[0], exact_c[0], rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(first_a[0], exact_a[0], rtol=1e-8, atol=1e-12)


def test_surrogate_sign_flips_policy_gradient(toy):
    world, z, init = toy
    plus = task_gradient(init, z, np.random.default_rng(4), world, MetaConfig())
    minus = task_gradient(init, z, np.random.default_rng(4), world, MetaConfig(surrogate_sign=-1.0))
    np.testing.assert_allclose(plus[0][0], minus[0][0])
    np.testing.assert_allclose(plus[1][0], -minus[1][0])
    assert plus[3] == pytest.approx(-minus[3])


def test_task_streams(tiny_world, tiny_tasks):
    a = meta_task_stream(tiny_world, tiny_tasks, 0, 3, 2)
    b = meta_task_stream(tiny_world, tiny_tasks, 0, 3, 2)
    assert [len(batch) for batch in a] == [2, 2, 2]
    np.testing.assert_array_equal(a[2][1].bits, b[2][1].bits)
    held = held_out_tasks(tiny_world, tiny_tasks, 0, 2)
    assert not np.array_equal(held[0].bits, a[0][0].bits)


def test_meta_step_thread_pool_is_ordered(tiny_world, tiny_tasks):
    init = ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(4,))
    tasks = meta_task_stream(tiny_world, tiny_tasks, 0, 1, 3)[0]
    serial = meta_step(init, tasks, tiny_world, MetaConfig(workers=1), np.random.default_rng(5))
    pooled = meta_step(init, tasks, tiny_world, MetaConfig(workers=3), np.random.default_rng(5))
    for a, b in zip(serial[0].policy + serial[0].value, pooled[0].policy + pooled[0].value):
        np.testing.assert_array_equal(a.values, b.values)
    assert serial[1:] == pooled[1:]


def test_meta_train_history(tiny_world, tiny_tasks):
    init = ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(4,))
    cfg = MetaConfig(meta_iterations=3, tasks_per_iteration=2)
    result = meta_train(tiny_world, tiny_tasks, init, cfg, np.random.default_rng(0))
    frame = result.history_frame()
    assert list(frame.columns) == ["meta_iteration", "L_c", "L_a"]
    assert frame["meta_iteration"].tolist() == [0, 1, 2]
    assert np.all(frame["L_c"] >= 0.0)
    assert not np.array_equal(result.params.value[0].values, init.value[0].values)


def test_exact_mode_meta_step(toy):
    world, _, init = toy
    dist = TaskDistribution(p_active=1.0, t_max=50.0)
    cfg = MetaConfig(meta_iterations=2, tasks_per_iteration=2, mode=GradientMode.EXACT)
    result = meta_train(world, dist, init, cfg, np.random.default_rng(0))
    assert len(result.history) == 2


@pytest.mark.parametrize("kwargs", [{"surrogate_sign": 0.5}, {"tasks_per_iteration": 0}, {"meta_step": 0.0}])
def test_meta_config_validation(kwargs):
    with pytest.raises(ConfigError):
        MetaConfig(**kwargs)


def test_eval_adaptation_rows(tiny_world, tiny_tasks):
    rng = np.random.default_rng(0)
    inits = {name: ParamSet.init(tiny_world, rng, hidden=(4,)) for name in ("random", "other")}
    rows, curves, snapshots = eval_adaptation(tiny_world, tiny_tasks, inits, TrainConfig(max_iterations=8), seed=0,
                                              num_tasks=1, window=3)
    assert [r["init"] for r in rows] == ["random", "other"]
    assert all(r["oracle"] for r in rows)
    assert all(0 <= r["iterations"] <= 8 for r in rows)
    assert len(curves) == 16
    assert snapshots == []


def test_eval_adaptation_falls_back_above_cap(tiny_world, tiny_tasks):
    inits = {"random": ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(4,))}
    rows, curves, _ = eval_adaptation(tiny_world, tiny_tasks, inits, TrainConfig(max_iterations=5), seed=0, num_tasks=1,
                                      window=2, oracle_cap=10)
    assert not rows[0]["oracle"]
    assert rows[0]["reference_G"] == pytest.approx(max(c["G"] for c in curves))


def test_eval_adaptation_snapshots(tiny_world, tiny_tasks):
    inits = {"random": ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(4,))}
    cfg = TrainConfig(max_iterations=6)
    rows, curves, snapshots = eval_adaptation(tiny_world, tiny_tasks, inits, cfg, seed=0, num_tasks=2, window=2,
                                              snapshot_iterations=[0, 4, 50])
    plain, plain_curves, _ = eval_adaptation(tiny_world, tiny_tasks, inits, cfg, seed=0, num_tasks=2, window=2)
    # snapshots do not disturb the adaptation runs
    assert rows == plain
    assert curves == plain_curves
    per_snapshot = tiny_world.num_dbs * tiny_world.max_steps
    assert len(snapshots) == 2 * 2 * per_snapshot
    assert sorted({s["iteration"] for s in snapshots}) == [0, 4]
    first = [s for s in snapshots if s["task"] == 0 and s["iteration"] == 0]
    traj, outcome = greedy_trajectory(tiny_world, held_out_tasks(tiny_world, tiny_tasks, 0, 1)[0], inits["random"])
    assert [s["cluster"] for s in first] == ["O" if loc == ORIGIN else str(loc) for row in traj for loc in row]
    assert all(s["G"] == outcome.utility for s in first)


class _FixedSeeds:
    """Stands in for a Generator that hands every task the same child seed."""

    def integers(self, low, high, size):
        return np.full(size, 7)


def _delta(before, after):
    return [b.values - a.values for b, a in zip(before.policy + before.value, after.policy + after.value)]


def test_inner_adapt_is_one_training_iteration(tiny_world, tiny_z):
    init = ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(6,))
    cfg = MetaConfig(inner_value_step=0.05, inner_policy_step=0.1)
    adapted, _ = inner_adapt(init, tiny_z, np.random.default_rng(11), tiny_world, cfg)
    train_cfg = TrainConfig(max_iterations=1, value_schedule=StepSchedule(0.05), policy_schedule=StepSchedule(0.1))
    trained = train(tiny_world, tiny_z, init, train_cfg, np.random.default_rng(11)).params
    for a, b in zip(adapted.policy + adapted.value, trained.policy + trained.value):
        np.testing.assert_array_equal(a.values, b.values)


def test_meta_step_is_linear_in_repeated_tasks(tiny_world, tiny_z):
    init = ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(4,))
    cfg = MetaConfig(meta_step=0.01)
    single, l_c, l_a = meta_step(init, [tiny_z], tiny_world, cfg, _FixedSeeds())
    repeated, l_c4, l_a4 = meta_step(init, [tiny_z] * 4, tiny_world, cfg, _FixedSeeds())
    for one, four in zip(_delta(init, single), _delta(init, repeated)):
        np.testing.assert_allclose(four, 4.0 * one, rtol=1e-9, atol=1e-13)
    assert l_c4 == pytest.approx(4.0 * l_c, rel=1e-12)
    assert l_a4 == pytest.approx(4.0 * l_a, rel=1e-12, abs=1e-15)


@pytest.mark.slow
def test_meta_value_loss_trends_down(tiny_world, tiny_tasks):
    init = ParamSet.init(tiny_world, np.random.default_rng(0), hidden=(8,))
    cfg = MetaConfig(meta_iterations=200, tasks_per_iteration=4, inner_value_step=0.05, inner_policy_step=0.1,
                     meta_step=0.01)
    frame = meta_train(tiny_world, tiny_tasks, init, cfg, np.random.default_rng(0)).history_frame()
    assert frame["L_c"].tail(40).mean() < frame["L_c"].head(40).mean()
