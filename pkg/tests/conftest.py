from pathlib import Path

import numpy as np
import pytest

from dbsmeta.world import (
    ClusterSpec,
    RadioConfig,
    RequestRealization,
    TaskDistribution,
    WorldConfig,
    sample_realization,
    scatter_users,
)

REPO_ROOT = Path(__file__).resolve().parent.parent
SAMPLE_DIR = REPO_ROOT / "sample"


def make_world(centers, users_per_cluster, num_dbs=2, period=150.0, max_steps=3, speed=30.0, layout_seed=0,
               radio=None, altitudes=None):
    rng = np.random.default_rng(layout_seed)
    positions, members = scatter_users(centers, [users_per_cluster] * len(centers), 50.0, rng)
    clusters = tuple(ClusterSpec(c, tuple(center), members[c]) for c, center in enumerate(centers))
    return WorldConfig(
        clusters=clusters,
        origin=(0.0, 0.0),
        num_dbs=num_dbs,
        altitudes=altitudes or tuple(100.0 + 20.0 * n for n in range(num_dbs)),
        speed=speed,
        period=period,
        max_steps=max_steps,
        service_radius=50.0,
        radio=radio or RadioConfig(),
        user_positions=positions,
    )


def make_line_world(period=100.0, max_steps=2, users=((0.0, 10.0, 15.0), ())):
    """Cluster 0 at (300, 0) and cluster 1 at (-600, 0); legs O-0 10 s, O-1 20 s, 0-1 30 s.

    All users stand at their cluster center. ``users`` gives the activation
    times per cluster; the realization is returned together with the world.
    """
    centers = [(300.0, 0.0), (-600.0, 0.0)]
    positions, clusters, times = [], [], []
    start = 0
    for c, (center, activations) in enumerate(zip(centers, users)):
        positions.extend([center] * len(activations))
        times.extend(activations)
        clusters.append(ClusterSpec(c, center, tuple(range(start, start + len(activations)))))
        start += len(activations)
    world = WorldConfig(
        clusters=tuple(clusters),
        origin=(0.0, 0.0),
        num_dbs=2,
        altitudes=(100.0, 120.0),
        speed=30.0,
        period=period,
        max_steps=max_steps,
        service_radius=50.0,
        radio=RadioConfig(),
        user_positions=np.array(positions, dtype=np.float64).reshape(-1, 2),
    )
    # 1 Mbit uploads finish well inside the straight pass, so no DBS ever hovers
    z = RequestRealization(bits=np.full(len(times), 1.0e6), activate_at=np.array(times, dtype=np.float64))
    return world, z


@pytest.fixture
def line_world():
    return make_line_world()


@pytest.fixture
def tiny_world():
    """2 DBSs, 3 clusters of 10 users, K = 3: 4096 unconstrained joint trajectories."""
    return make_world([(900.0, 0.0), (-900.0, 0.0), (0.0, 900.0)], 10)


@pytest.fixture
def tiny_tasks():
    return TaskDistribution(p_active=0.8, t_max=60.0)


@pytest.fixture
def tiny_z(tiny_world, tiny_tasks):
    return sample_realization(tiny_tasks, tiny_world, np.random.default_rng(0))


@pytest.fixture
def pair_world():
    """Two mirror-image clusters, two DBSs, one stop each."""
    return make_world([(600.0, 0.0), (-600.0, 0.0)], 5, period=100.0, max_steps=1)


@pytest.fixture
def pair_z(pair_world):
    return RequestRealization(bits=np.full(pair_world.num_users, 5.0e7), activate_at=np.zeros(pair_world.num_users))


@pytest.fixture
def tiny_spec_path():
    return str(SAMPLE_DIR / "tiny" / "params.toml")
