"""
Event-driven episode simulation.

Every DBS follows its own list of stops. Arrivals of all DBSs are processed
in global time order (ties broken by DBS index). At each arrival the DBS serves
the active users of the cluster whose activation time falls in its window:
``[0, a]`` for the first DBS to arrive, ``(a_prev, a]`` afterwards, where
``a_prev`` is the previous arrival time at that cluster.
"""

import heapq
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from tqdm import tqdm

from .approx import action_slot, encode_state, forward_policy, slot_location
from .errors import ContractError, OracleCapExceeded
from .world import ORIGIN, hover_time, link_table

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1.0e-9
SIMULTANEOUS_TOL = 1.0e-9
DEFAULT_ORACLE_CAP = 10 ** 7
EVENT_LOG_VERSION = 1


@dataclass(frozen=True)
class DbsState:
    """Decision state s_{n,k} = [location, remaining time] at step k."""

    location: int
    remaining_time_s: float
    step_index: int


@dataclass(frozen=True)
class Event:
    time: float
    dbs: int
    step: int
    location: int
    served: int
    mu: float
    hover: float


@dataclass(frozen=True, eq=False)
class EpisodeOutcome:
    """Result of one episode.

    Attributes
    ----------
    mu : ndarray
        (N, K) per-stop service rates
    tau : ndarray
        (N, K) remaining time upon arrival at every stop
    hover : ndarray
        (N, K) hover time spent at every stop
    served : tuple
        ``served[n][k]`` is the sorted tuple of users served at that stop
    rewards : ndarray
        (K,) team stage rewards
    utility : float
        Team utility G
    events : tuple of Event
        Arrival log in processing order
    trajectory : tuple of tuple of int
        Executed joint trajectory, padded with ORIGIN
    states : tuple
        ``states[n]`` holds the K+1 decision states of DBS n
    masks : ndarray
        (N, K, C+1) feasible action slots at every decision
    num_active : int
        Number of users active over the episode
    """

    mu: np.ndarray
    tau: np.ndarray
    hover: np.ndarray
    served: Tuple[Tuple[Tuple[int, ...], ...], ...]
    rewards: np.ndarray
    utility: float
    events: Tuple[Event, ...]
    trajectory: Tuple[Tuple[int, ...], ...]
    states: Tuple[Tuple[DbsState, ...], ...]
    masks: np.ndarray
    num_active: int


@dataclass(frozen=True, eq=False)
class Experience:
    """Experience e_n of one DBS.

    ``states`` holds K+1 entries, the last one is the terminal state after the
    K-th decision. ``actions`` are action slots (C for the Origin).
    ``rewards`` is the team stage reward, ``own_rewards`` the DBS's own mu.
    ``features`` holds the K+1 state encodings fed to the networks.
    """

    states: Tuple[DbsState, ...]
    actions: Tuple[int, ...]
    rewards: np.ndarray
    own_rewards: np.ndarray
    masks: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.actions)


def action_mask(state, world):
    """Boolean mask over the C+1 action slots; slot C (the Origin) is always set."""
    mask = np.zeros(world.num_actions, dtype=bool)
    mask[world.num_clusters] = True
    if state.location == ORIGIN and state.step_index > 0:
        return mask
    if state.step_index >= world.max_steps:
        return mask
    for c in range(world.num_clusters):
        need = world.travel_time(state.location, c) + world.travel_time(c, ORIGIN)
        mask[c] = need <= state.remaining_time_s + FEASIBILITY_TOL
    return mask


def feasible_actions(state, world):
    """Feasible next locations, clusters in index order followed by ORIGIN."""
    mask = action_mask(state, world)
    return tuple(slot_location(s, world.num_clusters) for s in np.flatnonzero(mask))


def normalize_trajectory(traj, world):
    """Validate shape and entries of a joint trajectory and pad it with ORIGIN to length K."""
    if len(traj) != world.num_dbs:
        raise ContractError("trajectory has {} rows for {} DBSs".format(len(traj), world.num_dbs))
    rows = []
    for n, row in enumerate(traj):
        row = [int(x) for x in row]
        if len(row) > world.max_steps:
            raise ContractError("trajectory of DBS {} has {} entries, K = {}".format(n, len(row), world.max_steps))
        for k, loc in enumerate(row):
            if loc != ORIGIN and not 0 <= loc < world.num_clusters:
                raise ContractError("trajectory entry ({}, {}) names unknown location {}".format(n, k, loc))
        rows.append(tuple(row + [ORIGIN] * (world.max_steps - len(row))))
    return tuple(rows)


class _Engine:
    """One episode under a decision rule ``chooser(n, state, mask) -> location``."""

    def __init__(self, world, z, chooser, table):
        self.world = world
        self.chooser = chooser
        self.table = link_table(world, z) if table is None else table
        n_dbs, steps = world.num_dbs, world.max_steps
        self.period = world.period
        self.pass_time = 2.0 * world.service_radius / world.speed
        active = z.active
        self.activate_at = z.activate_at
        self.num_active = int(np.count_nonzero(active))
        self.cluster_users = [np.array([u for u in c.members if active[u]], dtype=np.int64) for c in world.clusters]
        self.mu = np.zeros((n_dbs, steps))
        self.tau = np.zeros((n_dbs, steps))
        self.hover = np.zeros((n_dbs, steps))
        self.served = [[() for _ in range(steps)] for _ in range(n_dbs)]
        self.trajectory = [[ORIGIN] * steps for _ in range(n_dbs)]
        self.states = [[None] * (steps + 1) for _ in range(n_dbs)]
        self.masks = np.zeros((n_dbs, steps, world.num_actions), dtype=bool)
        self.events = []
        self.last_arrival = {}
        self.heap = []

    def decide(self, n, state):
        k = state.step_index
        self.states[n][k] = state
        if k >= self.world.max_steps:
            return None
        mask = action_mask(state, self.world)
        self.masks[n, k] = mask
        location = self.chooser(n, state, mask)
        self.trajectory[n][k] = location
        return location

    def settle(self, n, k_start, remaining):
        # Origin is absorbing: the rest of the trajectory stays there
        for k in range(k_start, self.world.max_steps + 1):
            self.decide(n, DbsState(ORIGIN, remaining, k))
            if k < self.world.max_steps:
                self.tau[n, k] = remaining

    def dispatch(self, n, here, time, k, target):
        if target == ORIGIN and here == ORIGIN:
            self.tau[n, k] = self.period - time
            self.settle(n, k + 1, self.period - time)
            return
        arrival = time + self.world.travel_time(here, target)
        heapq.heappush(self.heap, (arrival, n, k, target))

    def serve(self, n, cluster, time, remaining):
        """Serve the arrival window of ``cluster`` within the energy left for hovering.

        Users whose upload would outlast the slack are dropped, yet the window
        still closes at this arrival. A DBS with too little slack or a slow link
        therefore discards requests that a later DBS could have served, and an
        extra DBS in the fleet can lower G.
        """
        users = self.cluster_users[cluster]
        prev = self.last_arrival.get(cluster)
        self.last_arrival[cluster] = time
        if users.size == 0 or (prev is not None and abs(time - prev) <= SIMULTANEOUS_TOL):
            return (), 0.0
        t = self.activate_at[users]
        in_window = t <= time if prev is None else (t > prev) & (t <= time)
        window = users[in_window]
        delays = self.table.delay_s[window, n]
        slack = remaining - self.world.travel_time(cluster, ORIGIN)
        keep = delays - self.pass_time <= slack + FEASIBILITY_TOL
        served = window[keep]
        return tuple(int(u) for u in np.sort(served)), hover_time(delays[keep], self.world.speed,
                                                                  self.world.service_radius)

    def run(self):
        world = self.world
        steps = world.max_steps
        for n in range(world.num_dbs):
            first = self.decide(n, DbsState(ORIGIN, self.period, 0))
            self.dispatch(n, ORIGIN, 0.0, 0, first)
        while self.heap:
            time, n, k, location = heapq.heappop(self.heap)
            remaining = max(0.0, self.period - time)
            if location == ORIGIN:
                self.events.append(Event(time, n, k, ORIGIN, 0, 0.0, 0.0))
                if k < steps:
                    self.tau[n, k] = remaining
                    self.settle(n, k + 1, remaining)
                continue
            self.tau[n, k] = remaining
            served, hover = self.serve(n, location, time, remaining)
            mu = len(served) / self.num_active if self.num_active else 0.0
            self.mu[n, k] = mu
            self.hover[n, k] = hover
            self.served[n][k] = served
            self.events.append(Event(time, n, k, location, len(served), mu, hover))
            departure = time + hover
            nxt = self.decide(n, DbsState(location, max(0.0, self.period - departure), k + 1))
            if nxt is None:
                # implicit return after the last stop
                arrival = departure + world.travel_time(location, ORIGIN)
                heapq.heappush(self.heap, (arrival, n, steps, ORIGIN))
            else:
                self.dispatch(n, location, departure, k + 1, nxt)
        rewards = np.array([math.fsum(self.mu[:, k]) for k in range(steps)])
        return EpisodeOutcome(
            mu=self.mu,
            tau=self.tau,
            hover=self.hover,
            served=tuple(tuple(row) for row in self.served),
            rewards=rewards,
            utility=math.fsum(rewards),
            events=tuple(self.events),
            trajectory=tuple(tuple(row) for row in self.trajectory),
            states=tuple(tuple(row) for row in self.states),
            masks=self.masks,
            num_active=self.num_active,
        )


def _simulate(world, z, chooser, table=None):
    return _Engine(world, z, chooser, table).run()


def run_episode(world, z, traj, table=None):
    """Execute a fixed joint trajectory.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    z : RequestRealization
        Demands and activation times
    traj : sequence of sequence of int
        Per-DBS stops (cluster index or ORIGIN), padded with ORIGIN to length K
    table : LinkTable, optional
        Precomputed link table of (world, z)

    Returns
    -------
    EpisodeOutcome

    Raises
    ------
    ContractError
        If an entry is infeasible when the trajectory is executed
    """
    traj = normalize_trajectory(traj, world)
    num_clusters = world.num_clusters

    def follow(n, state, mask):
        location = traj[n][state.step_index]
        if not mask[action_slot(location, num_clusters)]:
            raise ContractError("trajectory entry (n={}, k={}) = {} is infeasible with {:.6g} s left".format(
                n, state.step_index, "O" if location == ORIGIN else location, state.remaining_time_s))
        return location

    return _simulate(world, z, follow, table)


def team_stage_rewards(outcome):
    """r_k = sum over DBSs of mu_{n,k}."""
    return [float(r) for r in outcome.rewards]


def team_utility(outcome):
    return outcome.utility


def _experiences(outcome, world):
    experiences = []
    for n in range(world.num_dbs):
        experiences.append(Experience(
            states=outcome.states[n],
            actions=tuple(action_slot(loc, world.num_clusters) for loc in outcome.trajectory[n]),
            rewards=outcome.rewards,
            own_rewards=outcome.mu[n].copy(),
            masks=outcome.masks[n],
            features=np.array([encode_state(s, world) for s in outcome.states[n]]),
        ))
    return tuple(experiences)


def rollout(world, z, policies, rng, table=None):
    """Sample one episode from the per-DBS policies.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    z : RequestRealization
        Realization to play
    policies : sequence of ParamVector
        Policy parameters theta_{a,n}
    rng : numpy.random.Generator
        Action sampling stream
    table : LinkTable, optional
        Precomputed link table of (world, z)

    Returns
    -------
    tuple
        (tuple of Experience, EpisodeOutcome)
    """
    num_clusters = world.num_clusters

    def sample(n, state, mask):
        probs = forward_policy(policies[n], encode_state(state, world), mask)
        slot = int(rng.choice(probs.size, p=probs))
        return slot_location(slot, num_clusters)

    outcome = _simulate(world, z, sample, table)
    return _experiences(outcome, world), outcome


def greedy_rollout(world, z, policies, table=None):
    """Episode with the most probable action at every decision."""
    num_clusters = world.num_clusters

    def greedy(n, state, mask):
        probs = forward_policy(policies[n], encode_state(state, world), mask)
        return slot_location(int(np.argmax(probs)), num_clusters)

    outcome = _simulate(world, z, greedy, table)
    return _experiences(outcome, world), outcome


def canonical_sequences(world):
    """Per-DBS stop lists with Origin absorbing that pass the zero-hover feasibility check."""
    steps = world.max_steps
    found = []

    def extend(prefix, location, remaining):
        k = len(prefix)
        if k == steps:
            found.append(tuple(prefix))
            return
        for target in feasible_actions(DbsState(location, remaining, k), world):
            if target == ORIGIN:
                found.append(tuple(prefix) + (ORIGIN,) * (steps - k))
            else:
                extend(prefix + [target], target, remaining - world.travel_time(location, target))

    extend([], ORIGIN, world.period)
    return found


def enumerate_optimal(world, z, cap=DEFAULT_ORACLE_CAP, workers=1, progress=False):
    """Brute-force the best joint trajectory of one realization.

    Parameters
    ----------
    world : WorldConfig
        Scenario
    z : RequestRealization
        Realization
    cap : int, optional
        Largest admissible (C+1)^(N K)
    workers : int, optional
        Threads sharing the search, split by the first DBS's stop list
    progress : bool, optional
        Show a tqdm bar over the shards

    Returns
    -------
    tuple
        (G*, tuple of all maximizing joint trajectories in enumeration order)

    Raises
    ------
    OracleCapExceeded
        If the unconstrained trajectory space exceeds ``cap``
    """
    required = world.enumeration_size()
    if required > cap:
        raise OracleCapExceeded(required, cap)
    table = link_table(world, z)
    sequences = canonical_sequences(world)
    logger.debug("oracle: %d canonical sequences per DBS, %d DBSs", len(sequences), world.num_dbs)

    def shard(head):
        best, argmax = -1.0, []
        for tail in itertools.product(sequences, repeat=world.num_dbs - 1):
            traj = (head,) + tail
            try:
                g = run_episode(world, z, traj, table).utility
            except ContractError:
                continue
            if g > best + 1.0e-12:
                best, argmax = g, [traj]
            elif abs(g - best) <= 1.0e-12:
                argmax.append(traj)
        return best, argmax

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(shard, sequences), total=len(sequences), disable=not progress))
    else:
        results = [shard(head) for head in tqdm(sequences, disable=not progress)]

    best, argmax = -1.0, []
    for g, trajs in results:
        if g > best + 1.0e-12:
            best, argmax = g, list(trajs)
        elif abs(g - best) <= 1.0e-12:
            argmax.extend(trajs)
    return best, tuple(argmax)


def format_event_log(outcome, spec_hash=None):
    """Render the arrival log, one event per line.

    The header carries the log version, the spec hash of the producing run when
    given, and G. Header lines start with ``#`` and read back with
    ``metrics.csv_header``.
    """
    lines = ["# dbsmeta event log version {}".format(EVENT_LOG_VERSION)]
    if spec_hash is not None:
        lines.append("# spec_hash = {}".format(spec_hash))
    lines += [
        "# G = {!r}".format(outcome.utility),
        "# time dbs step cluster served mu hover",
    ]
    for ev in outcome.events:
        lines.append("{!r} {} {} {} {} {!r} {!r}".format(
            ev.time, ev.dbs, ev.step, "O" if ev.location == ORIGIN else ev.location, ev.served, ev.mu, ev.hover))
    return "\n".join(lines) + "\n"


def parse_event_log(text):
    events = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        time, dbs, step, cluster, served, mu, hover = line.split()
        events.append(Event(float(time), int(dbs), int(step), ORIGIN if cluster == "O" else int(cluster),
                            int(served), float(mu), float(hover)))
    return events


def trajectory_from_events(events, world):
    """Rebuild the joint trajectory that produced an event log."""
    traj = [[ORIGIN] * world.max_steps for _ in range(world.num_dbs)]
    for ev in events:
        if ev.step < world.max_steps:
            traj[ev.dbs][ev.step] = ev.location
    return tuple(tuple(row) for row in traj)


def service_timeline(outcome):
    """Per-DBS (time, cumulative service rate) points of an episode."""
    rows = {n: [(0.0, 0.0)] for n in range(outcome.mu.shape[0])}
    for ev in sorted(outcome.events, key=lambda e: (e.time, e.dbs)):
        rows[ev.dbs].append((ev.time, rows[ev.dbs][-1][1] + ev.mu))
    return rows