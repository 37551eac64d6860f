"""
Static world description, request generation and the air-to-ground channel.

The channel follows the common air-to-ground model: free-space path loss plus
a Gaussian excess loss per link kind, an elevation dependent LoS probability,
and an expected Shannon rate over the LoS/NLoS mixture. Every function accepts
numpy arrays as well as scalars so that link tables for a whole realization
can be built in one pass.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.constants import speed_of_light

from .errors import ConfigError, DomainError

ORIGIN = -1


class LinkKind(enum.Enum):
    LOS = "los"
    NLOS = "nlos"


class ShadowMode(enum.Enum):
    """How the excess path loss of every link is chosen."""

    MEAN_ONLY = "mean"
    SAMPLED = "sampled"


def _as_output(x):
    x = np.asarray(x)
    if x.ndim == 0:
        return float(x)
    return x


@dataclass(frozen=True)
class RadioConfig:
    """Radio constants of the uplink.

    Parameters
    ----------
    carrier_hz : float
        Carrier frequency f_c
    tx_power_dbm : float
        User transmit power P
    noise_psd_dbm_hz : float
        Noise power spectral density N0
    rb_bandwidth_hz : float
        Bandwidth B of one resource block
    shadow_los, shadow_nlos : tuple of float
        (mean, stddev) in dB of the excess path loss per link kind
    los_phi, los_small_phi : float
        Environment constants of the LoS probability curve
    shadow_mode : ShadowMode
        Mean-only (deterministic) or one draw per link and realization
    db_exponent_divisor : int
        Divisor of the path loss exponent in the SNR expression, 20 as printed
        in the source model, 10 for the usual power convention
    """

    carrier_hz: float = 2.0e9
    tx_power_dbm: float = 20.0
    noise_psd_dbm_hz: float = -170.0
    rb_bandwidth_hz: float = 1.0e6
    shadow_los: Tuple[float, float] = (1.6, 8.41)
    shadow_nlos: Tuple[float, float] = (23.0, 33.78)
    los_phi: float = 9.61
    los_small_phi: float = 0.16
    shadow_mode: ShadowMode = ShadowMode.MEAN_ONLY
    db_exponent_divisor: int = 20

    def __post_init__(self):
        for name in ("carrier_hz", "rb_bandwidth_hz", "los_phi", "los_small_phi"):
            if not getattr(self, name) > 0:
                raise ConfigError("radio.{} must be positive".format(name))
        for name in ("shadow_los", "shadow_nlos"):
            pair = getattr(self, name)
            if len(pair) != 2 or not pair[1] > 0:
                raise ConfigError("radio.{} must be (mean, stddev) with stddev > 0".format(name))
        if self.db_exponent_divisor not in (10, 20):
            raise ConfigError("radio.db_exponent_divisor must be 10 or 20")
        if not isinstance(self.shadow_mode, ShadowMode):
            raise ConfigError("radio.shadow_mode must be a ShadowMode")

    def shadow_mean(self, kind):
        return self.shadow_los[0] if kind is LinkKind.LOS else self.shadow_nlos[0]


@dataclass(frozen=True)
class ClusterSpec:
    id: int
    center: Tuple[float, float]
    members: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class WorldConfig:
    """Geometry, fleet constraints and radio constants of one scenario.

    Parameters
    ----------
    clusters : tuple of ClusterSpec
        Clusters, ``clusters[c].id == c``
    origin : tuple of float
        Planar position of the depot O in meters
    num_dbs : int
        Fleet size N
    altitudes : tuple of float
        Constant flight altitude of every DBS, pairwise distinct
    speed : float
        Flight speed V_s in m/s
    period : float
        Mission duration T in seconds
    max_steps : int
        Trajectory length K
    service_radius : float
        Service radius d_r in meters
    radio : RadioConfig
        Channel constants
    user_positions : ndarray
        (U, 2) planar user positions in meters
    """

    clusters: Tuple[ClusterSpec, ...]
    origin: Tuple[float, float]
    num_dbs: int
    altitudes: Tuple[float, ...]
    speed: float
    period: float
    max_steps: int
    service_radius: float
    radio: RadioConfig
    user_positions: np.ndarray
    users_cluster: np.ndarray = field(init=False, repr=False)
    _centers: np.ndarray = field(init=False, repr=False)
    _legs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_dbs < 1:
            raise ConfigError("world.num_dbs must be at least 1")
        if len(self.altitudes) != self.num_dbs:
            raise ConfigError("world.altitudes needs one entry per DBS ({} given, num_dbs = {})".format(
                len(self.altitudes), self.num_dbs))
        if len(set(self.altitudes)) != len(self.altitudes):
            raise ConfigError("world.altitudes must be pairwise distinct")
        if any(not h > 0 for h in self.altitudes):
            raise ConfigError("world.altitudes must be positive")
        if self.max_steps < 1:
            raise ConfigError("world.max_steps must be at least 1")
        for name in ("period", "speed", "service_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError("world.{} must be positive".format(name))
        if len(self.clusters) < 1:
            raise ConfigError("world needs at least one cluster")
        positions = np.asarray(self.user_positions, dtype=np.float64).reshape(-1, 2)
        positions.setflags(write=False)
        object.__setattr__(self, "user_positions", positions)

        num_users = positions.shape[0]
        owner = np.full(num_users, -1, dtype=np.int64)
        for c, cluster in enumerate(self.clusters):
            if cluster.id != c:
                raise ConfigError("cluster ids must be 0..C-1 in order (got {} at {})".format(cluster.id, c))
            for u in cluster.members:
                if not 0 <= u < num_users:
                    raise ConfigError("cluster {} lists unknown user {}".format(c, u))
                if owner[u] >= 0:
                    raise ConfigError("user {} belongs to clusters {} and {}".format(u, owner[u], c))
                owner[u] = c
        if np.any(owner < 0):
            raise ConfigError("users {} belong to no cluster".format(np.flatnonzero(owner < 0).tolist()))
        owner.setflags(write=False)
        object.__setattr__(self, "users_cluster", owner)
        centers = np.array([c.center for c in self.clusters], dtype=np.float64)
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)
        # row/column C is the Origin, so ORIGIN = -1 indexes it directly
        points = np.vstack([centers, np.asarray(self.origin, dtype=np.float64).reshape(1, 2)])
        gaps = points[:, None, :] - points[None, :, :]
        legs = np.hypot(gaps[..., 0], gaps[..., 1]) / self.speed
        legs.setflags(write=False)
        object.__setattr__(self, "_legs", legs)

    @property
    def num_clusters(self):
        return len(self.clusters)

    @property
    def num_users(self):
        return self.user_positions.shape[0]

    @property
    def num_actions(self):
        """Clusters plus the Origin."""
        return self.num_clusters + 1

    def location_xy(self, location):
        if location == ORIGIN:
            return np.asarray(self.origin, dtype=np.float64)
        return self._centers[location]

    def distance(self, a, b):
        """Planar distance between two locations (cluster index or ORIGIN)."""
        return float(np.hypot(*(self.location_xy(a) - self.location_xy(b))))

    def travel_time(self, a, b):
        return float(self._legs[a, b])

    def enumeration_size(self):
        """Size (C+1)^(N K) of the unconstrained joint trajectory space."""
        return self.num_actions ** (self.num_dbs * self.max_steps)


@dataclass(frozen=True)
class TaskDistribution:
    """Concrete request distribution p(Z).

    Every user is active independently with probability ``p_active`` (times an
    optional hotspot weight of its cluster, clipped at 1); active users draw
    b_u ~ U[bits_min, bits_max] and t_u ~ U[0, t_max].
    """

    p_active: float = 0.8
    bits_min: float = 5.0e7
    bits_max: float = 2.0e8
    t_max: Optional[float] = None
    hotspot_weights: Optional[Tuple[float, ...]] = None

    def validate(self, world):
        if not 0.0 <= self.p_active <= 1.0:
            raise ConfigError("tasks.p_active must lie in [0, 1]")
        if not 0.0 < self.bits_min <= self.bits_max:
            raise ConfigError("tasks needs 0 < bits_min <= bits_max")
        t_max = self.horizon(world)
        if not 0.0 <= t_max <= world.period:
            raise ConfigError("tasks.t_max must lie in [0, T = {}]".format(world.period))
        if self.hotspot_weights is not None:
            if len(self.hotspot_weights) != world.num_clusters:
                raise ConfigError("tasks.hotspot_weights needs one weight per cluster")
            if any(w < 0 for w in self.hotspot_weights):
                raise ConfigError("tasks.hotspot_weights must be nonnegative")

    def horizon(self, world):
        return world.period if self.t_max is None else self.t_max


@dataclass(frozen=True, eq=False)
class RequestRealization:
    """One draw z = [b, t] of demands and activation times.

    ``shadow_los_db`` / ``shadow_nlos_db`` hold the (U, N) excess losses in
    sampled shadowing mode and are None in mean-only mode.
    """

    bits: np.ndarray
    activate_at: np.ndarray
    shadow_los_db: Optional[np.ndarray] = None
    shadow_nlos_db: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("bits", "activate_at", "shadow_los_db", "shadow_nlos_db"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=np.float64)
                value.setflags(write=False)
                object.__setattr__(self, name, value)
        if self.bits.shape != self.activate_at.shape:
            raise ConfigError("bits and activate_at must have one entry per user")
        if np.any(self.bits < 0):
            raise ConfigError("demands must be nonnegative")

    @property
    def active(self):
        return self.bits > 0

    @property
    def num_active(self):
        return int(np.count_nonzero(self.active))

    def check(self, world):
        if self.bits.shape != (world.num_users,):
            raise ConfigError("realization has {} users, world has {}".format(self.bits.shape[0], world.num_users))
        t = self.activate_at[self.active]
        if np.any(t < 0) or np.any(t > world.period):
            raise ConfigError("activation times must lie in [0, T]")


@dataclass(frozen=True)
class LinkBudget:
    path_loss_los_db: float
    path_loss_nlos_db: float
    p_los: float
    p_nlos: float
    rate_bps: float
    elevation_deg: float
    distance_m: float


def path_loss(distance_m, kind, radio, shadow_db=None):
    """Air-to-ground path loss in dB.

    Parameters
    ----------
    distance_m : float or ndarray
        Link distance, strictly positive
    kind : LinkKind
        LoS or NLoS; selects the default excess loss
    radio : RadioConfig
        Carrier frequency and shadowing parameters
    shadow_db : float or ndarray, optional
        Excess loss; the mean of the matching Gaussian when omitted

    Returns
    -------
    float or ndarray
        20 log10(4 pi f_c d / c) + shadow
    """
    d = np.asarray(distance_m, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DomainError("path loss needs a positive distance, got {}".format(distance_m))
    if shadow_db is None:
        shadow_db = radio.shadow_mean(kind)
    free_space = 20.0 * np.log10(4.0 * math.pi * radio.carrier_hz * d / speed_of_light)
    return _as_output(free_space + shadow_db)


def los_probability(elevation_deg, radio):
    """Probability of a LoS link at the given elevation (degrees in (0, 90])."""
    theta = np.asarray(elevation_deg, dtype=np.float64)
    if np.any(~((theta > 0) & (theta <= 90))):
        raise DomainError("elevation must lie in (0, 90] degrees, got {}".format(elevation_deg))
    phi, small_phi = radio.los_phi, radio.los_small_phi
    return _as_output(1.0 / (1.0 + phi * np.exp(-small_phi * theta + phi * small_phi)))


def snr(path_loss_db, radio):
    """Linear SNR P / (N0 B 10^(h / divisor)) for a path loss in dB."""
    p_mw = 10.0 ** (radio.tx_power_dbm / 10.0)
    n0_mw_hz = 10.0 ** (radio.noise_psd_dbm_hz / 10.0)
    h = np.asarray(path_loss_db, dtype=np.float64)
    return _as_output(p_mw / (n0_mw_hz * radio.rb_bandwidth_hz * 10.0 ** (h / radio.db_exponent_divisor)))


def elevation_deg(horizontal_m, altitude_m):
    r = np.asarray(horizontal_m, dtype=np.float64)
    angle = np.degrees(np.arctan2(altitude_m, r))
    return _as_output(np.where(r == 0.0, 90.0, angle))


def _link_terms(horizontal_m, altitude_m, radio, shadow_los_db=None, shadow_nlos_db=None):
    """LinkBudget fields for horizontal offsets of any shape at one altitude."""
    distance = np.hypot(horizontal_m, altitude_m)
    elevation = elevation_deg(horizontal_m, altitude_m)
    h_los = path_loss(distance, LinkKind.LOS, radio, shadow_los_db)
    h_nlos = path_loss(distance, LinkKind.NLOS, radio, shadow_nlos_db)
    p_los = los_probability(elevation, radio)
    p_nlos = 1.0 - np.asarray(p_los)
    rate = radio.rb_bandwidth_hz * (p_los * np.log2(1.0 + np.asarray(snr(h_los, radio))) +
                                    p_nlos * np.log2(1.0 + np.asarray(snr(h_nlos, radio))))
    return h_los, h_nlos, p_los, _as_output(p_nlos), _as_output(rate), elevation, _as_output(distance)


def link_budget(user_pos, cluster_center, altitude_m, radio, shadow_los_db=None, shadow_nlos_db=None):
    """Expected rate of the link between a user and a DBS hovering over its cluster.

    Parameters
    ----------
    user_pos, cluster_center : array_like
        Planar positions in meters
    altitude_m : float
        Altitude H_n of the serving DBS
    radio : RadioConfig
        Channel constants
    shadow_los_db, shadow_nlos_db : float, optional
        Sampled excess losses; means are used when omitted

    Returns
    -------
    LinkBudget
    """
    offset = np.asarray(user_pos, dtype=np.float64) - np.asarray(cluster_center, dtype=np.float64)
    horizontal = float(np.hypot(offset[0], offset[1]))
    return LinkBudget(*_link_terms(horizontal, altitude_m, radio, shadow_los_db, shadow_nlos_db))


def transmission_delay(bits, rate_bps):
    """Upload time b_u / c_{u,n} in seconds."""
    rate = np.asarray(rate_bps, dtype=np.float64)
    if np.any(~(rate > 0)):
        raise DomainError("transmission delay needs a positive rate, got {}".format(rate_bps))
    return _as_output(np.asarray(bits, dtype=np.float64) / rate)


def hover_time(delays, speed, service_radius):
    """Circular-flight time needed on top of the straight pass through the service area.

    Returns 0 for an empty set of served users.
    """
    delays = np.asarray(delays, dtype=np.float64).ravel()
    if delays.size == 0:
        return 0.0
    return max(0.0, float(delays.max()) - 2.0 * service_radius / speed)


def sample_realization(dist, world, rng):
    """Draw one realization z from p(Z).

    Parameters
    ----------
    dist : TaskDistribution
        Request distribution
    world : WorldConfig
        Scenario, used for user count, clusters and the shadowing mode
    rng : numpy.random.Generator
        Random stream, consumed in a fixed order

    Returns
    -------
    RequestRealization
    """
    dist.validate(world)
    num_users = world.num_users
    p_user = np.full(num_users, dist.p_active)
    if dist.hotspot_weights is not None:
        weights = np.asarray(dist.hotspot_weights, dtype=np.float64)
        p_user = np.minimum(1.0, p_user * weights[world.users_cluster])
    u = rng.random(num_users)
    bits_draw = rng.uniform(dist.bits_min, dist.bits_max, num_users)
    t_draw = rng.uniform(0.0, dist.horizon(world), num_users)
    active = u < p_user
    shadow_los = shadow_nlos = None
    if world.radio.shadow_mode is ShadowMode.SAMPLED:
        shape = (num_users, world.num_dbs)
        shadow_los = rng.normal(world.radio.shadow_los[0], world.radio.shadow_los[1], shape)
        shadow_nlos = rng.normal(world.radio.shadow_nlos[0], world.radio.shadow_nlos[1], shape)
    return RequestRealization(
        bits=np.where(active, bits_draw, 0.0),
        activate_at=np.where(active, t_draw, 0.0),
        shadow_los_db=shadow_los,
        shadow_nlos_db=shadow_nlos,
    )


@dataclass(frozen=True, eq=False)
class LinkTable:
    """Per-(user, DBS) rates and upload delays for one realization."""

    rate_bps: np.ndarray
    delay_s: np.ndarray


def link_table(world, z):
    """Tabulate the link budget of every user towards every DBS.

    The DBS is taken to hover over the user's cluster center at its own altitude.
    """
    z.check(world)
    radio = world.radio
    centers = np.array([c.center for c in world.clusters], dtype=np.float64)
    offset = world.user_positions - centers[world.users_cluster]
    horizontal = np.hypot(offset[:, 0], offset[:, 1])
    rates = np.empty((world.num_users, world.num_dbs))
    for n, altitude in enumerate(world.altitudes):
        los_shadow = None if z.shadow_los_db is None else z.shadow_los_db[:, n]
        nlos_shadow = None if z.shadow_nlos_db is None else z.shadow_nlos_db[:, n]
        rates[:, n] = _link_terms(horizontal, altitude, radio, los_shadow, nlos_shadow)[4]
    delays = transmission_delay(z.bits[:, None] * np.ones((1, world.num_dbs)), rates)
    return LinkTable(rate_bps=rates, delay_s=np.asarray(delays).reshape(world.num_users, world.num_dbs))


def scatter_users(centers, counts, radius, rng):
    """Place users uniformly inside the service disk of every cluster.

    Returns
    -------
    tuple
        (positions (U, 2) ndarray, list of member tuples per cluster)
    """
    positions = []
    members = []
    start = 0
    for center, count in zip(centers, counts):
        r = radius * np.sqrt(rng.random(count))
        angle = 2.0 * math.pi * rng.random(count)
        positions.append(np.column_stack([center[0] + r * np.cos(angle), center[1] + r * np.sin(angle)]))
        members.append(tuple(range(start, start + count)))
        start += count
    return np.vstack(positions) if positions else np.zeros((0, 2)), members
