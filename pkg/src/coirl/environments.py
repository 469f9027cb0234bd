"""Benchmark contextual MDPs: grid world, highway driving, and a synthetic treatment model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from coirl.cmdp import ContextualMDP
from coirl.errors import InvalidArgument

# ---------------------------------------------------------------------------
# Contexts


def sample_context(rng, d, size=None):
    """Uniform draw(s) from the ``d - 1`` simplex via normalized exponentials."""
    if d < 1:
        raise InvalidArgument("d must be at least 1")
    shape = (d,) if size is None else (size, d)
    e = rng.exponential(size=shape)
    return e / e.sum(axis=-1, keepdims=True)


def with_w_star(cmdp, W, geometry=None):
    return dataclasses.replace(cmdp, w_star=np.asarray(W, dtype=float), geometry=geometry)


# ---------------------------------------------------------------------------
# Grid world

GRID_ACTIONS = ("left", "up", "right", "down")


@dataclass(frozen=True)
class GridWorldSpec:
    """``n`` columns by ``m`` rows; state index ``y * n + x``."""

    n: int = 3
    m: int = 4
    gamma: float = 0.9

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.n * self.m < 2:
            raise InvalidArgument("grid needs at least two cells")


def grid_kernel(n, m):
    """Deterministic moves with cyclic borders: ``(S, 4, S)``."""
    S = n * m
    P = np.zeros((S, 4, S))
    for y in range(m):
        for x in range(n):
            s = y * n + x
            targets = (
                y * n + (x - 1) % n,
                ((y - 1) % m) * n + x,
                y * n + (x + 1) % n,
                ((y + 1) % m) * n + x,
            )
            for a, t in enumerate(targets):
                P[s, a, t] = 1.0
    return P


def make_gridworld(spec=GridWorldSpec()):
    """One-hot features, ``d = k = n m``, uniform start, and ``W* = I``.

    Each context weights how much the agent likes each cell; dynamics do not
    depend on the context.
    """
    S = spec.n * spec.m
    P = grid_kernel(spec.n, spec.m)
    P.setflags(write=False)
    return ContextualMDP(
        base_kernels=np.broadcast_to(P, (S,) + P.shape),
        features=np.eye(S),
        xi=np.full(S, 1.0 / S),
        gamma=spec.gamma,
        w_star=np.eye(S),
        geometry="box",
        name=f"grid:{spec.n}x{spec.m}",
    )


# ---------------------------------------------------------------------------
# Highway driving

DRIVING_ELLIPSOID_W = np.array([[-1.0, 0.75, 0.75], [0.5, -1.0, 1.0], [0.75, 1.0, -0.75]])
DRIVING_ONLINE_W = np.array([[0.043, 0.0, 0.043], [0.0, 0.434, 0.0], [0.043, 0.434, 0.0]])


@dataclass(frozen=True)
class DrivingSpec:
    """Layout of the highway simulator.

    The agent's x position takes ``n_x`` values; the road covers
    ``road = [road_lo, road_hi]`` split evenly into ``n_lanes`` lanes.  Car B
    sits in one lane at one of ``n_y`` rows and approaches ``speed + 1`` rows
    per step (speed index 0, 1, 2), so a faster agent meets more cars.  It
    respawns at row 0 in a uniformly random lane after passing the last row.  A
    collision happens when car B is in the agent's lane in one of the last
    ``collision_rows`` rows.
    """

    gamma: float = 0.9
    n_x: int = 17
    n_speeds: int = 3
    n_lanes: int = 3
    n_y: int = 10
    road_lo: int = 4
    road_hi: int = 12
    start_x: int = 8
    collision_rows: int = 2
    speed_choices: tuple = (0, 2)

    def __post_init__(self):
        if (self.road_hi - self.road_lo + 1) % self.n_lanes:
            raise InvalidArgument("road width must split evenly into lanes")
        if not 0 <= self.start_x < self.n_x:
            raise InvalidArgument("start position off the grid")

    @property
    def n_states(self):
        return self.n_x * self.n_speeds * self.n_lanes * self.n_y + 1


@dataclass(frozen=True)
class DrivingEnv:
    cmdp: ContextualMDP
    presets: dict
    spec: DrivingSpec

    def driving_state(self, x, speed, lane, y):
        return driving_index(self.spec, x, speed, lane, y)


def driving_index(spec, x, speed, lane, y):
    """State index of ``(x, speed index, car-B lane, car-B row)``; index 0 is the speed-selection state."""
    return 1 + ((x * spec.n_speeds + speed) * spec.n_lanes + lane) * spec.n_y + y


def _agent_lane(spec, x):
    if x < spec.road_lo or x > spec.road_hi:
        return -1
    return (x - spec.road_lo) // ((spec.road_hi - spec.road_lo + 1) // spec.n_lanes)


def make_driving(spec=DrivingSpec()):
    """Highway simulator with features (speed, no-collision, on-road).

    State 0 chooses the speed once: action 0 picks the slowest, action 1 the
    fastest.  Afterwards the actions steer left and right.  The only
    randomness is the lane car B respawns in.
    """
    S = spec.n_states
    P = np.zeros((S, 2, S))
    phi = np.zeros((S, 3))
    phi[0] = (0.0, 0.5, 0.5)
    for a, v in enumerate(spec.speed_choices):
        for lane in range(spec.n_lanes):
            P[0, a, driving_index(spec, spec.start_x, v, lane, 0)] += 1.0 / spec.n_lanes
    for x in range(spec.n_x):
        agent_lane = _agent_lane(spec, x)
        for v in range(spec.n_speeds):
            for lane in range(spec.n_lanes):
                for y in range(spec.n_y):
                    s = driving_index(spec, x, v, lane, y)
                    crash = agent_lane == lane and y >= spec.n_y - spec.collision_rows
                    phi[s] = ((v + 1) / spec.n_speeds, 0.0 if crash else 0.5, 0.5 if agent_lane >= 0 else 0.0)
                    for a, dx in enumerate((-1, 1)):
                        x2 = min(max(x + dx, 0), spec.n_x - 1)
                        if y + v + 1 < spec.n_y:
                            P[s, a, driving_index(spec, x2, v, lane, y + v + 1)] = 1.0
                        else:
                            for lane2 in range(spec.n_lanes):
                                P[s, a, driving_index(spec, x2, v, lane2, 0)] += 1.0 / spec.n_lanes
    P.setflags(write=False)
    xi = np.zeros(S)
    xi[0] = 1.0
    cmdp = ContextualMDP(
        base_kernels=np.broadcast_to(P, (3,) + P.shape),
        features=phi,
        xi=xi,
        gamma=spec.gamma,
        w_star=DRIVING_ELLIPSOID_W / np.abs(DRIVING_ELLIPSOID_W).max(),
        geometry="box",
        name="driving",
    )
    presets = {
        "ellipsoid": DRIVING_ELLIPSOID_W / np.abs(DRIVING_ELLIPSOID_W).max(),
        "online": DRIVING_ONLINE_W.copy(),
    }
    return DrivingEnv(cmdp, presets, spec)


# ---------------------------------------------------------------------------
# Synthetic treatment-like CMDP


@dataclass(frozen=True)
class SyntheticCMDPSpec:
    """Random sparse CMDP with absorbing outcome states.

    The last ``terminal_count`` states are absorbing.  The first two carry a
    bad and a good outcome marker in the last feature (-0.5 and +0.5, other
    features 0); a third, if present, has every feature at -1.  Each
    ``(kernel, state, action)`` row is a Dirichlet draw over ``branching``
    random successors.
    """

    n_states: int = 30
    n_actions: int = 4
    d: int = 5
    k: int = 5
    terminal_count: int = 2
    seed: int = 0
    gamma: float = 0.9
    branching: int = 4
    concentration: float = 1.0
    geometry: str = "simplex"

    def __post_init__(self):
        if self.d < 2:
            raise InvalidArgument("synthetic CMDP needs d >= 2 for contextual dynamics")
        if not 0 <= self.terminal_count <= 3 or self.terminal_count >= self.n_states:
            raise InvalidArgument("terminal_count must be in [0, 3] and below n_states")
        if self.k < 2:
            raise InvalidArgument("k must be at least 2")
        if self.branching < 1:
            raise InvalidArgument("branching must be positive")


def sample_mapping(rng, d, k, geometry):
    """Random ``d x k`` mapping inside a geometry."""
    if geometry == "simplex":
        return rng.dirichlet(np.ones(d * k)).reshape(d, k)
    if geometry == "ball":
        W = rng.normal(size=(d, k))
        return W / np.linalg.norm(W) * rng.random() ** (1.0 / (d * k))
    if geometry == "box":
        return rng.uniform(-1.0, 1.0, size=(d, k))
    raise InvalidArgument(f"unknown geometry {geometry!r}")


def make_random_cmdp(spec=SyntheticCMDPSpec()):
    rng = np.random.default_rng(spec.seed)
    S, A, d, k, T = spec.n_states, spec.n_actions, spec.d, spec.k, spec.terminal_count
    live = S - T
    P = np.zeros((d, S, A, S))
    width = min(spec.branching, S)
    for i in range(d):
        for s in range(live):
            for a in range(A):
                succ = rng.choice(S, size=width, replace=False)
                P[i, s, a, succ] = rng.dirichlet(np.full(width, spec.concentration))
    for t in range(live, S):
        P[:, t, :, t] = 1.0
    phi = np.zeros((S, k))
    phi[:live, : k - 1] = rng.random((live, k - 1))
    phi[:live, k - 1] = 0.0
    markers = [np.r_[np.zeros(k - 1), -0.5], np.r_[np.zeros(k - 1), 0.5], -np.ones(k)]
    for j in range(T):
        phi[live + j] = markers[j]
    xi = np.zeros(S)
    xi[:live] = 1.0 / live
    W = sample_mapping(rng, d, k, spec.geometry)
    return ContextualMDP(P, phi, xi, spec.gamma, w_star=W, geometry=spec.geometry, name=f"synth:{S},{A},{d},{k},{spec.seed}")


# ---------------------------------------------------------------------------
# Named presets


def make_preset(name, gamma=None):
    """Build ``"grid:NxM"``, ``"driving"`` or ``"synth:S,A,d,k,seed"``."""
    name = name.strip()
    try:
        if name.startswith("grid:"):
            n, m = (int(v) for v in name[5:].lower().split("x"))
            return make_gridworld(GridWorldSpec(n, m, 0.9 if gamma is None else gamma))
        if name == "driving":
            return make_driving(DrivingSpec(0.9 if gamma is None else gamma)).cmdp
        if name.startswith("synth:"):
            S, A, d, k, seed = (int(v) for v in name[6:].split(","))
            return make_random_cmdp(SyntheticCMDPSpec(S, A, d, k, seed=seed, gamma=0.9 if gamma is None else gamma))
    except ValueError as exc:
        raise InvalidArgument(f"malformed preset {name!r}: {exc}") from exc
    raise InvalidArgument(f"unknown preset {name!r}; expected grid:NxM, driving or synth:S,A,d,k,seed")
