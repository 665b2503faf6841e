"""Episodic environments and trajectory sampling.

Four environment kinds are provided:

* ``TinyMDP`` -- explicit transition/reward tables, small enough to enumerate
  every trajectory exactly. This is the oracle environment used by the tests.
* ``GridWorld`` -- goal/obstacle grid with reward ``-0.1 * distance +/- 10``.
* multi-task GridWorld -- a list of GridWorld variants from
  :func:`make_multitask_suite`, one per agent.
* ``CoopNav`` -- n agents on the 2x2 square, each seeking its own landmark.

Every environment exposes the same small protocol used by the sampler:
``initial_state(rng)``, ``step(state, action, rng) -> (state, rewards, done)``
and ``observe(state)``. Rewards are always a vector with one entry per reward
channel (one channel for single-agent tasks, n for cooperative navigation).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TooLarge, ValidationError

ENUMERATION_LIMIT = 10**6

GRID_MOVES = ((-1, 0), (1, 0), (0, 1), (0, -1))  # up, down, right, left
NAV_MOVES = ((0.0, 1.0), (0.0, -1.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 0.0))  # up, down, right, left, stay


def categorical(p, rng) -> int:
    """Inverse-CDF draw from probability vector ``p`` using one ``rng.random()`` call."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


@dataclass
class Trajectory:
    """One fixed-length rollout.

    ``active[h]`` is False for steps padded after the episode reached an
    absorbing (terminal) state; those steps carry zero reward and their
    placeholder action never enters a likelihood or score.
    """

    states: list
    actions: list
    rewards: np.ndarray  # (H, n_channels)
    active: np.ndarray  # (H,) bool

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def reward(self, channel: int = 0) -> np.ndarray:
        return self.rewards[:, channel]

    def discounted_return(self, gamma: float, channel: int = 0) -> float:
        r = self.rewards[:, channel]
        return float(np.dot(gamma ** np.arange(len(r)), r))

    def steps(self):
        """Yield (state, action) for the active steps."""
        for h in range(len(self.actions)):
            if self.active[h]:
                yield self.states[h], self.actions[h]


def _check_common(gamma, horizon):
    if not 0.0 <= gamma < 1.0:
        raise ValidationError(f"gamma must lie in [0, 1), got {gamma}")
    if int(horizon) != horizon or horizon < 1:
        raise ValidationError(f"horizon must be an integer >= 1, got {horizon}")


@dataclass(frozen=True, eq=False)
class TinyMDP:
    """Tabular MDP given by explicit tables.

    ``P[s, a, s']`` transition probabilities, ``R[c, s, a, s']`` rewards per
    channel, ``rho0[s]`` initial distribution. ``action_dims`` factors the
    flat action index into per-agent actions for factorized joint policies.
    """

    P: np.ndarray
    R: np.ndarray
    rho0: np.ndarray
    gamma: float = 0.9
    horizon: int = 3
    action_dims: tuple = ()
    kind: str = field(default="tiny_mdp", init=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        rho0 = np.asarray(self.rho0, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"P must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape == (S, A):
            R = np.repeat(R[:, :, None], S, axis=2)
        if R.shape == (S, A, S):
            R = R[None]
        if R.ndim != 4 or R.shape[1:] != (S, A, S):
            raise ValidationError(f"R must have shape (C, S, A, S), got {R.shape}")
        if (P < 0).any() or np.abs(P.sum(axis=2) - 1.0).max() > 1e-12:
            raise ValidationError("every transition row of P must be a distribution (sum 1 within 1e-12)")
        if rho0.shape != (S,) or (rho0 < 0).any() or abs(rho0.sum() - 1.0) > 1e-12:
            raise ValidationError("rho0 must be a distribution over states")
        if np.abs(R).max() > 1.0:
            raise ValidationError("tiny_mdp rewards must lie in [-1, 1]")
        dims = tuple(int(a) for a in self.action_dims) or (A,)
        if int(np.prod(dims)) != A:
            raise ValidationError(f"action_dims {dims} do not multiply to |A|={A}")
        _check_common(self.gamma, self.horizon)
        for name, value in (("P", P), ("R", R), ("rho0", rho0)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "action_dims", dims)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def n_channels(self) -> int:
        return self.R.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.n_states

    def action_index(self, action) -> int:
        if isinstance(action, (tuple, list, np.ndarray)):
            return int(np.ravel_multi_index(tuple(int(a) for a in action), self.action_dims))
        return int(action)

    def joint_action(self, index: int):
        if len(self.action_dims) == 1:
            return int(index)
        return tuple(int(a) for a in np.unravel_index(index, self.action_dims))

    def initial_state(self, rng) -> int:
        return categorical(self.rho0, rng)

    def step(self, state, action, rng):
        a = self.action_index(action)
        nxt = categorical(self.P[state, a], rng)
        return nxt, self.R[:, state, a, nxt].copy(), False

    def observe(self, state):
        return int(state)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "P": self.P.tolist(),
            "R": self.R.tolist(),
            "rho0": self.rho0.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
        }
        if len(self.action_dims) > 1:
            d["action_dims"] = list(self.action_dims)
        return d


def random_tiny_mdp(n_states=2, n_actions=2, seed=0, horizon=3, gamma=0.9, n_channels=1,
                    action_dims=()) -> TinyMDP:
    """Random tables: Dirichlet(1) transition rows, rewards uniform on [-1, 1]."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_channels, n_states, n_actions, n_states))
    rho0 = rng.dirichlet(np.ones(n_states))
    rho0 /= rho0.sum()
    return TinyMDP(P=P, R=R, rho0=rho0, gamma=gamma, horizon=horizon, action_dims=action_dims)


def canonical_tiny_mdp() -> TinyMDP:
    """The 2-state / 2-action / H=3 MDP the estimator checks are pinned to."""
    return random_tiny_mdp(n_states=2, n_actions=2, seed=0, horizon=3, gamma=0.9)


def tiny_mdp_suite(n: int, base: TinyMDP, seed: int = 0) -> list[TinyMDP]:
    """n agents sharing dynamics; agent 0 keeps ``base`` rewards, the others get fresh ones."""
    rng = np.random.default_rng(seed)
    out = [base]
    for _ in range(1, n):
        R = rng.uniform(-1.0, 1.0, size=base.R.shape)
        out.append(replace(base, R=R))
    return out


def gridworld_reward(state, goal, event: str = "none", metric: str = "manhattan") -> float:
    """-0.1 * distance(state, goal), plus 10 on reaching the goal, minus 10 on an obstacle."""
    dr = state[0] - goal[0]
    dc = state[1] - goal[1]
    if metric == "manhattan":
        dist = abs(dr) + abs(dc)
    elif metric == "euclidean":
        dist = math.hypot(dr, dc)
    else:
        raise ValueError(f"unknown distance metric {metric!r}")
    r = -0.1 * dist
    if event == "goal":
        r += 10.0
    elif event == "obstacle":
        r -= 10.0
    elif event != "none":
        raise ValueError(f"unknown event {event!r}")
    return r


@dataclass(frozen=True, eq=False)
class GridWorld:
    """Square grid with one goal and a set of obstacle cells.

    Start cell is uniform over free cells. Moving off the grid leaves the agent
    in place. Reaching the goal or an obstacle ends the episode.
    """

    size: int = 10
    goal: tuple = (9, 9)
    obstacles: tuple = ()
    gamma: float = 0.99
    horizon: int = 20
    observation: str = "index"  # "index" (tabular) or "coords"
    metric: str = "manhattan"
    kind: str = field(default="gridworld", init=False)

    def __post_init__(self):
        size = int(self.size)
        goal = tuple(int(v) for v in self.goal)
        obstacles = tuple(sorted({tuple(int(v) for v in c) for c in self.obstacles}))
        for cell in (goal, *obstacles):
            if not (0 <= cell[0] < size and 0 <= cell[1] < size):
                raise ValidationError(f"cell {cell} outside the {size}x{size} grid")
        if goal in obstacles:
            raise ValidationError("goal cell cannot be an obstacle")
        if self.observation not in ("index", "coords"):
            raise ValidationError(f"unknown gridworld observation {self.observation!r}")
        if self.metric not in ("manhattan", "euclidean"):
            raise ValidationError(f"unknown gridworld metric {self.metric!r}")
        _check_common(self.gamma, self.horizon)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "obstacles", obstacles)
        free = [(r, c) for r in range(size) for c in range(size)
                if (r, c) != goal and (r, c) not in obstacles]
        if not free:
            raise ValidationError("gridworld has no free start cell")
        object.__setattr__(self, "_free", tuple(free))

    n_channels = 1
    n_actions = 4
    action_dims = (4,)

    @property
    def n_states(self) -> int:
        return self.size * self.size

    @property
    def obs_dim(self) -> int:
        return self.n_states if self.observation == "index" else 2

    def initial_state(self, rng):
        free = self._free
        return free[min(int(rng.random() * len(free)), len(free) - 1)]

    def step(self, state, action, rng):
        dr, dc = GRID_MOVES[int(action)]
        r = min(max(state[0] + dr, 0), self.size - 1)
        c = min(max(state[1] + dc, 0), self.size - 1)
        nxt = (r, c)
        if nxt == self.goal:
            event = "goal"
        elif nxt in self.obstacles:
            event = "obstacle"
        else:
            event = "none"
        reward = gridworld_reward(nxt, self.goal, event, self.metric)
        return nxt, np.array([reward]), event != "none"

    def observe(self, state):
        if self.observation == "index":
            return state[0] * self.size + state[1]
        return np.array(state, dtype=float) / max(self.size - 1, 1)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "size": self.size,
            "goal": list(self.goal),
            "obstacles": [list(c) for c in self.obstacles],
            "gamma": self.gamma,
            "horizon": self.horizon,
            "observation": self.observation,
            "metric": self.metric,
        }


def _draw_obstacles(size, goal, count, rng, exclude=()):
    cells = [(r, c) for r in range(size) for c in range(size) if (r, c) != tuple(goal)]
    cells = [c for c in cells if c not in exclude]
    if count > len(cells):
        raise ValidationError(f"cannot place {count} obstacles in a {size}x{size} grid")
    idx = rng.choice(len(cells), size=count, replace=False)
    return tuple(sorted(cells[i] for i in idx))


def default_gridworld(size=10, n_obstacles=5, layout_seed=0, **kwargs) -> GridWorld:
    """Goal in the bottom-right corner, ``n_obstacles`` seeded obstacle cells."""
    goal = (size - 1, size - 1)
    rng = np.random.default_rng(layout_seed)
    obstacles = _draw_obstacles(size, goal, n_obstacles, rng)
    return GridWorld(size=size, goal=goal, obstacles=obstacles, **kwargs)


def make_multitask_suite(base: GridWorld, n: int, seed: int = 0, perturb_goal: bool = False) -> list[GridWorld]:
    """``n`` GridWorld variants sharing size and action set; variant 0 is ``base``.

    Variants redraw the obstacle cells (same count) from ``seed``; obstacle sets
    are pairwise distinct. With ``perturb_goal`` the goal cell is redrawn too.
    """
    if n < 1:
        raise ValidationError(f"suite size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    suite = [base]
    seen = {base.obstacles}
    count = len(base.obstacles)
    attempts = 0
    while len(suite) < n:
        attempts += 1
        if attempts > 10_000:
            raise ValidationError("could not draw enough distinct obstacle layouts")
        goal = base.goal
        if perturb_goal:
            goal = tuple(int(v) for v in rng.integers(0, base.size, size=2))
        obstacles = _draw_obstacles(base.size, goal, count, rng)
        if obstacles in seen and count > 0:
            continue
        seen.add(obstacles)
        suite.append(replace(base, goal=goal, obstacles=obstacles))
    return suite


def coopnav_reward(agent_pos, landmark, collisions: int) -> float:
    """-(distance to own landmark) - number of collisions."""
    d = math.hypot(agent_pos[0] - landmark[0], agent_pos[1] - landmark[1])
    return -d - collisions


@dataclass(frozen=True, eq=False)
class CoopNav:
    """n-agent cooperative navigation on [-1, 1]^2 with discrete moves.

    Each agent moves up/down/right/left/stays by ``step_size``; positions are
    clipped to the square. Agents closer than ``collision_radius`` collide.
    Observation is all agent positions followed by all landmarks (length 4n).
    """

    n_agents: int = 3
    landmarks: np.ndarray = None
    gamma: float = 0.95
    horizon: int = 25
    step_size: float = 0.1
    collision_radius: float = 0.1
    kind: str = field(default="coop_nav", init=False)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValidationError("coop_nav needs at least one agent")
        lm = self.landmarks
        if lm is None:
            lm = np.random.default_rng(0).uniform(-1.0, 1.0, size=(self.n_agents, 2))
        lm = np.asarray(lm, dtype=float).reshape(self.n_agents, 2)
        if np.abs(lm).max() > 1.0:
            raise ValidationError("landmarks must lie inside the 2x2 square")
        lm.setflags(write=False)
        object.__setattr__(self, "landmarks", lm)
        _check_common(self.gamma, self.horizon)

    @property
    def n_channels(self) -> int:
        return self.n_agents

    @property
    def action_dims(self) -> tuple:
        return (5,) * self.n_agents

    @property
    def obs_dim(self) -> int:
        return 4 * self.n_agents

    def initial_state(self, rng):
        return rng.uniform(-1.0, 1.0, size=(self.n_agents, 2))

    def step(self, state, action, rng):
        moves = np.array([NAV_MOVES[int(a)] for a in action])
        pos = np.clip(state + self.step_size * moves, -1.0, 1.0)
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        hits = (dist < self.collision_radius).sum(axis=1) - 1
        rewards = np.array([coopnav_reward(pos[i], self.landmarks[i], int(hits[i]))
                            for i in range(self.n_agents)])
        return pos, rewards, False

    def observe(self, state):
        return np.concatenate([np.asarray(state).ravel(), self.landmarks.ravel()])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_agents": self.n_agents,
            "landmarks": self.landmarks.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "step_size": self.step_size,
            "collision_radius": self.collision_radius,
        }


def env_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "tiny_mdp":
        return TinyMDP(**d)
    if kind == "gridworld":
        return GridWorld(**d)
    if kind == "coop_nav":
        return CoopNav(**d)
    raise ValidationError(f"unknown env kind {kind!r}")


def with_horizon(env, horizon=None, gamma=None):
    changes = {}
    if horizon is not None:
        changes["horizon"] = horizon
    if gamma is not None:
        changes["gamma"] = gamma
    return replace(env, **changes) if changes else env


def sample_trajectory(env, policy, theta, rng, horizon=None) -> Trajectory:
    """Roll out ``policy`` at ``theta``; draw order is initial state, then per step action then transition.

    Once the environment signals termination the remaining steps are padded
    with the absorbing state, zero reward and ``active=False``.
    """
    H = env.horizon if horizon is None else int(horizon)
    if H < 1:
        raise ValidationError(f"horizon must be >= 1, got {H}")
    state = env.initial_state(rng)
    obs = env.observe(state)
    states = [obs]
    actions = []
    rewards = np.zeros((H, env.n_channels))
    active = np.zeros(H, dtype=bool)
    done = False
    for h in range(H):
        if done:
            states.append(obs)
            actions.append(None)
            continue
        a = policy.sample_action(theta, obs, rng)
        state, r, done = env.step(state, a, rng)
        obs = env.observe(state)
        actions.append(a)
        rewards[h] = r
        active[h] = True
        states.append(obs)
    return Trajectory(states=states, actions=actions, rewards=rewards, active=active)


@dataclass
class EnumeratedTrajectory:
    trajectory: Trajectory
    structural_prob: float  # rho0(s0) * prod_h P(s^{h+1} | s^h, a^h)

    def probability(self, policy, theta) -> float:
        logp = sum(policy.log_prob(theta, s, a) for s, a in self.trajectory.steps())
        return self.structural_prob * math.exp(logp)


def enumerate_trajectories(env: TinyMDP, horizon=None, limit: int = ENUMERATION_LIMIT):
    """Every trajectory with nonzero structural probability, each exactly once.

    The policy factor is left to :meth:`EnumeratedTrajectory.probability`, so
    one enumeration serves any parameter vector.
    """
    if not isinstance(env, TinyMDP):
        raise TypeError("exact enumeration requires a TinyMDP")
    H = env.horizon if horizon is None else int(horizon)
    if H < 1:
        raise ValidationError(f"horizon must be >= 1, got {H}")
    S, A = env.n_states, env.n_actions
    bound = S ** (H + 1) * A**H
    if bound > limit:
        raise TooLarge(f"{bound} candidate trajectories exceed the enumeration limit {limit}")

    out = []
    for s0 in range(S):
        if env.rho0[s0] == 0.0:
            continue
        stack = [([s0], [], [], float(env.rho0[s0]))]
        while stack:
            states, actions, rews, prob = stack.pop()
            h = len(actions)
            if h == H:
                traj = Trajectory(
                    states=[int(s) for s in states],
                    actions=[env.joint_action(a) for a in actions],
                    rewards=np.array(rews).reshape(H, env.n_channels),
                    active=np.ones(H, dtype=bool),
                )
                out.append(EnumeratedTrajectory(traj, prob))
                continue
            s = states[-1]
            for a, s2 in itertools.product(range(A), range(S)):
                p = env.P[s, a, s2]
                if p == 0.0:
                    continue
                stack.append((states + [s2], actions + [a], rews + [env.R[:, s, a, s2]], prob * p))
    return out


def exact_value(env: TinyMDP, policy, theta, channel: int = 0, enumerated=None) -> float:
    """V(theta) = sum over trajectories of p(tau | theta) R(tau)."""
    enumerated = enumerate_trajectories(env) if enumerated is None else enumerated
    return float(sum(e.probability(policy, theta) * e.trajectory.discounted_return(env.gamma, channel)
                     for e in enumerated))
