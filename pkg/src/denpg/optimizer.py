"""Decentralized momentum natural policy gradient over a simulated agent network.

The swarm is kept as stacked ``(n, d)`` arrays, one row per agent. Each
iteration runs three synchronous rounds: every agent refreshes its
momentum gradient estimate on a fresh trajectory, the trackers are mixed
through ``W``, and every agent takes a (preconditioned) step before its
parameters are mixed.

Algorithms:

``mdnpg``
    momentum estimator + gradient tracking + damped Fisher preconditioning.
``mdpgt``
    same without preconditioning (direction = tracker).
``dpg``
    plain decentralized gradient ascent: beta forced to 1, no tracking.
``npg_single``
    mdnpg with a single agent and ``W = [1]``.

Random streams are derived from the master seed by (purpose, agent,
iteration), so results never depend on evaluation order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import (
    CoopNav,
    TinyMDP,
    default_gridworld,
    enumerate_trajectories,
    GridWorld,
    make_multitask_suite,
    random_tiny_mdp,
    sample_trajectory,
    tiny_mdp_suite,
    with_horizon,
)
from .errors import ValidationError
from .estimators import (
    Counters,
    FisherEstimate,
    baseline_update,
    exact_grad,
    importance_weight,
    momentum_update,
    natural_direction,
)
from .policy import FactorizedProduct, LinearSoftmax, MLPGaussian, MLPSoftmax, TabularSoftmax
from .topology import build_topology, consensus_error, mix

log = logging.getLogger(__name__)

ALGOS = ("mdnpg", "mdpgt", "dpg", "npg_single")
PRECONDITIONED = ("mdnpg", "npg_single")

# stream purposes
INIT_PARAMS, INIT_BATCH, ROLLOUT, FIM_EXTRA, EVAL, OUTPUT = range(6)

CONSENSUS_TOL = 1e-9


def stream(seed: int, purpose: int, agent: int = 0, t: int = 0, k: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, agent, t, k]))


@dataclass(frozen=True)
class RunConfig:
    T: int = 100
    H: int = 10
    B: int = 4
    eta: float = 0.01
    beta: float = 0.2
    gamma: float = 0.99
    epsilon: float = 1e-3
    algo: str = "mdnpg"
    topology: str = "ring"
    n_agents: int = 5
    topology_edges: tuple | None = None
    env: dict = field(default_factory=lambda: {"kind": "tiny_mdp"})
    policy: dict = field(default_factory=dict)
    seed: int = 0
    eval_episodes: int = 10
    eval_period: int = 1
    baseline_alpha: float = 0.05
    fim_trajectories: int = 1
    debug: bool = False

    def validate(self) -> "RunConfig":
        checks = [
            (self.T >= 1, "T >= 1"),
            (self.H >= 1, "H >= 1"),
            (self.B >= 1, "B >= 1"),
            (self.eta > 0, "eta > 0"),
            (0 < self.beta <= 1, "beta ∈ (0,1]"),
            (0 <= self.gamma < 1, "gamma ∈ [0,1)"),
            (self.epsilon > 0, "epsilon > 0"),
            (self.algo in ALGOS, f"algo ∈ {{{', '.join(ALGOS)}}}"),
            (self.n_agents >= 1, "n_agents >= 1"),
            (self.eval_episodes >= 1, "eval_episodes >= 1"),
            (self.eval_period >= 1, "eval_period >= 1"),
            (0 <= self.baseline_alpha <= 1, "baseline_alpha ∈ [0,1]"),
            (self.fim_trajectories >= 1, "fim_trajectories >= 1"),
        ]
        for ok, rule in checks:
            if not ok:
                raise ValidationError(rule)
        return self


@dataclass
class Problem:
    """Everything a run needs besides the iterates."""

    envs: list  # one environment per agent (the same object for collaborative runs)
    channels: list  # reward channel each agent optimizes
    policy: object
    network: object
    setting: str  # "mtrl" or "collaborative"

    @property
    def n(self) -> int:
        return len(self.envs)

    @property
    def block_fim(self) -> bool:
        return self.setting == "collaborative" and isinstance(self.policy, FactorizedProduct)

    @property
    def enumerable(self) -> bool:
        return all(isinstance(e, TinyMDP) for e in self.envs)


def _component(family, obs_dim, n_actions, spec, n_states=None):
    hidden = int(spec.get("hidden", 16))
    if family == "tabular_softmax":
        if n_states is None:
            raise ValidationError("tabular_softmax needs an indexed (finite) state space")
        return TabularSoftmax(n_states, n_actions)
    if family == "linear_softmax":
        return LinearSoftmax(obs_dim, n_actions)
    if family == "mlp_softmax":
        return MLPSoftmax(obs_dim, n_actions, hidden=hidden)
    if family == "mlp_gaussian":
        raise ValidationError("mlp_gaussian has no discrete environment to drive it")
    raise ValidationError(f"unknown policy family {family!r}")


def make_envs(env_spec: dict, n: int, H: int, gamma: float):
    """Per-agent environment list and setting from a flat env description."""
    spec = dict(env_spec)
    kind = spec.pop("kind", "tiny_mdp")
    setting = spec.pop("setting", None)
    if kind == "tiny_mdp":
        per_agent = bool(spec.pop("per_agent_rewards", True))
        suite_seed = int(spec.pop("suite_seed", 0))
        if "P" in spec:
            base = TinyMDP(P=spec.pop("P"), R=spec.pop("R"), rho0=spec.pop("rho0"), gamma=gamma, horizon=H,
                           action_dims=tuple(spec.pop("action_dims", ())))
        else:
            base = random_tiny_mdp(
                n_states=int(spec.pop("n_states", 2)),
                n_actions=int(spec.pop("n_actions", 2)),
                seed=int(spec.pop("table_seed", 0)),
                horizon=H,
                gamma=gamma,
                n_channels=int(spec.pop("n_channels", 1)),
                action_dims=tuple(spec.pop("action_dims", ())),
            )
        setting = setting or ("collaborative" if len(base.action_dims) > 1 else "mtrl")
        if setting == "collaborative":
            if base.n_channels != n or len(base.action_dims) != n:
                raise ValidationError("collaborative tiny_mdp needs one reward channel and one action factor per agent")
            envs = [base] * n
        else:
            envs = tiny_mdp_suite(n, base, seed=suite_seed) if per_agent else [base] * n
    elif kind in ("gridworld", "multitask_gridworld"):
        suite_seed = int(spec.pop("suite_seed", 0))
        perturb_goal = bool(spec.pop("perturb_goal", False))
        common = {k: spec.pop(k) for k in ("observation", "metric") if k in spec}
        if "obstacles" in spec:
            size = int(spec.pop("size", 10))
            base = GridWorld(size=size, goal=tuple(spec.pop("goal", (size - 1, size - 1))),
                             obstacles=tuple(map(tuple, spec.pop("obstacles"))), gamma=gamma, horizon=H, **common)
        else:
            base = default_gridworld(size=int(spec.pop("size", 10)), n_obstacles=int(spec.pop("n_obstacles", 5)),
                                     layout_seed=int(spec.pop("layout_seed", 0)), gamma=gamma, horizon=H, **common)
            if "goal" in spec:
                base = replace(base, goal=tuple(spec.pop("goal")))
        if kind == "multitask_gridworld":
            envs = make_multitask_suite(base, n, seed=suite_seed, perturb_goal=perturb_goal)
        else:
            envs = [base] * n
        setting = "mtrl"
    elif kind == "coop_nav":
        landmarks = spec.pop("landmarks", None)
        if landmarks is None:
            rng = np.random.default_rng(int(spec.pop("landmark_seed", 0)))
            landmarks = rng.uniform(-1.0, 1.0, size=(n, 2))
        env = CoopNav(n_agents=n, landmarks=landmarks, gamma=gamma, horizon=H,
                      **{k: float(spec.pop(k)) for k in ("step_size", "collision_radius") if k in spec})
        envs = [env] * n
        setting = "collaborative"
    else:
        raise ValidationError(f"unknown env kind {kind!r}")
    for key in ("n_states", "n_actions", "table_seed", "n_channels", "landmark_seed", "layout_seed", "n_obstacles"):
        spec.pop(key, None)
    if spec:
        raise ValidationError(f"unused env keys for {kind}: {sorted(spec)}")
    return envs, setting


def make_policy(policy_spec: dict, env, setting: str):
    family = policy_spec.get("family")
    n_states = getattr(env, "n_states", None)
    if isinstance(env, GridWorld) and env.observation != "index":
        n_states = None
    if setting == "collaborative":
        family = family or "linear_softmax"
        if family == "tabular_softmax" and n_states is None:
            raise ValidationError("tabular_softmax needs an indexed state space")
        return FactorizedProduct([_component(family, env.obs_dim, k, policy_spec, n_states) for k in env.action_dims])
    family = family or ("tabular_softmax" if n_states is not None else "mlp_softmax")
    return _component(family, env.obs_dim, env.action_dims[0], policy_spec, n_states)


def build_problem(config: RunConfig) -> Problem:
    config.validate()
    n = 1 if config.algo == "npg_single" else config.n_agents
    envs, setting = make_envs(config.env, n, config.H, config.gamma)
    policy = make_policy(config.policy, envs[0], setting)
    if n == 1:
        network = build_topology("custom", 1, [])
    else:
        network = build_topology(config.topology, n, config.topology_edges)
    channels = list(range(n)) if setting == "collaborative" else [0] * n
    return Problem(envs=envs, channels=channels, policy=policy, network=network, setting=setting)


@dataclass(frozen=True)
class AgentState:
    """One agent's view of the swarm (rows of the stacked arrays)."""

    theta: np.ndarray
    v: np.ndarray
    v_prev: np.ndarray
    y: np.ndarray
    theta_prev: np.ndarray
    baseline: float


@dataclass
class Swarm:
    theta: np.ndarray  # theta^t, (n, d)
    theta_prev: np.ndarray  # theta^{t-1}
    v: np.ndarray  # v^{t-1}: the estimator from the previous round
    v_prev: np.ndarray  # v^{t-2}
    y: np.ndarray  # y^t
    baselines: np.ndarray
    t: int = 0  # completed loop iterations
    counters: Counters = field(default_factory=Counters)

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    def agent(self, i: int) -> AgentState:
        return AgentState(self.theta[i], self.v[i], self.v_prev[i], self.y[i], self.theta_prev[i],
                          float(self.baselines[i]))

    @property
    def theta_bar(self) -> np.ndarray:
        return self.theta.mean(axis=0)


@dataclass
class StepInfo:
    consensus_residual: float
    mean_iterate_residual: float


def _local_estimates(problem, config, theta, theta_prev, v_prev_row, b, tau, channel, counters, need_momentum):
    """Momentum estimator and sample FIM for one agent on its trajectory."""
    policy = problem.policy
    steps = list(tau.steps())
    scores = np.array([policy.score(theta, s, a) for s, a in steps]).reshape(len(steps), policy.d)
    ret = tau.discounted_return(config.gamma, channel)
    g = scores.sum(axis=0) * (ret - b)
    if need_momentum:
        if steps:
            g_old = np.sum([policy.score(theta_prev, s, a) for s, a in steps], axis=0) * (ret - b)
        else:
            g_old = np.zeros(policy.d)
        omega = importance_weight(policy, theta_prev, theta, tau, counters)
        v = momentum_update(config.beta, g, v_prev_row, g_old, omega)
    else:
        v = g
    return v, scores, ret


def _fisher(problem, scores_list, H) -> FisherEstimate:
    S = np.concatenate(scores_list, axis=0) if scores_list else np.zeros((0, problem.policy.d))
    k = len(scores_list)
    if problem.block_fim:
        off = problem.policy.offsets
        blocks = []
        for j in range(len(off) - 1):
            Sj = S[:, off[j]:off[j + 1]]
            blocks.append(Sj.T @ Sj / (H * k))
        return FisherEstimate(blocks)
    return FisherEstimate([S.T @ S / (H * k)])


def _extra_fim_scores(problem, config, i, t, theta):
    env, policy = problem.envs[i], problem.policy
    out = []
    for k in range(1, config.fim_trajectories):
        tau = sample_trajectory(env, policy, theta, stream(config.seed, FIM_EXTRA, i, t, k))
        out.append(np.array([policy.score(theta, s, a) for s, a in tau.steps()]).reshape(-1, policy.d))
    return out


def _directions(problem, config, swarm_theta, y_new, fim_scores, t, counters):
    if config.algo not in PRECONDITIONED:
        return y_new.copy()
    d = np.empty_like(y_new)
    for i in range(y_new.shape[0]):
        F = _fisher(problem, fim_scores[i], config.H)
        d[i] = natural_direction(F, y_new[i], config.epsilon, counters, iteration=t)
    return d


def initialize(problem: Problem, config: RunConfig) -> Swarm:
    """Shared theta^0, batch estimator v^0, one tracker mixing round, and the first parameter update.

    The loop body needs theta^1 and theta^0, so the update that turns y^1
    into theta^1 is performed here with the Fisher estimate from the first
    batch trajectory.
    """
    n, d = problem.n, problem.policy.d
    W = problem.network.W
    theta0 = problem.policy.init_params(stream(config.seed, INIT_PARAMS))
    theta = np.tile(theta0, (n, 1))
    v0 = np.zeros((n, d))
    fim_scores = []
    for i in range(n):
        rng = stream(config.seed, INIT_BATCH, i)
        acc = np.zeros(d)
        first = None
        for b in range(config.B):
            tau = sample_trajectory(problem.envs[i], problem.policy, theta[i], rng)
            scores = np.array([problem.policy.score(theta[i], s, a) for s, a in tau.steps()]).reshape(-1, d)
            acc += scores.sum(axis=0) * tau.discounted_return(config.gamma, problem.channels[i])
            if first is None:
                first = scores
        v0[i] = acc / config.B
        fim_scores.append([first] + _extra_fim_scores(problem, config, i, 0, theta[i]))
    y1 = v0.copy() if config.algo == "dpg" else mix(W, v0)
    counters = Counters()
    d0 = _directions(problem, config, theta, y1, fim_scores, 0, counters)
    theta1 = mix(W, theta + config.eta * d0)
    return Swarm(theta=theta1, theta_prev=theta, v=v0, v_prev=np.zeros((n, d)), y=y1,
                 baselines=np.zeros(n), t=0, counters=counters)


def step(swarm: Swarm, problem: Problem, config: RunConfig, t: int) -> StepInfo:
    """One synchronous round of estimate, track and update, applied in place."""
    n, d = swarm.theta.shape
    W = problem.network.W
    need_momentum = config.algo != "dpg" and config.beta < 1.0
    V = np.empty((n, d))
    fim_scores = []
    for i in range(n):
        tau = sample_trajectory(problem.envs[i], problem.policy, swarm.theta[i], stream(config.seed, ROLLOUT, i, t))
        V[i], scores, ret = _local_estimates(problem, config, swarm.theta[i], swarm.theta_prev[i], swarm.v[i],
                                             swarm.baselines[i], tau, problem.channels[i], swarm.counters,
                                             need_momentum)
        if config.algo in PRECONDITIONED:
            fim_scores.append([scores] + _extra_fim_scores(problem, config, i, t, swarm.theta[i]))
        swarm.baselines[i] = baseline_update(swarm.baselines[i], ret, config.baseline_alpha)

    if config.algo == "dpg":
        y_new = V.copy()
    else:
        y_new = mix(W, swarm.y + V - swarm.v)
    residual = float(np.abs(y_new.mean(axis=0) - V.mean(axis=0)).max())
    if config.debug and residual >= CONSENSUS_TOL:
        raise AssertionError(f"iteration {t}: tracker mean drifted from estimator mean by {residual:.3e}")

    dirs = _directions(problem, config, swarm.theta, y_new, fim_scores, t, swarm.counters)
    theta_new = mix(W, swarm.theta + config.eta * dirs)
    mean_resid = float(np.abs(theta_new.mean(axis=0) - swarm.theta.mean(axis=0) - config.eta * dirs.mean(axis=0)).max())

    swarm.theta_prev = swarm.theta
    swarm.theta = theta_new
    swarm.v_prev = swarm.v
    swarm.v = V
    swarm.y = y_new
    swarm.t = t
    return StepInfo(consensus_residual=residual, mean_iterate_residual=mean_resid)


def stationarity_gap(problem: Problem, theta_bar, enumerations=None) -> float:
    """Norm of the exact gradient of the network-average value at ``theta_bar``."""
    if not problem.enumerable:
        raise TypeError("stationarity gap needs enumerable (tiny_mdp) environments")
    cache = {}
    g = np.zeros(problem.policy.d)
    for i, env in enumerate(problem.envs):
        key = (id(env), problem.channels[i])
        if key not in cache:
            enum = enumerations.get(id(env)) if enumerations else None
            cache[key] = exact_grad(env, problem.policy, theta_bar, problem.channels[i], enum)
        g += cache[key]
    return float(np.linalg.norm(g / problem.n))


def evaluate(problem: Problem, theta, episodes: int, rng) -> float:
    """Monte-Carlo estimate of the network-average value (1/n) sum_i V_i(theta)."""
    total = 0.0
    groups: dict[int, list[int]] = {}
    for i, env in enumerate(problem.envs):
        groups.setdefault(id(env), []).append(i)
    for members in groups.values():
        env = problem.envs[members[0]]
        for _ in range(episodes):
            tau = sample_trajectory(env, problem.policy, theta, rng)
            total += sum(tau.discounted_return(env.gamma, problem.channels[i]) for i in members)
    return total / (episodes * problem.n)


@dataclass
class SwarmMetrics:
    rows: list = field(default_factory=list)
    consensus_residuals: list = field(default_factory=list)  # every iteration
    mean_iterate_residuals: list = field(default_factory=list)

    COLUMNS = ("iteration", "avg_return", "consensus_err", "tracker_err", "consensus_residual",
               "stationarity_gap", "clip_events", "solver_iters")

    def column(self, name) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)


@dataclass
class RunResult:
    metrics: SwarmMetrics
    theta_out: np.ndarray
    out_index: tuple  # (agent, iteration) the random output iterate was drawn from
    theta_bar: np.ndarray
    problem: Problem
    swarm: Swarm


def run(config: RunConfig, problem: Problem | None = None) -> RunResult:
    problem = build_problem(config) if problem is None else problem
    n, T = problem.n, config.T
    out_rng = stream(config.seed, OUTPUT)
    out_agent = int(out_rng.integers(n))
    out_t = int(out_rng.integers(T + 1))
    captured = {}

    enumerations = None
    if problem.enumerable:
        enumerations = {id(e): enumerate_trajectories(e) for e in problem.envs}

    swarm = initialize(problem, config)
    captured[0] = swarm.theta_prev[out_agent].copy()
    captured[1] = swarm.theta[out_agent].copy()
    metrics = SwarmMetrics()
    window = 0.0
    for t in range(1, T + 1):
        info = step(swarm, problem, config, t)
        if t + 1 == out_t:
            captured[out_t] = swarm.theta[out_agent].copy()
        metrics.consensus_residuals.append(info.consensus_residual)
        metrics.mean_iterate_residuals.append(info.mean_iterate_residual)
        window = max(window, info.consensus_residual)
        if t % config.eval_period == 0 or t == T:
            theta_bar = swarm.theta_bar
            gap = stationarity_gap(problem, theta_bar, enumerations) if problem.enumerable else None
            metrics.rows.append({
                "iteration": t,
                "avg_return": evaluate(problem, theta_bar, config.eval_episodes, stream(config.seed, EVAL, 0, t)),
                "consensus_err": consensus_error(swarm.theta),
                "tracker_err": consensus_error(swarm.y),
                "consensus_residual": window,
                "stationarity_gap": gap,
                "clip_events": swarm.counters.clip_events,
                "solver_iters": swarm.counters.solver_iters,
            })
            window = 0.0
    return RunResult(metrics=metrics, theta_out=captured[out_t], out_index=(out_agent, out_t),
                     theta_bar=swarm.theta_bar, problem=problem, swarm=swarm)
