"""Config parsing, seeded experiment batteries, CSV/SVG output and evaluation grids.

Config files are flat ``key = value`` text with dotted section prefixes::

    # comments start with '#'
    env.kind = gridworld
    env.size = 5
    run.T = 2000
    run.beta = 0.2
    experiment.seeds = 0, 1, 2, 3, 4
    experiment.algos = mdnpg, dpg

Values are read as JSON when they parse as JSON (numbers, ``true``,
nested arrays for inline tables) and as plain strings otherwise.
Unknown and duplicate keys are rejected.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envs import sample_trajectory
from .errors import DenpgError, ParseError, SpaceMismatch, ValidationError
from .optimizer import ALGOS, RunConfig, make_envs, run
from .policy import FactorizedProduct, load_params, save_params
from .topology import KINDS, load_edge_file

log = logging.getLogger(__name__)

RUN_KEYS = {
    "T": int, "H": int, "B": int, "eta": float, "beta": float, "gamma": float, "epsilon": float,
    "n_agents": int, "eval_episodes": int, "eval_period": int, "baseline_alpha": float,
    "fim_trajectories": int, "debug": bool,
}
ENV_KEYS = {
    "kind", "setting", "P", "R", "rho0", "action_dims", "n_states", "n_actions", "table_seed", "n_channels",
    "per_agent_rewards", "suite_seed", "size", "goal", "obstacles", "n_obstacles", "layout_seed",
    "observation", "metric", "perturb_goal", "landmarks", "landmark_seed", "step_size", "collision_radius",
}
POLICY_KEYS = {"family", "hidden", "sigma_floor"}
EXPERIMENT_KEYS = {"seeds", "algos", "topologies", "out", "plots"}
TOPOLOGY_KEYS = {"edges_file"}
SECTIONS = {"run": set(RUN_KEYS), "env": ENV_KEYS, "policy": POLICY_KEYS, "experiment": EXPERIMENT_KEYS,
            "topology": TOPOLOGY_KEYS}


@dataclass
class ExperimentConfig:
    template: RunConfig
    seeds: list = field(default_factory=lambda: [0])
    algos: list = field(default_factory=lambda: ["mdnpg"])
    topologies: list = field(default_factory=lambda: ["ring"])
    out: str = "results"
    plots: bool = False

    def runs(self):
        for algo in self.algos:
            for topo in self.topologies:
                for seed in self.seeds:
                    yield replace(self.template, algo=algo, topology=topo, seed=int(seed))


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _as_list(value):
    if isinstance(value, list):
        return value
    if isinstance(value, str):
        return [_value(v.strip()) for v in value.split(",") if v.strip()]
    return [value]


def read_pairs(text: str) -> dict:
    """key -> value for every ``key = value`` line, rejecting unknown or duplicate keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError("expected 'key = value'", line=lineno)
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS or name not in SECTIONS[section]:
            raise ParseError("unknown key", line=lineno, key=key)
        if key in out:
            raise ParseError("duplicate key", line=lineno, key=key)
        out[key] = _value(value.strip())
    return out


def config_from_pairs(pairs: dict, base_dir: Path | None = None) -> ExperimentConfig:
    run_kwargs = {}
    for name, conv in RUN_KEYS.items():
        key = f"run.{name}"
        if key in pairs:
            v = pairs[key]
            if conv is bool and not isinstance(v, bool):
                raise ValidationError(f"{key} must be true or false")
            try:
                run_kwargs[name] = conv(v)
            except (TypeError, ValueError):
                raise ValidationError(f"{key} must be a {conv.__name__}, got {v!r}") from None
    env = {k[4:]: v for k, v in pairs.items() if k.startswith("env.")}
    policy = {k[7:]: v for k, v in pairs.items() if k.startswith("policy.")}
    edges = None
    if "topology.edges_file" in pairs:
        path = Path(str(pairs["topology.edges_file"]))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        edges = tuple(load_edge_file(path))
    template = RunConfig(env=env or {"kind": "tiny_mdp"}, policy=policy, topology_edges=edges, **run_kwargs)

    cfg = ExperimentConfig(template=template)
    if "experiment.seeds" in pairs:
        cfg.seeds = [int(s) for s in _as_list(pairs["experiment.seeds"])]
    if "experiment.algos" in pairs:
        cfg.algos = [str(a) for a in _as_list(pairs["experiment.algos"])]
    if "experiment.topologies" in pairs:
        cfg.topologies = [str(t) for t in _as_list(pairs["experiment.topologies"])]
    if "experiment.out" in pairs:
        cfg.out = str(pairs["experiment.out"])
    if "experiment.plots" in pairs:
        cfg.plots = bool(pairs["experiment.plots"])
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    cfg.template.validate()
    if not cfg.seeds or not cfg.algos or not cfg.topologies:
        raise ValidationError("seeds, algos and topologies must be non-empty")
    for a in cfg.algos:
        if a not in ALGOS:
            raise ValidationError(f"algo ∈ {{{', '.join(ALGOS)}}}, got {a!r}")
    for t in cfg.topologies:
        if t not in KINDS:
            raise ValidationError(f"topology ∈ {{{', '.join(KINDS)}}}, got {t!r}")
        if t == "custom" and cfg.template.topology_edges is None:
            raise ValidationError("custom topology needs topology.edges_file")
    if not set(cfg.template.env) <= ENV_KEYS:
        raise ValidationError(f"unknown env keys {sorted(set(cfg.template.env) - ENV_KEYS)}")
    # builds every environment once so bad env keys fail at parse time
    tpl = cfg.template
    make_envs(tpl.env, 1 if cfg.algos == ["npg_single"] else tpl.n_agents, tpl.H, tpl.gamma)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    return config_from_pairs(read_pairs(text), base_dir=path.parent)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return json.dumps(v)


def config_lines(cfg: ExperimentConfig) -> list[str]:
    """Inverse of :func:`parse_config` as ``key = value`` lines."""
    tpl = cfg.template
    lines = [f"run.{name} = {_fmt(getattr(tpl, name))}" for name in RUN_KEYS]
    lines += [f"env.{k} = {json.dumps(v)}" for k, v in tpl.env.items()]
    lines += [f"policy.{k} = {json.dumps(v)}" for k, v in tpl.policy.items()]
    lines += [
        f"experiment.seeds = {', '.join(str(s) for s in cfg.seeds)}",
        f"experiment.algos = {', '.join(cfg.algos)}",
        f"experiment.topologies = {', '.join(cfg.topologies)}",
        f"experiment.out = {cfg.out}",
        f"experiment.plots = {_fmt(cfg.plots)}",
    ]
    return lines


def env_to_pairs(env) -> dict:
    """An environment object as ``env.*`` config pairs (tables inline as nested arrays)."""
    return {f"env.{k}": v for k, v in env.to_dict().items() if k not in ("gamma", "horizon")}


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics.COLUMNS)
        for row in metrics.rows:
            w.writerow([_fmt(row[c]) for c in metrics.COLUMNS])


def read_metrics_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for name in rows[0].keys() if rows else []:
        cols[name] = np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])
    return cols


def run_name(config: RunConfig) -> str:
    return f"{config.algo}__{config.topology}__seed{config.seed}"


def _execute(config: RunConfig, out_dir: str):
    """Run one configuration and write its CSV, checkpoint and manifest; returns (name, error)."""
    name = run_name(config)
    out = Path(out_dir)
    try:
        result = run(config)
    except (DenpgError, FloatingPointError, ValueError, AssertionError) as exc:
        log.error("run %s failed: %s", name, exc)
        return name, f"{type(exc).__name__}: {exc}"
    write_metrics_csv(out / "runs" / f"{name}.csv", result.metrics)
    ckpt = out / "checkpoints"
    save_params(ckpt / f"{name}.params", result.problem.policy, result.theta_bar)
    save_params(ckpt / f"{name}.out.params", result.problem.policy, result.theta_out)
    manifest = [
        f"iteration = {config.T}",
        f"seed = {config.seed}",
        f"algo = {config.algo}",
        f"topology = {config.topology}",
        f"output_iterate = agent {result.out_index[0]}, iteration {result.out_index[1]}",
    ]
    (ckpt / f"{name}.manifest").write_text("\n".join(manifest) + "\n")
    return name, None


def aggregate(paths, out_path) -> None:
    """Per-iteration mean and population std over runs; runs must share their iteration grid."""
    tables = [read_metrics_csv(p) for p in paths]
    grid = tables[0]["iteration"]
    for t in tables[1:]:
        if t["iteration"].shape != grid.shape or not np.array_equal(t["iteration"], grid):
            raise ValidationError(f"cannot aggregate runs with different iteration grids: {paths}")
    names = list(tables[0].keys())
    header = []
    for name in names:
        header += [f"{name}_mean", f"{name}_std"]
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(grid.size):
            row = []
            for name in names:
                col = np.array([t[name][r] for t in tables])
                if np.isnan(col).all():
                    row += ["", ""]
                else:
                    row += [_fmt(float(np.mean(col))), _fmt(float(np.std(col)))]
            w.writerow(row)


def plot_battery(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """One SVG per topology: mean avg_return with a std band for every algorithm."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "denpg"
    matplotlib.rcParams["svg.fonttype"] = "path"
    written = []
    for topo in cfg.topologies:
        fig, ax = plt.subplots(figsize=(6, 4))
        drawn = False
        for algo in cfg.algos:
            path = out / "aggregate" / f"{algo}__{topo}.csv"
            if not path.exists():
                continue
            cols = read_metrics_csv(path)
            x, m, s = cols["iteration_mean"], cols["avg_return_mean"], cols["avg_return_std"]
            ax.plot(x, m, label=algo)
            ax.fill_between(x, m - s, m + s, alpha=0.2)
            drawn = True
        if drawn:
            ax.set_xlabel("iteration")
            ax.set_ylabel("average return")
            ax.set_title(topo)
            ax.legend()
            target = out / "plots" / f"{topo}.svg"
            target.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(target, format="svg", metadata={"Date": None})
            written.append(target)
        plt.close(fig)
    return written


@dataclass
class BatteryResult:
    out: Path
    runs: list
    aggregates: list
    plots: list
    failures: dict

    @property
    def ok(self) -> bool:
        return not self.failures


def thread_cap() -> int:
    raw = os.environ.get("DENPG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_battery(cfg: ExperimentConfig, out=None, plots=None, threads=None) -> BatteryResult:
    """Every (algo, topology, seed) run, then per-(algo, topology) aggregates and optional plots.

    A failing run is recorded and the battery carries on.
    """
    out = Path(out or cfg.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "aggregate").mkdir(parents=True, exist_ok=True)
    configs = list(cfg.runs())
    workers = threads or thread_cap()
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute, configs, [str(out)] * len(configs)))
    else:
        results = [_execute(c, str(out)) for c in configs]
    failures = {name: err for name, err in results if err is not None}

    run_paths, agg_paths = [], []
    for algo in cfg.algos:
        for topo in cfg.topologies:
            paths = [out / "runs" / f"{algo}__{topo}__seed{s}.csv" for s in cfg.seeds]
            paths = [p for p in paths if p.stem not in failures]
            run_paths += paths
            if paths:
                target = out / "aggregate" / f"{algo}__{topo}.csv"
                aggregate(paths, target)
                agg_paths.append(target)
    if failures:
        (out / "failures.txt").write_text("".join(f"{k}: {v}\n" for k, v in sorted(failures.items())))
    plot_paths = plot_battery(cfg, out) if (cfg.plots if plots is None else plots) else []
    return BatteryResult(out=out, runs=run_paths, aggregates=agg_paths, plots=plot_paths, failures=failures)


@dataclass
class EvalGrid:
    rows: list  # policy names
    columns: list  # environment names
    cells: np.ndarray  # (len(rows), len(columns) + 1); last column is the row sum

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", *self.columns, "sum"])
        for name, row in zip(self.rows, self.cells):
            w.writerow([name, *(_fmt(float(v)) for v in row)])
        return buf.getvalue()


def _check_space(policy, env):
    if isinstance(policy, FactorizedProduct):
        dims = tuple(getattr(c, "n_actions", None) for c in policy.components)
        if dims != tuple(env.action_dims):
            raise SpaceMismatch(f"policy action factors {dims} do not match env {env.action_dims}")
        comps = policy.components
    else:
        if getattr(policy, "n_actions", None) != env.action_dims[0] or len(env.action_dims) != 1:
            raise SpaceMismatch(f"policy has {getattr(policy, 'n_actions', None)} actions, env has {env.action_dims}")
        comps = [policy]
    for c in comps:
        expected = getattr(c, "n_states", None)
        if expected is not None and expected != getattr(env, "n_states", None):
            raise SpaceMismatch(f"tabular policy over {expected} states, env has {getattr(env, 'n_states', None)}")
        if hasattr(c, "obs_dim") and c.obs_dim != env.obs_dim:
            raise SpaceMismatch(f"policy observation length {c.obs_dim}, env has {env.obs_dim}")


def eval_grid(policies, envs, episodes: int = 100, seed: int = 0, row_names=None, col_names=None) -> EvalGrid:
    """Mean discounted return of every policy in every environment, plus a row-sum column.

    ``policies`` is a list of (policy, theta) pairs. Every policy replays the
    same seeded stream in environment e, so identical policies give
    identical rows and each cell is reproducible on its own.
    """
    rows = row_names or [f"policy {k + 1}" for k in range(len(policies))]
    cols = col_names or [f"env {k + 1}" for k in range(len(envs))]
    cells = np.zeros((len(policies), len(envs) + 1))
    for p, (policy, theta) in enumerate(policies):
        for e, env in enumerate(envs):
            _check_space(policy, env)
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), e]))
            total = 0.0
            for _ in range(episodes):
                tau = sample_trajectory(env, policy, theta, rng)
                total += float(np.mean([tau.discounted_return(env.gamma, c) for c in range(env.n_channels)]))
            cells[p, e] = total / episodes
        cells[p, -1] = cells[p, :-1].sum()
    return EvalGrid(rows=rows, columns=cols, cells=cells)


def load_checkpoints(directory, pattern="*.params"):
    """(name, policy, theta) for every parameter file, sorted by name; random-iterate files excluded."""
    out = []
    for path in sorted(Path(directory).glob(pattern)):
        if path.name.endswith(".out.params"):
            continue
        policy, theta = load_params(path)
        out.append((path.stem, policy, theta))
    return out
