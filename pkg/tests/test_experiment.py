import json

import numpy as np
import pytest

from denpg.envs import canonical_tiny_mdp, default_gridworld, make_multitask_suite, sample_trajectory
from denpg.errors import ParseError, SpaceMismatch, ValidationError
from denpg.experiment import (
    config_lines,
    env_to_pairs,
    eval_grid,
    load_checkpoints,
    parse_config,
    read_metrics_csv,
    read_pairs,
    run_battery,
)
from denpg.policy import TabularSoftmax, load_params

MINIMAL = """\
# smallest useful battery
env.kind = tiny_mdp
run.T = 5
run.H = 3
run.n_agents = 3
run.epsilon = 0.1
experiment.algos = mdnpg
experiment.seeds = 0
"""


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_parses(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    assert cfg.algos == ["mdnpg"] and cfg.seeds == [0] and cfg.topologies == ["ring"]
    assert cfg.template.T == 5 and cfg.template.env == {"kind": "tiny_mdp"}
    assert isinstance(cfg.template.epsilon, float)


def test_beta_out_of_range(tmp_path):
    with pytest.raises(ValidationError, match=r"beta ∈ \(0,1\]"):
        parse_config(write(tmp_path, MINIMAL + "run.beta = 1.5\n"))


def test_duplicate_key(tmp_path):
    with pytest.raises(ParseError) as err:
        parse_config(write(tmp_path, MINIMAL + "run.T = 7\n"))
    assert err.value.key == "run.T"
    assert err.value.line == len(MINIMAL.splitlines()) + 1


@pytest.mark.parametrize("line", ["run.colour = red", "env.blah = 1", "nosection = 3", "run.T"])
def test_unknown_or_malformed_lines(line):
    with pytest.raises(ParseError):
        read_pairs(line + "\n")


@pytest.mark.parametrize("extra,needle", [
    ("experiment.algos = ppo\n", "algo"),
    ("experiment.topologies = star\n", "topology"),
    ("run.T = lots\n", "run.T"),
    ("run.debug = 3\n", "run.debug"),
    ("experiment.topologies = custom\n", "edges_file"),
])
def test_validation_messages(tmp_path, extra, needle):
    text = MINIMAL.replace("experiment.algos = mdnpg\n", "") if "algos" in extra else MINIMAL
    text = text.replace("run.T = 5\n", "") if extra.startswith("run.T") else text
    with pytest.raises(ValidationError, match=needle):
        parse_config(write(tmp_path, text + extra))


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        parse_config(tmp_path / "absent.cfg")


def test_edges_file_relative_to_config(tmp_path):
    (tmp_path / "tri.txt").write_text("0 1\n1 2\n2 0\n")
    cfg = parse_config(write(tmp_path, MINIMAL + "topology.edges_file = tri.txt\nexperiment.topologies = custom\n"))
    assert cfg.template.topology_edges == ((0, 1), (1, 2), (2, 0))


def test_config_lines_round_trip(tmp_path):
    text = MINIMAL + "env.n_states = 3\npolicy.family = tabular_softmax\nexperiment.seeds = 1, 2\n"
    text = text.replace("experiment.seeds = 0\n", "")
    cfg = parse_config(write(tmp_path, text))
    again = parse_config(write(tmp_path, "\n".join(config_lines(cfg)) + "\n", "again.cfg"))
    assert again == cfg


def test_inline_tables_via_env_pairs(tmp_path):
    env = canonical_tiny_mdp()
    text = "".join(f"{k} = {json.dumps(v)}\n" for k, v in env_to_pairs(env).items())
    cfg = parse_config(write(tmp_path, text + "run.H = 3\nrun.gamma = 0.9\nrun.n_agents = 2\n"))
    assert cfg.template.env["P"] == env.P.tolist()
    assert cfg.template.env["R"] == env.R.tolist()


def test_single_run_battery(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL))
    res = run_battery(cfg, out=tmp_path / "out")
    assert res.ok
    assert sorted(p.name for p in (tmp_path / "out" / "runs").iterdir()) == ["mdnpg__ring__seed0.csv"]
    assert sorted(p.name for p in (tmp_path / "out" / "aggregate").iterdir()) == ["mdnpg__ring.csv"]
    header = (tmp_path / "out" / "runs" / "mdnpg__ring__seed0.csv").read_text().splitlines()[0]
    assert header == "iteration,avg_return,consensus_err,tracker_err,consensus_residual,stationarity_gap,clip_events,solver_iters"
    manifest = (tmp_path / "out" / "checkpoints" / "mdnpg__ring__seed0.manifest").read_text()
    assert "iteration = 5" in manifest and "seed = 0" in manifest and "algo = mdnpg" in manifest
    policy, theta = load_params(tmp_path / "out" / "checkpoints" / "mdnpg__ring__seed0.params")
    assert isinstance(policy, TabularSoftmax) and theta.shape == (4,)


def test_battery_aggregate_and_determinism(tmp_path):
    text = MINIMAL.replace("experiment.seeds = 0", "experiment.seeds = 0, 1, 2, 3, 4")
    text += "experiment.topologies = ring, fully_connected\n"
    cfg = parse_config(write(tmp_path, text))
    a = run_battery(cfg, out=tmp_path / "a")
    b = run_battery(cfg, out=tmp_path / "b", threads=2)
    assert len(a.runs) == 10 and len(a.aggregates) == 2
    for pa, pb in zip(a.runs + a.aggregates, b.runs + b.aggregates):
        assert pa.name == pb.name
        assert pa.read_bytes() == pb.read_bytes()
    agg = read_metrics_csv(a.aggregates[0])
    assert (agg["iteration_std"] == 0).all()
    np.testing.assert_array_equal(agg["iteration_mean"], [1, 2, 3, 4, 5])
    runs = [read_metrics_csv(p)["avg_return"] for p in a.runs[:5]]
    np.testing.assert_allclose(agg["avg_return_std"], np.std(runs, axis=0), rtol=1e-12)


def test_gridworld_stationarity_column_empty(tmp_path):
    text = "env.kind = gridworld\nenv.size = 3\nenv.n_obstacles = 1\nrun.T = 2\nrun.H = 4\nrun.n_agents = 3\n"
    res = run_battery(parse_config(write(tmp_path, text)), out=tmp_path / "o")
    lines = res.runs[0].read_text().splitlines()
    assert all(line.split(",")[5] == "" for line in lines[1:])


def test_failed_run_is_recorded(tmp_path, monkeypatch):
    import denpg.experiment as ex
    from denpg.errors import SolveFailure

    real = ex.run

    def flaky(config):
        if config.seed == 1:
            raise SolveFailure("boom", iteration=3)
        return real(config)

    monkeypatch.setattr(ex, "run", flaky)
    cfg = parse_config(write(tmp_path, MINIMAL.replace("experiment.seeds = 0", "experiment.seeds = 0, 1")))
    res = run_battery(cfg, out=tmp_path / "o")
    assert not res.ok
    assert list(res.failures) == ["mdnpg__ring__seed1"]
    assert "iteration 3" in (tmp_path / "o" / "failures.txt").read_text()
    assert len(res.runs) == 1 and len(res.aggregates) == 1


def test_plots_are_self_contained_svg(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL + "experiment.plots = true\n"))
    res = run_battery(cfg, out=tmp_path / "a")
    assert [p.name for p in res.plots] == ["ring.svg"]
    svg = res.plots[0].read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    # namespace URIs are fine; nothing may be fetched from outside the file
    assert 'href="http' not in svg and "url(http" not in svg and "<image" not in svg
    again = run_battery(cfg, out=tmp_path / "b")
    assert again.plots[0].read_bytes() == res.plots[0].read_bytes()


def test_eval_grid_single_rollout():
    env = default_gridworld(size=3, n_obstacles=1, layout_seed=0, horizon=5, gamma=0.9)
    pol = TabularSoftmax(9, 4)
    theta = np.random.default_rng(0).normal(size=pol.d)
    grid = eval_grid([(pol, theta)], [env], episodes=1, seed=4)
    tau = sample_trajectory(env, pol, theta, np.random.default_rng(np.random.SeedSequence([4, 0])))
    assert grid.cells.shape == (1, 2)
    assert grid.cells[0, 0] == tau.discounted_return(0.9)
    assert grid.cells[0, 1] == grid.cells[0, 0]


def test_eval_grid_table_shape():
    base = default_gridworld(size=4, n_obstacles=2, layout_seed=0, horizon=8)
    envs = make_multitask_suite(base, 5, seed=1)
    pol = TabularSoftmax(16, 4)
    rng = np.random.default_rng(0)
    thetas = [rng.normal(size=pol.d) for _ in range(5)]
    policies = [(pol, th) for th in thetas] + [(pol, thetas[2])]
    grid = eval_grid(policies, envs, episodes=20, seed=0)
    assert grid.cells.shape == (6, 6)
    np.testing.assert_array_equal(grid.cells[5], grid.cells[2])
    np.testing.assert_allclose(grid.cells[:, -1], grid.cells[:, :-1].sum(axis=1))
    text = grid.to_csv().splitlines()
    assert text[0] == "policy,env 1,env 2,env 3,env 4,env 5,sum"
    assert len(text) == 7


def test_eval_grid_space_mismatch():
    env = default_gridworld(size=3, n_obstacles=0)
    with pytest.raises(SpaceMismatch):
        eval_grid([(TabularSoftmax(16, 4), np.zeros(64))], [env], episodes=1)
    with pytest.raises(SpaceMismatch):
        eval_grid([(TabularSoftmax(9, 2), np.zeros(18))], [env], episodes=1)


def test_load_checkpoints_skips_output_iterates(tmp_path):
    cfg = parse_config(write(tmp_path, MINIMAL.replace("experiment.seeds = 0", "experiment.seeds = 0, 1")))
    run_battery(cfg, out=tmp_path / "o")
    names = [n for n, _, _ in load_checkpoints(tmp_path / "o" / "checkpoints")]
    assert names == ["mdnpg__ring__seed0", "mdnpg__ring__seed1"]
