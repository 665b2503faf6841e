import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from denpg.errors import SpaceMismatch
from denpg.policy import (
    FactorizedProduct,
    LinearSoftmax,
    MLPGaussian,
    MLPSoftmax,
    TabularSoftmax,
    load_params,
    policy_from_spec,
    save_params,
    score_bound_check,
    softplus,
)


def unit_gaussian(obs_dim=3, hidden=4):
    """Gaussian head with mean 0 and std exactly 1 at every state."""
    pol = MLPGaussian(obs_dim, 1, hidden=hidden, sigma_floor=0.05)
    theta = np.random.default_rng(0).normal(size=pol.d)
    k = pol._trunk_size()
    theta[k:] = 0.0
    theta[-1] = math.log(math.expm1(0.95))  # softplus^-1(0.95), floor 0.05 on top
    return pol, theta


def test_tabular_uniform_log_prob():
    pol = TabularSoftmax(3, 4)
    for s in range(3):
        for a in range(4):
            assert pol.log_prob(np.zeros(pol.d), s, a) == pytest.approx(math.log(0.25), abs=1e-15)


def test_tabular_two_logit_log_prob():
    pol = TabularSoftmax(1, 2)
    lp = pol.log_prob(np.array([1.0, 0.0]), 0, 0)
    assert lp == pytest.approx(math.log(math.e / (math.e + 1)), abs=1e-15)
    assert lp == pytest.approx(-0.3133, abs=1e-4)


def test_gaussian_standard_normal_log_prob():
    pol, theta = unit_gaussian()
    mu, sigma = pol.mean_std(theta, np.array([0.2, -0.1, 0.7]))
    assert mu[0] == 0.0
    assert sigma[0] == pytest.approx(1.0, abs=1e-14)
    assert pol.log_prob(theta, np.array([0.2, -0.1, 0.7]), 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert -0.5 * math.log(2 * math.pi) == pytest.approx(-0.9189, abs=1e-4)


def test_tabular_score_example():
    pol = TabularSoftmax(3, 2)
    g = pol.score(np.zeros(pol.d), 1, 0)
    np.testing.assert_array_equal(g, [0.0, 0.0, 0.5, -0.5, 0.0, 0.0])


def softmax_policies():
    return [
        (TabularSoftmax(3, 4), 1),
        (LinearSoftmax(5, 3), np.array([0.3, -1.0, 0.5, 2.0, 0.1])),
        (MLPSoftmax(4, 3, hidden=6), np.array([0.5, -0.2, 1.0, 0.3])),
        (FactorizedProduct([TabularSoftmax(3, 2), TabularSoftmax(3, 3)]), 2),
    ]


@pytest.mark.parametrize("idx", range(4))
def test_normalization_and_zero_mean_score(idx):
    pol, s = softmax_policies()[idx]
    theta = np.random.default_rng(idx).normal(size=pol.d)
    if isinstance(pol, FactorizedProduct):
        actions = [(i, j) for i in range(2) for j in range(3)]
        probs = [math.exp(pol.log_prob(theta, s, a)) for a in actions]
    else:
        actions = list(range(pol.n_actions))
        probs = pol.probs(theta, s)
        assert (probs > 0).all()
    assert abs(sum(probs) - 1) < 1e-10
    mean_score = sum(p * pol.score(theta, s, a) for p, a in zip(probs, actions))
    assert np.abs(mean_score).max() < 1e-10


def _fd_check(pol, theta, s, a, eps=1e-5):
    g = pol.score(theta, s, a)
    for k in range(pol.d):
        e = np.zeros(pol.d)
        e[k] = eps
        fd = (pol.log_prob(theta + e, s, a) - pol.log_prob(theta - e, s, a)) / (2 * eps)
        assert abs(fd - g[k]) <= 1e-5 * max(1.0, abs(g[k])), (k, fd, g[k])


@pytest.mark.parametrize("case", range(100))
def test_score_matches_finite_differences(case):
    rng = np.random.default_rng(1000 + case)
    kind = case % 5
    if kind == 0:
        pol = TabularSoftmax(4, 3)
        s, a = int(rng.integers(4)), int(rng.integers(3))
    elif kind == 1:
        pol = LinearSoftmax(3, 4)
        s, a = rng.normal(size=3), int(rng.integers(4))
    elif kind == 2:
        pol = MLPSoftmax(3, 3, hidden=5)
        s, a = rng.normal(size=3), int(rng.integers(3))
    elif kind == 3:
        pol = MLPGaussian(2, 2, hidden=4, sigma_floor=0.1)
        s, a = rng.normal(size=2), rng.normal(size=2)
    else:
        pol = FactorizedProduct([TabularSoftmax(3, 2), LinearSoftmax(3, 2)])
        s, a = int(rng.integers(3)), (int(rng.integers(2)), int(rng.integers(2)))
    theta = rng.normal(size=pol.d)
    _fd_check(pol, theta, s, a)


def test_point_mass_sampling():
    pol = TabularSoftmax(1, 3)
    theta = np.array([0.0, 50.0, 0.0])
    rng = np.random.default_rng(0)
    draws = [pol.sample_action(theta, 0, rng) for _ in range(10_000)]
    assert set(draws) == {1}


def test_uniform_sampling_frequencies():
    pol = TabularSoftmax(1, 4)
    rng = np.random.default_rng(5)
    N = 100_000
    counts = np.bincount([pol.sample_action(np.zeros(4), 0, rng) for _ in range(N)], minlength=4)
    sd = math.sqrt(N * 0.25 * 0.75)
    assert np.abs(counts - N / 4).max() < 3 * sd


def test_gaussian_sample_mean():
    pol = MLPGaussian(2, 1, hidden=4, sigma_floor=0.05)
    theta = np.random.default_rng(2).normal(size=pol.d)
    s = np.array([0.3, -0.6])
    mu, sigma = pol.mean_std(theta, s)
    rng = np.random.default_rng(9)
    N = 50_000
    x = np.array([pol.sample_action(theta, s, rng)[0] for _ in range(N)])
    assert abs(x.mean() - mu[0]) < 3 * sigma[0] / math.sqrt(N)


def test_sampling_is_deterministic_per_stream():
    pol = MLPSoftmax(3, 4, hidden=5)
    theta = np.random.default_rng(0).normal(size=pol.d)
    s = np.ones(3)
    a = [pol.sample_action(theta, s, np.random.default_rng(17)) for _ in range(3)]
    assert len(set(a)) == 1


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), a0=st.integers(0, 1), a1=st.integers(0, 2))
def test_factorized_log_prob_is_sum(seed, a0, a1):
    parts = [TabularSoftmax(2, 2), TabularSoftmax(2, 3)]
    pol = FactorizedProduct(parts)
    theta = np.random.default_rng(seed).normal(size=pol.d) * 2
    s = seed % 2
    expected = parts[0].log_prob(pol.block(theta, 0), s, a0) + parts[1].log_prob(pol.block(theta, 1), s, a1)
    assert pol.log_prob(theta, s, (a0, a1)) == expected
    assert pol.block_sizes == [4, 6]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.1, 50.0))
def test_gaussian_sigma_floor(seed, scale):
    pol = MLPGaussian(3, 2, hidden=4, sigma_floor=0.05)
    rng = np.random.default_rng(seed)
    theta = -np.abs(rng.normal(size=pol.d)) * scale
    _, sigma = pol.mean_std(theta, rng.normal(size=3))
    assert (sigma >= 0.05).all()


def test_softplus_is_stable():
    assert softplus(800.0) == 800.0
    assert softplus(-800.0) == 0.0


def test_score_bound_check_tabular():
    pol = TabularSoftmax(3, 2)
    states = [0, 1, 2, 0, 1]
    actions = [0, 1, 1, 0, 0]
    G, report = score_bound_check(pol, np.zeros(pol.d), states, actions)
    assert G == pytest.approx(0.5, abs=1e-15)
    assert report["pairs"] == 5
    rng = np.random.default_rng(4)
    G, _ = score_bound_check(pol, rng.normal(size=pol.d), states, actions)
    assert G <= 2.0


def test_score_bound_check_saturated_and_gaussian():
    pol = TabularSoftmax(1, 2)
    G, _ = score_bound_check(pol, np.array([60.0, -60.0]), [0, 0], [0, 0])
    assert G < 1e-40
    g = MLPGaussian(2, 1, hidden=3, sigma_floor=0.1)
    rng = np.random.default_rng(0)
    theta = rng.normal(size=g.d)
    states = [rng.normal(size=2) for _ in range(50)]
    G, _ = score_bound_check(g, theta, states, [g.sample_action(theta, s, rng) for s in states])
    assert math.isfinite(G)


@pytest.mark.parametrize("pol", [
    TabularSoftmax(3, 2), LinearSoftmax(4, 3), MLPSoftmax(2, 3, hidden=5), MLPGaussian(2, 1, hidden=3),
    FactorizedProduct([TabularSoftmax(2, 2), MLPSoftmax(2, 2, hidden=3)]),
])
def test_params_round_trip(tmp_path, pol):
    theta = np.random.default_rng(1).normal(size=pol.d)
    path = tmp_path / "p.params"
    save_params(path, pol, theta)
    back, theta2 = load_params(path)
    assert back.spec() == pol.spec()
    assert theta2.tobytes() == theta.tobytes()
    assert policy_from_spec(pol.spec()).d == pol.d


def test_bad_params_file(tmp_path):
    path = tmp_path / "bad.params"
    path.write_bytes(b"nope {}\n")
    with pytest.raises(SpaceMismatch):
        load_params(path)


def test_unknown_family_rejected():
    with pytest.raises(SpaceMismatch):
        policy_from_spec({"family": "bogus"})
