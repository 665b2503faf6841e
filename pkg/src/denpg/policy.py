"""Stochastic policies over a flat parameter vector.

Policy objects hold only the architecture; the parameter vector ``theta`` is
passed to every call so the optimizer can evaluate many agents' copies with
one policy object. Gradients of the log-density are hand-coded for each
family (the shapes are fixed, so no autodiff is needed).
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .envs import categorical
from .errors import SpaceMismatch

LOG_2PI = math.log(2.0 * math.pi)
INIT_SCALE = 0.05
PARAMS_MAGIC = "denpg-params"


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Policy:
    family = "abstract"
    discrete = True
    d: int

    def init_params(self, rng) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=self.d)

    def probs(self, theta, s) -> np.ndarray:
        raise NotImplementedError

    def log_prob(self, theta, s, a) -> float:
        raise NotImplementedError

    def score(self, theta, s, a) -> np.ndarray:
        raise NotImplementedError

    def sample_action(self, theta, s, rng):
        return categorical(self.probs(theta, s), rng)

    def spec(self) -> dict:
        raise NotImplementedError

    def _check(self, theta):
        if theta.shape != (self.d,):
            raise SpaceMismatch(f"{self.family} expects {self.d} parameters, got shape {theta.shape}")


class _SoftmaxPolicy(Policy):
    """Shared softmax machinery: subclasses supply logits and their backprop."""

    n_actions: int

    def _forward(self, theta, s):
        raise NotImplementedError

    def _backward(self, theta, s, cache, dlogits) -> np.ndarray:
        raise NotImplementedError

    def probs(self, theta, s):
        z, _ = self._forward(theta, s)
        return softmax(z)

    def log_prob(self, theta, s, a):
        z, _ = self._forward(theta, s)
        return float(log_softmax(z)[int(a)])

    def score(self, theta, s, a):
        z, cache = self._forward(theta, s)
        dz = -softmax(z)
        dz[int(a)] += 1.0
        return self._backward(theta, s, cache, dz)


class TabularSoftmax(_SoftmaxPolicy):
    """One logit per (state, action); ``theta[s * A + a]``."""

    family = "tabular_softmax"

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.d = self.n_states * self.n_actions

    def _forward(self, theta, s):
        s = int(s)
        A = self.n_actions
        return theta[s * A:(s + 1) * A], s

    def _backward(self, theta, s, cache, dlogits):
        g = np.zeros(self.d)
        A = self.n_actions
        g[cache * A:(cache + 1) * A] = dlogits
        return g

    def spec(self):
        return {"family": self.family, "n_states": self.n_states, "n_actions": self.n_actions}


def features(s, obs_dim: int) -> np.ndarray:
    """Observation as a float vector; integer states become one-hot."""
    if isinstance(s, (int, np.integer)):
        x = np.zeros(obs_dim)
        x[int(s)] = 1.0
        return x
    x = np.asarray(s, dtype=float).ravel()
    if x.shape != (obs_dim,):
        raise SpaceMismatch(f"expected observation of length {obs_dim}, got {x.shape}")
    return x


class LinearSoftmax(_SoftmaxPolicy):
    """logits = W x + b with W of shape (A, obs_dim)."""

    family = "linear_softmax"

    def __init__(self, obs_dim: int, n_actions: int):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.d = self.n_actions * (self.obs_dim + 1)

    def _unpack(self, theta):
        k = self.n_actions * self.obs_dim
        return theta[:k].reshape(self.n_actions, self.obs_dim), theta[k:]

    def _forward(self, theta, s):
        W, b = self._unpack(theta)
        x = features(s, self.obs_dim)
        return W @ x + b, x

    def _backward(self, theta, s, x, dz):
        return np.concatenate([np.outer(dz, x).ravel(), dz])

    def spec(self):
        return {"family": self.family, "obs_dim": self.obs_dim, "n_actions": self.n_actions}


class _OneHiddenLayer:
    """ReLU trunk: h = relu(W1 x + b1)."""

    def _trunk_size(self):
        return self.hidden * self.obs_dim + self.hidden

    def _trunk(self, theta, s):
        H, O = self.hidden, self.obs_dim
        W1 = theta[:H * O].reshape(H, O)
        b1 = theta[H * O:H * O + H]
        x = features(s, O)
        pre = W1 @ x + b1
        return x, pre, np.maximum(pre, 0.0)

    def _trunk_grad(self, x, pre, dh):
        dpre = dh * (pre > 0.0)
        return np.concatenate([np.outer(dpre, x).ravel(), dpre])


class MLPSoftmax(_OneHiddenLayer, _SoftmaxPolicy):
    """One hidden ReLU layer followed by a softmax head."""

    family = "mlp_softmax"

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 16):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.hidden = int(hidden)
        self.d = self._trunk_size() + self.n_actions * (self.hidden + 1)

    def _head(self, theta):
        k0 = self._trunk_size()
        A, H = self.n_actions, self.hidden
        W2 = theta[k0:k0 + A * H].reshape(A, H)
        return W2, theta[k0 + A * H:]

    def _forward(self, theta, s):
        x, pre, h = self._trunk(theta, s)
        W2, b2 = self._head(theta)
        return W2 @ h + b2, (x, pre, h, W2)

    def _backward(self, theta, s, cache, dz):
        x, pre, h, W2 = cache
        return np.concatenate([self._trunk_grad(x, pre, W2.T @ dz), np.outer(dz, h).ravel(), dz])

    def spec(self):
        return {"family": self.family, "obs_dim": self.obs_dim, "n_actions": self.n_actions,
                "hidden": self.hidden}


class MLPGaussian(_OneHiddenLayer, Policy):
    """One hidden ReLU layer with a diagonal Gaussian head.

    mean = Wmu h + bmu and std = sigma_floor + softplus(Ws h + bs), so the
    standard deviation never drops below ``sigma_floor``.
    """

    family = "mlp_gaussian"
    discrete = False

    def __init__(self, obs_dim: int, act_dim: int = 1, hidden: int = 16, sigma_floor: float = 0.05):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = int(hidden)
        self.sigma_floor = float(sigma_floor)
        self.d = self._trunk_size() + 2 * self.act_dim * (self.hidden + 1)

    def _heads(self, theta):
        k = self._trunk_size()
        K, H = self.act_dim, self.hidden
        Wmu = theta[k:k + K * H].reshape(K, H)
        k += K * H
        bmu = theta[k:k + K]
        k += K
        Ws = theta[k:k + K * H].reshape(K, H)
        k += K * H
        return Wmu, bmu, Ws, theta[k:k + K]

    def mean_std(self, theta, s):
        _, _, h = self._trunk(theta, s)
        Wmu, bmu, Ws, bs = self._heads(theta)
        return Wmu @ h + bmu, self.sigma_floor + softplus(Ws @ h + bs)

    def log_prob(self, theta, s, a):
        mu, sigma = self.mean_std(theta, s)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        z = (a - mu) / sigma
        return float(np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI))

    def score(self, theta, s, a):
        x, pre, h = self._trunk(theta, s)
        Wmu, bmu, Ws, bs = self._heads(theta)
        mu = Wmu @ h + bmu
        zs = Ws @ h + bs
        sigma = self.sigma_floor + softplus(zs)
        a = np.atleast_1d(np.asarray(a, dtype=float))
        diff = a - mu
        dmu = diff / sigma**2
        dzs = (diff**2 / sigma**3 - 1.0 / sigma) * sigmoid(zs)
        dh = Wmu.T @ dmu + Ws.T @ dzs
        return np.concatenate([self._trunk_grad(x, pre, dh), np.outer(dmu, h).ravel(), dmu,
                               np.outer(dzs, h).ravel(), dzs])

    def sample_action(self, theta, s, rng):
        mu, sigma = self.mean_std(theta, s)
        return mu + sigma * rng.standard_normal(self.act_dim)

    def spec(self):
        return {"family": self.family, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "hidden": self.hidden, "sigma_floor": self.sigma_floor}


class FactorizedProduct(Policy):
    """Joint policy pi(a | s) = prod_i pi_i(a_i | s) over independent parameter blocks."""

    family = "factorized_product"

    def __init__(self, components):
        self.components = list(components)
        sizes = [c.d for c in self.components]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.d = int(self.offsets[-1])
        self.discrete = all(c.discrete for c in self.components)

    @property
    def block_sizes(self) -> list[int]:
        return [c.d for c in self.components]

    def block(self, theta, j):
        return theta[self.offsets[j]:self.offsets[j + 1]]

    def log_prob(self, theta, s, a):
        return float(sum(c.log_prob(self.block(theta, j), s, a[j]) for j, c in enumerate(self.components)))

    def block_scores(self, theta, s, a) -> list[np.ndarray]:
        return [c.score(self.block(theta, j), s, a[j]) for j, c in enumerate(self.components)]

    def score(self, theta, s, a):
        return np.concatenate(self.block_scores(theta, s, a))

    def sample_action(self, theta, s, rng):
        return tuple(c.sample_action(self.block(theta, j), s, rng) for j, c in enumerate(self.components))

    def init_params(self, rng):
        return np.concatenate([c.init_params(rng) for c in self.components])

    def spec(self):
        return {"family": self.family, "components": [c.spec() for c in self.components]}


FAMILIES = {
    "tabular_softmax": TabularSoftmax,
    "linear_softmax": LinearSoftmax,
    "mlp_softmax": MLPSoftmax,
    "mlp_gaussian": MLPGaussian,
}


def policy_from_spec(spec: dict) -> Policy:
    spec = dict(spec)
    family = spec.pop("family")
    if family == "factorized_product":
        return FactorizedProduct([policy_from_spec(c) for c in spec["components"]])
    try:
        return FAMILIES[family](**spec)
    except KeyError:
        raise SpaceMismatch(f"unknown policy family {family!r}") from None


def score_bound_check(policy: Policy, theta, states, actions):
    """Largest squared score norm over a finite sample: an empirical stand-in for G."""
    norms = np.array([float(np.dot(g, g)) for g in (policy.score(theta, s, a) for s, a in zip(states, actions))])
    if norms.size == 0:
        return 0.0, {"pairs": 0}
    report = {"pairs": int(norms.size), "mean": float(norms.mean()), "argmax": int(norms.argmax())}
    return float(norms.max()), report


def save_params(path, policy: Policy, theta) -> None:
    """Text header line (family + architecture as JSON) then little-endian float64 values."""
    theta = np.asarray(theta, dtype=float)
    header = json.dumps({"spec": policy.spec(), "d": int(theta.size)}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(f"{PARAMS_MAGIC} {header}\n".encode())
        fh.write(theta.astype("<f8").tobytes())


def load_params(path):
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    magic, _, header = raw[:nl].decode().partition(" ")
    if magic != PARAMS_MAGIC:
        raise SpaceMismatch(f"{path} is not a denpg parameter file")
    meta = json.loads(header)
    theta = np.frombuffer(raw[nl + 1:], dtype="<f8").astype(float)
    if theta.size != meta["d"]:
        raise SpaceMismatch(f"{path}: header says {meta['d']} values, found {theta.size}")
    return policy_from_spec(meta["spec"]), theta
