"""Per-agent stochastic quantities: policy gradients, importance weights,
momentum estimators, Fisher information matrices and damped natural directions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .envs import enumerate_trajectories
from .errors import DimensionMismatch, SolveFailure
from .policy import FactorizedProduct

LOG_OMEGA_CLIP = 20.0
SOLVE_RTOL = 1e-8
DENSE_SOLVE_MAX = 512
DEFAULT_DAMPING = 1e-3
DEFAULT_BASELINE_ALPHA = 0.05


@dataclass
class Counters:
    """Diagnostic tallies surfaced in the metrics stream."""

    clip_events: int = 0
    solver_iters: int = 0


def score_sum(policy, theta, traj) -> np.ndarray:
    g = np.zeros(policy.d)
    for s, a in traj.steps():
        g += policy.score(theta, s, a)
    return g


def reinforce_grad(policy, theta, traj, baseline: float = 0.0, gamma: float = 0.99, channel: int = 0) -> np.ndarray:
    """REINFORCE with a constant baseline: (sum_h score) * (discounted return - b)."""
    return score_sum(policy, theta, traj) * (traj.discounted_return(gamma, channel) - baseline)


def exact_grad(env, policy, theta, channel: int = 0, enumerated=None) -> np.ndarray:
    """grad V(theta) = E[grad log p(tau | theta) R(tau)], summed over every trajectory."""
    enumerated = enumerate_trajectories(env) if enumerated is None else enumerated
    g = np.zeros(policy.d)
    for e in enumerated:
        traj = e.trajectory
        g += e.probability(policy, theta) * traj.discounted_return(env.gamma, channel) * score_sum(policy, theta, traj)
    return g


def log_importance_ratio(policy, theta_old, theta_new, traj) -> float:
    return float(sum(policy.log_prob(theta_old, s, a) - policy.log_prob(theta_new, s, a) for s, a in traj.steps()))


def importance_weight(policy, theta_old, theta_new, traj, counters: Counters | None = None) -> float:
    """p(tau | theta_old) / p(tau | theta_new), formed in log space and clipped to e^{+-20}."""
    lw = log_importance_ratio(policy, theta_old, theta_new, traj)
    if abs(lw) > LOG_OMEGA_CLIP:
        lw = math.copysign(LOG_OMEGA_CLIP, lw)
        if counters is not None:
            counters.clip_events += 1
    return math.exp(lw)


def momentum_update(beta: float, g_t, v_prev, g_prev_params, omega: float) -> np.ndarray:
    """beta * g_t + (1 - beta) * (v_prev + g_t - omega * g_prev_params).

    ``beta == 1`` returns ``g_t`` unchanged (plain stochastic gradient);
    ``beta == 0`` is the pure recursive (SARAH-type) limb.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    g_t = np.asarray(g_t, dtype=float)
    if beta == 1.0:
        return g_t.copy()
    return beta * g_t + (1.0 - beta) * (v_prev + g_t - omega * g_prev_params)


def baseline_update(b_prev: float, return_new: float, alpha: float = DEFAULT_BASELINE_ALPHA) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * b_prev + alpha * return_new


@dataclass
class FisherEstimate:
    """Symmetric PSD matrix stored as diagonal blocks (one block means dense)."""

    blocks: list
    damping: float = 0.0
    sizes: list = field(init=False)

    def __post_init__(self):
        self.sizes = [b.shape[0] for b in self.blocks]

    @property
    def structure(self) -> str:
        return "dense" if len(self.blocks) == 1 else "block_diagonal"

    @property
    def d(self) -> int:
        return sum(self.sizes)

    def dense(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.blocks) if len(self.blocks) > 1 else self.blocks[0].copy()

    def __add__(self, other):
        if self.sizes != other.sizes:
            raise DimensionMismatch("cannot add Fisher estimates with different block layouts")
        return FisherEstimate([a + b for a, b in zip(self.blocks, other.blocks)], self.damping)

    def scaled(self, c: float):
        return FisherEstimate([c * b for b in self.blocks], self.damping)


def fim_sample(policy, theta, traj) -> FisherEstimate:
    """(1/H) sum_h score score^T over one trajectory's active steps."""
    d = policy.d
    F = np.zeros((d, d))
    for s, a in traj.steps():
        g = policy.score(theta, s, a)
        F += np.outer(g, g)
    return FisherEstimate([F / traj.horizon])


def block_fim_sample(policy: FactorizedProduct, theta, traj) -> FisherEstimate:
    """Per-agent diagonal blocks of the sample FIM; cross-agent blocks are never formed."""
    blocks = [np.zeros((k, k)) for k in policy.block_sizes]
    for s, a in traj.steps():
        for j, g in enumerate(policy.block_scores(theta, s, a)):
            blocks[j] += np.outer(g, g)
    return FisherEstimate([b / traj.horizon for b in blocks])


def fim_exact(env, policy, theta, enumerated=None) -> FisherEstimate:
    enumerated = enumerate_trajectories(env) if enumerated is None else enumerated
    F = np.zeros((policy.d, policy.d))
    for e in enumerated:
        F += e.probability(policy, theta) * fim_sample(policy, theta, e.trajectory).blocks[0]
    return FisherEstimate([0.5 * (F + F.T)])


def _solve_block(A, y, counters, tag):
    ny = np.linalg.norm(y)
    if ny == 0.0:
        return np.zeros_like(y)
    if A.shape[0] <= DENSE_SOLVE_MAX:
        try:
            factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolveFailure(f"{tag}: Cholesky failed ({exc})") from None
        x = scipy.linalg.cho_solve(factor, y)
        iters = 1
        # iterative refinement against rounding in ill-conditioned blocks
        for _ in range(3):
            r = y - A @ x
            if np.linalg.norm(r) <= SOLVE_RTOL * ny:
                break
            x = x + scipy.linalg.cho_solve(factor, r)
            iters += 1
    else:
        calls = [0]

        def cb(_):
            calls[0] += 1

        x, _ = scipy.sparse.linalg.cg(A, y, rtol=0.1 * SOLVE_RTOL, atol=0.0, maxiter=10 * A.shape[0], callback=cb)
        iters = calls[0]
    if counters is not None:
        counters.solver_iters += iters
    rel = np.linalg.norm(A @ x - y) / ny
    if not np.isfinite(rel) or rel > SOLVE_RTOL:
        raise SolveFailure(f"{tag}: relative residual {rel:.3e} exceeds {SOLVE_RTOL:.0e}")
    return x


def natural_direction(F: FisherEstimate, y, epsilon: float = DEFAULT_DAMPING, counters: Counters | None = None,
                      iteration=None) -> np.ndarray:
    """Solve (F + epsilon I) d = y blockwise."""
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    y = np.asarray(y, dtype=float)
    if y.shape != (F.d,):
        raise DimensionMismatch(f"direction has length {y.shape}, Fisher estimate is {F.d}x{F.d}")
    out = np.empty_like(y)
    start = 0
    try:
        for j, block in enumerate(F.blocks):
            k = block.shape[0]
            A = block + epsilon * np.eye(k)
            out[start:start + k] = _solve_block(A, y[start:start + k], counters, f"block {j}")
            start += k
    except SolveFailure as exc:
        if iteration is None:
            raise
        raise SolveFailure(str(exc), iteration=iteration) from None
    return out
