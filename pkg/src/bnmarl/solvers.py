"""Exact oracles: optimal joint value, per-agent best responses, Nash-gap and POA."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bn_policy import TabularBnPolicy
from .markov_game import CooperativeMarkovGame, evaluate_policy


class UndefinedMetricError(ArithmeticError):
    pass


def solve_mdp(P: np.ndarray, R: np.ndarray, gamma: float, tol: float = 1e-10):
    """Optimal values of a finite MDP ``P[x, a, x']``, ``R[x, a]``.

    Howard policy iteration with exact evaluation, followed by value-iteration
    sweeps until the Bellman-optimality residual is below ``tol * (1-gamma)/gamma``.
    Returns ``(v, greedy_actions)``.
    """
    X = P.shape[0]
    policy = np.argmax(R, axis=1)
    rows = np.arange(X)
    v = np.zeros(X)
    for _ in range(10_000):
        P_pi = P[rows, policy]
        v = np.linalg.solve(np.eye(X) - gamma * P_pi, R[rows, policy])
        q = R + gamma * P @ v
        best = np.argmax(q, axis=1)
        improve = q[rows, best] > q[rows, policy] + 1e-12
        if not improve.any():
            break
        policy = np.where(improve, best, policy)
    stop = tol * (1 - gamma) / gamma if gamma > 0 else tol
    for _ in range(100_000):
        q = R + gamma * P @ v
        new = q.max(axis=1)
        residual = np.max(np.abs(new - v))
        v = new
        if residual < stop:
            break
    return v, np.argmax(R + gamma * P @ v, axis=1)


def optimal_value(game: CooperativeMarkovGame) -> float:
    """``max_pi V_pi(mu)`` over general joint policies."""
    v, _ = solve_mdp(game.transition, game.reward, game.gamma)
    return float(game.mu @ v)


@dataclass(frozen=True)
class AugmentedMdp:
    """Agent ``i``'s MDP on augmented states ``(s, p)`` with everyone else fixed.

    Augmented state index is ``s * n_parent_configs + p``.
    """

    agent: int
    n_parent_configs: int
    transition: np.ndarray  # (S*P, A_i, S*P)
    reward: np.ndarray  # (S*P, A_i)
    mu: np.ndarray  # (S*P,)
    gamma: float


def augmented_mdp(game: CooperativeMarkovGame, policy: TabularBnPolicy, agent: int) -> AugmentedMdp:
    lay = policy.layout
    S = game.n_states
    n_p, n_a = lay.parent_sizes[agent], policy.action_counts[agent]
    joint = policy.to_joint_table()
    onehot = lay.group_matrix(agent, with_own=True)

    mass = joint @ onehot  # Pr(p, a^i | s), strictly positive under softmax
    if np.any(mass <= 0):
        raise ArithmeticError("zero-probability (parent, action) pair; conditional undefined")
    reward = ((joint * game.reward) @ onehot) / mass
    flow = np.einsum("sa,sat,ag->sgt", joint, game.transition, onehot) / mass[:, :, None]
    parent_marg = policy.parent_marginals(joint, agent)  # (S', P')
    # (s, p, a) -> (s', p') = flow(s, (p,a), s') * Pr(p' | s')
    trans = flow[:, :, :, None] * parent_marg[None, None, :, :]
    trans = trans.reshape(S, n_p, n_a, S * n_p).reshape(S * n_p, n_a, S * n_p)
    reward = reward.reshape(S * n_p, n_a)
    mu = (game.mu[:, None] * parent_marg).reshape(S * n_p)
    return AugmentedMdp(agent, n_p, trans, reward, mu, game.gamma)


def best_response_value(game: CooperativeMarkovGame, policy: TabularBnPolicy, agent: int) -> float:
    """Best value agent ``agent`` can reach by changing only its own local policy.

    The deviation class is all maps from (state, parent actions) to
    distributions over the agent's actions, so the DAG is kept fixed.
    """
    mdp = augmented_mdp(game, policy, agent)
    v, _ = solve_mdp(mdp.transition, mdp.reward, mdp.gamma)
    return float(mdp.mu @ v)


def nash_gap(game: CooperativeMarkovGame, policy: TabularBnPolicy, value: float | None = None) -> float:
    if value is None:
        value = float(game.mu @ evaluate_policy(game, policy.to_joint_table()).v)
    gap = max(best_response_value(game, policy, i) for i in range(policy.n_agents)) - value
    if gap < -1e-8:
        raise ArithmeticError(f"best response below current value by {-gap:.3e}")
    return max(gap, 0.0)


def poa(game: CooperativeMarkovGame, policy: TabularBnPolicy, value: float | None = None,
        v_star: float | None = None) -> float:
    """``V_pi(mu) / V*(mu)``."""
    if v_star is None:
        v_star = optimal_value(game)
    if v_star == 0:
        raise UndefinedMetricError("optimal value is zero; POA undefined")
    if value is None:
        value = float(game.mu @ evaluate_policy(game, policy.to_joint_table()).v)
    if game.r_min < 0:
        warnings.warn("negative rewards: POA is not confined to [0, 1]", RuntimeWarning)
    return value / v_star
