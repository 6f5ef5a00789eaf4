"""Exact tabular BN policy gradient and plain gradient-ascent dynamics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bn_policy import TabularBnPolicy
from .markov_game import CooperativeMarkovGame, evaluate_policy, visitation


def smoothness_step_bound(game: CooperativeMarkovGame) -> float:
    """Largest step size ``(1-gamma)^3 / (8 N (r_max - r_min))``; ``inf`` for constant reward."""
    spread = game.r_max - game.r_min
    if spread <= 0:
        return math.inf
    return (1.0 - game.gamma) ** 3 / (8.0 * game.n_agents * spread)


def _conditional_q(weights: np.ndarray, q: np.ndarray, onehot: np.ndarray):
    """Per-state ``E[Q | group]`` under ``weights``; also returns the group masses."""
    mass = weights @ onehot
    num = (weights * q) @ onehot
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(mass > 0, num / np.where(mass > 0, mass, 1.0), 0.0)
    return cond, mass


def bn_policy_gradient(game: CooperativeMarkovGame, policy: TabularBnPolicy) -> list:
    """``dV(mu)/dtheta^i[s, p, a^i]`` for every agent, same shapes as ``policy.theta``.

    Each entry is ``d(s, p) * pi^i(a^i | s, p) * (Q(s, p, a^i) - Q(s, p))`` with
    ``d(s, p) = d(s) * Pr(p | s)`` and ``d`` the unnormalized discounted
    visitation, which already carries the ``1 / (1 - gamma)`` factor.
    """
    return _gradient_and_value(game, policy)[0]


def _gradient_and_value(game: CooperativeMarkovGame, policy: TabularBnPolicy):
    joint = policy.to_joint_table()
    tables = evaluate_policy(game, joint)
    q = tables.q
    d = visitation(game, joint)
    lay = policy.layout
    grads = []
    for i in range(policy.n_agents):
        n_p, n_a = lay.parent_sizes[i], policy.action_counts[i]
        q_plus, _ = _conditional_q(joint, q, lay.group_matrix(i, with_own=True))
        q_par, mass = _conditional_q(joint, q, lay.group_matrix(i))
        adv = q_plus.reshape(-1, n_p, n_a) - q_par[:, :, None]
        local = policy.local_table(i)
        grads.append(d[:, None, None] * mass[:, :, None] * local * adv)
    return grads, float(game.mu @ tables.v)


@dataclass
class AscentConfig:
    """Settings for ``theta <- theta + step_size * grad``.

    ``step_size=None`` uses the smoothness bound; an explicit value overrides
    it and monotonicity is then only monitored.
    """

    step_size: Optional[float] = None
    max_iters: int = 1000
    grad_tol: float = 1e-8
    log_every: int = 1
    monotone_tol: float = 1e-10

    def resolved_step(self, game: CooperativeMarkovGame) -> float:
        eta = smoothness_step_bound(game) if self.step_size is None else float(self.step_size)
        if math.isinf(eta):
            eta = 1.0
        if not eta > 0:
            raise ValueError(f"step size must be positive, got {eta}")
        return eta


@dataclass
class AscentStep:
    iteration: int
    policy: TabularBnPolicy
    value: float
    grad_norm: float
    monotone: bool
    metrics: dict


def ascend(game: CooperativeMarkovGame, policy: TabularBnPolicy, config: AscentConfig,
           callback: Optional[Callable[[AscentStep], Optional[dict]]] = None) -> list:
    """Run the gradient-ascent dynamics and return the logged trajectory.

    ``callback`` is invoked at every logged iteration and may return extra
    metrics (e.g. Nash-gap, POA) that are stored on the step. Iteration 0 is
    the initial policy. A decrease in value beyond ``monotone_tol`` is flagged
    in ``metrics['monotone_violations']`` but never raises.
    """
    eta = config.resolved_step(game)
    above_bound = eta > smoothness_step_bound(game)
    trajectory = []
    violations = 0
    prev_value = None
    for t in range(config.max_iters + 1):
        grads, value = _gradient_and_value(game, policy)
        grad_norm = max(float(np.max(np.abs(g))) for g in grads)
        if not math.isfinite(grad_norm):
            raise FloatingPointError(f"non-finite gradient at iteration {t}")
        monotone = prev_value is None or value >= prev_value - config.monotone_tol
        violations += not monotone
        prev_value = value
        converged = grad_norm < config.grad_tol
        last = converged or t == config.max_iters
        if t % config.log_every == 0 or last:
            step = AscentStep(t, policy, value, grad_norm, monotone,
                              {"step_size": eta, "above_bound": above_bound,
                               "monotone_violations": violations})
            if callback is not None:
                step.metrics.update(callback(step) or {})
            trajectory.append(step)
        if last:
            break
        policy = policy.with_theta([th + eta * g for th, g in zip(policy.theta, grads)])
    return trajectory
