"""Coordination Game: binary local states that follow local actions with noise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..markov_game import CooperativeMarkovGame
from .base import StepResult


@dataclass(frozen=True)
class CoordinationGameSpec:
    n_agents: int = 2
    epsilon: float = 0.1
    gamma: float = 0.95
    episode_length: int = 20

    def __post_init__(self):
        if self.n_agents < 2:
            raise ValueError("the coordination game needs at least 2 agents")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be a probability")


def coordination_reward(state: Sequence[int]) -> int:
    """Team reward of a joint local state (a bit vector of length ``N``)."""
    state = list(state)
    n = len(state)
    bound = 1 if n in (2, 3) else 2
    zeros = state.count(0)
    ones = state.count(1)
    if abs(zeros - ones) <= bound:
        return 1 if zeros < ones else 0
    if zeros > ones:
        return 3
    return 2


def _states(n: int) -> np.ndarray:
    return np.array(np.unravel_index(np.arange(2 ** n), (2,) * n)).T


def coordination_game(spec: CoordinationGameSpec = CoordinationGameSpec()) -> CooperativeMarkovGame:
    """Exact tabular model. States and joint actions are bit vectors, agent 0 most significant."""
    n, eps = spec.n_agents, spec.epsilon
    bits = _states(n)
    # p_zero[a_i] = P(s_i' = 0 | a_i)
    p_zero = np.array([1.0 - eps, eps])
    # trans[a, s'] = prod_i P(s'_i | a_i)
    pz = p_zero[bits]  # (A, N) probability that each agent's next local state is 0
    trans_a = np.prod(np.where(bits[None, :, :] == 0, pz[:, None, :], 1.0 - pz[:, None, :]), axis=2)
    S = A = 2 ** n
    transition = np.broadcast_to(trans_a, (S, A, S)).copy()
    transition /= transition.sum(axis=2, keepdims=True)
    reward_s = np.array([coordination_reward(b) for b in bits], dtype=np.float64)
    reward = np.repeat(reward_s[:, None], A, axis=1)
    labels = tuple("".join(map(str, b)) for b in bits)
    return CooperativeMarkovGame(
        action_counts=(2,) * n,
        transition=transition,
        reward=reward,
        gamma=spec.gamma,
        mu=np.full(S, 1.0 / S),
        r_bounds=(0.0, 3.0),
        state_labels=labels,
    )


class CoordinationGameEnv:
    """Sampled version with full observability: every agent sees the whole state."""

    n_actions = 2

    def __init__(self, spec: CoordinationGameSpec = CoordinationGameSpec()):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.episode_length = spec.episode_length
        self.obs_dim = spec.n_agents
        self.state_dim = spec.n_agents
        self.rng = np.random.default_rng()
        self.state = np.zeros(self.n_agents, dtype=np.int64)
        self.t = 0

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.rng.integers(0, 2, size=self.n_agents)
        self.t = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return np.tile(self.state.astype(np.float64), (self.n_agents, 1))

    def global_state(self) -> np.ndarray:
        return self.state.astype(np.float64)

    def step(self, joint_action) -> StepResult:
        a = np.asarray(joint_action)
        if a.shape != (self.n_agents,) or np.any((a != 0) & (a != 1)):
            raise ValueError(f"joint action must be {self.n_agents} values in {{0, 1}}, got {a}")
        reward = float(coordination_reward(self.state))
        p_zero = np.where(a == 0, 1.0 - self.spec.epsilon, self.spec.epsilon)
        self.state = (self.rng.random(self.n_agents) >= p_zero).astype(np.int64)
        self.t += 1
        return StepResult(self.observe(), reward, self.t >= self.episode_length, {})
