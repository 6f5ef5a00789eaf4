"""Aloha: islands on a grid sharing a channel with their 4-neighbors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .base import StepResult

SEND, WAIT = 1, 0


@dataclass(frozen=True)
class AlohaSpec:
    """Aloha settings.

    ``per_message_penalty`` charges ``reward_collision`` once per colliding
    message; when false the penalty is charged once per step with any collision.
    ``drop_collided`` removes colliding messages from the backlog.
    """

    grid_shape: tuple = (2, 5)
    max_backlog: int = 5
    new_message_prob: float = 0.6
    reward_success: float = 0.1
    reward_collision: float = -10.0
    episode_length: int = 25
    per_message_penalty: bool = True
    drop_collided: bool = False
    gamma: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(x) for x in self.grid_shape))
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise ValueError(f"grid_shape must be two positive ints, got {self.grid_shape}")
        if self.max_backlog < 1:
            raise ValueError("max_backlog must be positive")
        if not 0.0 <= self.new_message_prob <= 1.0:
            raise ValueError("new_message_prob must be a probability")

    @property
    def n_agents(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    def neighbors(self) -> np.ndarray:
        """Boolean ``(N, N)`` 4-adjacency matrix; agents are numbered row-major."""
        rows, cols = self.grid_shape
        n = rows * cols
        adj = np.zeros((n, n), dtype=bool)
        for k in range(n):
            r, c = divmod(k, cols)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    adj[k, rr * cols + cc] = True
        return adj


@dataclass
class AlohaState:
    backlog: np.ndarray
    t: int = 0


def aloha_step(spec: AlohaSpec, state: AlohaState, joint_action, rng: np.random.Generator,
               neighbors: Optional[np.ndarray] = None):
    """Advance one step. Returns ``(next_state, reward, info)``; ``state`` is not mutated."""
    n = spec.n_agents
    a = np.asarray(joint_action)
    if a.shape != (n,) or np.any((a != SEND) & (a != WAIT)):
        raise ValueError(f"joint action must be {n} values in {{0, 1}}, got {a!r}")
    backlog = np.asarray(state.backlog, dtype=np.int64)
    if backlog.shape != (n,) or backlog.min() < 0 or backlog.max() > spec.max_backlog:
        raise ValueError("backlogs must lie in [0, max_backlog]")
    if neighbors is None:
        neighbors = spec.neighbors()

    # sending with an empty backlog transmits nothing
    senders = (a == SEND) & (backlog > 0)
    collided = senders & (neighbors & senders[None, :]).any(axis=1)
    success = senders & ~collided
    n_coll = int(collided.sum())
    if spec.per_message_penalty:
        penalty = spec.reward_collision * n_coll
    else:
        penalty = spec.reward_collision if n_coll else 0.0
    reward = spec.reward_success * int(success.sum()) + penalty

    nxt = backlog - success
    if spec.drop_collided:
        nxt = nxt - collided
    arrivals = rng.random(n) < spec.new_message_prob
    nxt = np.minimum(nxt + arrivals, spec.max_backlog)
    info = {"collisions": n_coll, "sent": int(senders.sum()), "delivered": int(success.sum())}
    return AlohaState(nxt, state.t + 1), float(reward), info


class AlohaEnv:
    """Partially observable: agent ``i`` observes only its own backlog.

    Observations are one-hot over ``0..max_backlog``.
    """

    n_actions = 2

    def __init__(self, spec: AlohaSpec = AlohaSpec()):
        self.spec = spec
        self.n_agents = spec.n_agents
        self.episode_length = spec.episode_length
        self.obs_dim = spec.max_backlog + 1
        self.state_dim = self.n_agents * self.obs_dim
        self._neighbors = spec.neighbors()
        self.rng = np.random.default_rng()
        self.state = AlohaState(np.zeros(self.n_agents, dtype=np.int64))

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        # initial backlogs: one arrival draw
        backlog = (self.rng.random(self.n_agents) < self.spec.new_message_prob).astype(np.int64)
        self.state = AlohaState(backlog)
        return self.observe()

    def observe(self) -> np.ndarray:
        obs = np.zeros((self.n_agents, self.obs_dim))
        obs[np.arange(self.n_agents), self.state.backlog] = 1.0
        return obs

    def global_state(self) -> np.ndarray:
        return self.observe().ravel()

    def step(self, joint_action) -> StepResult:
        self.state, reward, info = aloha_step(self.spec, self.state, joint_action, self.rng,
                                              self._neighbors)
        return StepResult(self.observe(), reward, self.state.t >= self.episode_length, info)
