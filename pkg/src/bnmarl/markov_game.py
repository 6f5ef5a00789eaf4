"""Finite cooperative Markov games and exact policy evaluation.

Joint actions are flattened mixed-radix with agent 0 as the most significant
digit, so a joint action ``(a0, a1, ..., aN-1)`` over action counts
``(k0, ..., kN-1)`` has index ``np.ravel_multi_index(a, counts)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

ITERATIVE_STATE_THRESHOLD = 4096


class GameError(ValueError):
    """Raised for malformed games or tables that do not match a game."""


@dataclass(frozen=True, eq=False)
class CooperativeMarkovGame:
    """A cooperative Markov game with a shared team reward.

    Args:
        action_counts: number of local actions per agent.
        transition: array ``(S, A, S)`` with ``P(s' | s, a)``.
        reward: array ``(S, A)`` with ``r(s, a)``.
        gamma: discount in ``[0, 1)``.
        mu: initial state distribution of length ``S``.
        r_bounds: declared ``(r_min, r_max)``; inferred from ``reward`` if omitted.
        state_labels: optional human-readable labels, one per state.
    """

    action_counts: tuple
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    mu: np.ndarray
    r_bounds: Optional[tuple] = None
    state_labels: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        counts = tuple(int(k) for k in self.action_counts)
        object.__setattr__(self, "action_counts", counts)
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        mu = np.array(self.mu, dtype=np.float64)
        for arr in (P, R, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "mu", mu)

        if not counts or min(counts) < 1:
            raise GameError(f"action counts must be positive, got {counts}")
        n_joint = int(np.prod(counts))
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[1] != n_joint:
            raise GameError(
                f"transition must have shape (S, {n_joint}, S), got {P.shape}")
        S = P.shape[0]
        if R.shape != (S, n_joint):
            raise GameError(f"reward must have shape ({S}, {n_joint}), got {R.shape}")
        if mu.shape != (S,):
            raise GameError(f"mu must have shape ({S},), got {mu.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise GameError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
            raise GameError("transition rows must be non-negative and sum to 1")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
            raise GameError("mu must be a probability distribution")
        if not np.all(np.isfinite(R)):
            raise GameError("reward must be finite")

        if self.r_bounds is None:
            bounds = (float(R.min()), float(R.max()))
        else:
            bounds = (float(self.r_bounds[0]), float(self.r_bounds[1]))
            if bounds[0] > bounds[1] or R.min() < bounds[0] or R.max() > bounds[1]:
                raise GameError(f"reward entries fall outside declared bounds {bounds}")
        object.__setattr__(self, "r_bounds", bounds)
        if self.state_labels is not None:
            labels = tuple(str(x) for x in self.state_labels)
            if len(labels) != S:
                raise GameError("state_labels must have one entry per state")
            object.__setattr__(self, "state_labels", labels)

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_joint_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def r_min(self) -> float:
        return self.r_bounds[0]

    @property
    def r_max(self) -> float:
        return self.r_bounds[1]

    @cached_property
    def joint_actions(self) -> np.ndarray:
        """All joint actions as an ``(A, N)`` integer array in index order."""
        return np.array(np.unravel_index(np.arange(self.n_joint_actions),
                                         self.action_counts)).T

    def joint_index(self, joint_action: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in joint_action),
                                        self.action_counts))

    def to_json(self) -> str:
        doc = {
            "n_agents": self.n_agents,
            "action_counts": list(self.action_counts),
            "states": list(self.state_labels) if self.state_labels else self.n_states,
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
            "gamma": self.gamma,
            "mu": self.mu.tolist(),
            "r_bounds": list(self.r_bounds),
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "CooperativeMarkovGame":
        doc = json.loads(text)
        counts = tuple(doc["action_counts"])
        if doc.get("n_agents", len(counts)) != len(counts):
            raise GameError("n_agents does not match action_counts")
        states = doc["states"]
        labels = None if isinstance(states, int) else tuple(states)
        S = states if isinstance(states, int) else len(states)
        A = int(np.prod(counts))
        return cls(
            action_counts=counts,
            transition=np.asarray(doc["transition"], dtype=np.float64).reshape(S, A, S),
            reward=np.asarray(doc["reward"], dtype=np.float64).reshape(S, A),
            gamma=float(doc["gamma"]),
            mu=np.asarray(doc["mu"], dtype=np.float64),
            r_bounds=tuple(doc["r_bounds"]) if "r_bounds" in doc else None,
            state_labels=labels,
        )


@dataclass(frozen=True)
class ValueTables:
    v: np.ndarray  # (S,)
    q: np.ndarray  # (S, A)


def check_joint_table(game: CooperativeMarkovGame, joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.shape != (game.n_states, game.n_joint_actions):
        raise GameError(
            f"joint table shape {joint.shape} does not match game "
            f"({game.n_states}, {game.n_joint_actions})")
    if np.any(joint < -1e-15) or np.max(np.abs(joint.sum(axis=1) - 1.0)) > 1e-10:
        raise GameError("joint table rows must be distributions")
    return joint


def policy_transition(game: CooperativeMarkovGame, joint: np.ndarray) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)``."""
    return np.einsum("sa,sat->st", joint, game.transition)


def _solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Solves (I - M) x = b; M has spectral radius <= gamma < 1.
    n = M.shape[0]
    if n <= ITERATIVE_STATE_THRESHOLD:
        x = np.linalg.solve(np.eye(n) - M, b)
    else:
        x = b.copy()
        for _ in range(100_000):
            nxt = b + M @ x
            if np.max(np.abs(nxt - x)) < 1e-13:
                x = nxt
                break
            x = nxt
    residual = np.max(np.abs(x - M @ x - b)) if n else 0.0
    if residual > 1e-6:
        raise ArithmeticError(f"linear solve residual {residual:.3e} exceeds 1e-6")
    return x


def evaluate_policy(game: CooperativeMarkovGame, joint: np.ndarray) -> ValueTables:
    """Exact ``V_pi`` and ``Q_pi`` from the Bellman evaluation equations."""
    joint = check_joint_table(game, joint)
    r_pi = np.sum(joint * game.reward, axis=1)
    v = _solve(game.gamma * policy_transition(game, joint), r_pi)
    q = game.reward + game.gamma * game.transition @ v
    return ValueTables(v=v, q=q)


def visitation(game: CooperativeMarkovGame, joint: np.ndarray) -> np.ndarray:
    """Unnormalized discounted state visitation ``d = mu + gamma P_pi^T d``.

    Sums to ``1 / (1 - gamma)``.
    """
    joint = check_joint_table(game, joint)
    P_pi = policy_transition(game, joint)
    return _solve(game.gamma * P_pi.T, game.mu)


def value_from_start(game: CooperativeMarkovGame, joint: np.ndarray) -> float:
    return float(game.mu @ evaluate_policy(game, joint).v)


def random_game(rng: np.random.Generator, n_states: int, action_counts: Sequence[int],
                gamma: float = 0.9, reward_range=(0.0, 1.0)) -> CooperativeMarkovGame:
    """Dense random game with Dirichlet transitions; used by tests and benchmarks."""
    A = int(np.prod(action_counts))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, A))
    lo, hi = reward_range
    R = rng.uniform(lo, hi, size=(n_states, A))
    mu = rng.dirichlet(np.ones(n_states))
    return CooperativeMarkovGame(tuple(action_counts), P, R, gamma, mu,
                                 r_bounds=(lo, hi))
