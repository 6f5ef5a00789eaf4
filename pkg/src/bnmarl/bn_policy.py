"""DAGs over agents and tabular softmax Bayesian-network joint policies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Sequence

import numpy as np

ENUMERATION_LIMIT = 2 ** 20


class DagError(ValueError):
    pass


class Dag:
    """Directed acyclic graph over agents.

    ``adjacency[j, i] == 1`` iff ``j`` is a parent of ``i``. The topological
    order breaks ties by smallest agent index first.
    """

    def __init__(self, adjacency):
        adj = np.array(adjacency, dtype=np.int8)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise DagError(f"adjacency must be square, got shape {adj.shape}")
        if not np.all((adj == 0) | (adj == 1)):
            raise DagError("adjacency must be 0/1")
        if np.any(np.diag(adj)):
            raise DagError("self-loops are not allowed")
        adj.setflags(write=False)
        self.adjacency = adj
        self.topo_order = self._kahn(adj)

    @staticmethod
    def _kahn(adj: np.ndarray) -> tuple:
        n = adj.shape[0]
        indeg = adj.sum(axis=0).astype(int)
        order = []
        ready = [i for i in range(n) if indeg[i] == 0]
        while ready:
            ready.sort()
            j = ready.pop(0)
            order.append(j)
            for i in np.flatnonzero(adj[j]):
                indeg[i] -= 1
                if indeg[i] == 0:
                    ready.append(int(i))
        if len(order) != n:
            raise DagError("adjacency contains a cycle")
        return tuple(order)

    @property
    def n_agents(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def parents(self, i: int) -> tuple:
        return tuple(int(j) for j in np.flatnonzero(self.adjacency[:, i]))

    def to_perm_upper(self):
        """Decompose into ``(perm, upper)`` with ``adjacency = perm.T @ upper @ perm``.

        ``perm[k, agent] = 1`` places ``agent`` at position ``k`` of the
        topological order.
        """
        n = self.n_agents
        perm = np.zeros((n, n), dtype=np.int8)
        perm[np.arange(n), list(self.topo_order)] = 1
        upper = perm @ self.adjacency @ perm.T
        return perm, upper.astype(np.int8)

    @classmethod
    def from_perm_upper(cls, perm, upper) -> "Dag":
        perm = np.asarray(perm)
        upper = np.asarray(upper)
        n = perm.shape[0]
        if not (np.all((perm == 0) | (perm == 1)) and np.all(perm.sum(0) == 1)
                and np.all(perm.sum(1) == 1)):
            raise DagError("perm must be a permutation matrix")
        if upper.shape != (n, n) or np.any(np.tril(upper) != 0):
            raise DagError("upper must be strictly upper triangular")
        return cls(perm.T @ upper @ perm)

    @classmethod
    def empty(cls, n: int) -> "Dag":
        return cls(np.zeros((n, n), dtype=np.int8))

    def __eq__(self, other):
        return isinstance(other, Dag) and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self):
        return hash(self.adjacency.tobytes())

    def __repr__(self):
        edges = [(int(j), int(i)) for j, i in zip(*np.nonzero(self.adjacency))]
        return f"Dag(n={self.n_agents}, edges={edges})"


class Topology(str, Enum):
    UNCORRELATED = "uncorrelated"
    LINE = "line"
    FULLY = "fully"


def fixed_topology(kind, n_agents: int) -> Dag:
    """The three fixed baselines, all with topological order ``(0, ..., N-1)``."""
    kind = Topology(kind)
    if kind is Topology.UNCORRELATED:
        return Dag.empty(n_agents)
    if kind is Topology.LINE:
        return Dag(np.eye(n_agents, k=1, dtype=np.int8))
    return Dag(np.triu(np.ones((n_agents, n_agents), dtype=np.int8), k=1))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class JointLayout:
    """Index maps from flat joint actions to each agent's (parent config, own action).

    Parent configurations are mixed-radix over the parent set sorted by agent
    index, first parent most significant.
    """

    def __init__(self, dag: Dag, action_counts: Sequence[int]):
        self.dag = dag
        self.action_counts = tuple(int(k) for k in action_counts)
        if len(self.action_counts) != dag.n_agents:
            raise DagError("action_counts length must equal the number of agents")
        n_joint = int(np.prod(self.action_counts, dtype=np.int64))
        if n_joint > ENUMERATION_LIMIT:
            raise DagError(f"joint action space {n_joint} exceeds enumeration limit")
        self.n_joint = n_joint
        actions = np.array(np.unravel_index(np.arange(n_joint), self.action_counts)).T
        self.joint_actions = actions
        self.parents = [dag.parents(i) for i in range(dag.n_agents)]
        self.parent_sizes = [
            int(np.prod([self.action_counts[j] for j in ps], dtype=np.int64))
            for ps in self.parents
        ]
        self.parent_index = []
        for ps in self.parents:
            if ps:
                idx = np.ravel_multi_index(tuple(actions[:, j] for j in ps),
                                           tuple(self.action_counts[j] for j in ps))
            else:
                idx = np.zeros(n_joint, dtype=np.int64)
            self.parent_index.append(np.asarray(idx, dtype=np.int64))

    def group_matrix(self, i: int, with_own: bool = False) -> np.ndarray:
        """0/1 matrix ``(A, groups)`` mapping joint actions to agent ``i``'s parent
        configuration, or to (parent configuration, own action) when ``with_own``."""
        key = (i, with_own)
        cache = self.__dict__.setdefault("_groups", {})
        if key not in cache:
            if with_own:
                n_a = self.action_counts[i]
                idx = self.parent_index[i] * n_a + self.joint_actions[:, i]
                size = self.parent_sizes[i] * n_a
            else:
                idx, size = self.parent_index[i], self.parent_sizes[i]
            mat = np.zeros((self.n_joint, size))
            mat[np.arange(self.n_joint), idx] = 1.0
            mat.setflags(write=False)
            cache[key] = mat
        return cache[key]

    def parent_config(self, i: int, parent_actions: Sequence[int]) -> int:
        ps = self.parents[i]
        if len(parent_actions) != len(ps):
            raise DagError(f"agent {i} has {len(ps)} parents, got {len(parent_actions)} actions")
        if not ps:
            return 0
        for j, a in zip(ps, parent_actions):
            if not 0 <= a < self.action_counts[j]:
                raise IndexError(f"action {a} out of range for agent {j}")
        return int(np.ravel_multi_index(tuple(int(a) for a in parent_actions),
                                        tuple(self.action_counts[j] for j in ps)))


@dataclass
class TabularBnPolicy:
    """Softmax local policies ``pi^i(a^i | s, a^{P^i}) ∝ exp(theta^i[s, p, a^i])``.

    ``theta[i]`` has shape ``(S, prod_{j in P^i} |A^j|, |A^i|)``.
    """

    dag: Dag
    action_counts: tuple
    n_states: int
    theta: list

    def __post_init__(self):
        self.action_counts = tuple(int(k) for k in self.action_counts)
        self.theta = [np.array(t, dtype=np.float64) for t in self.theta]
        for i, t in enumerate(self.theta):
            shape = (self.n_states, self.layout.parent_sizes[i], self.action_counts[i])
            if t.shape != shape:
                raise DagError(f"theta[{i}] has shape {t.shape}, expected {shape}")

    @cached_property
    def layout(self) -> JointLayout:
        return JointLayout(self.dag, self.action_counts)

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    def shapes(self) -> list:
        return [(self.n_states, self.layout.parent_sizes[i], k)
                for i, k in enumerate(self.action_counts)]

    @classmethod
    def zeros(cls, dag: Dag, action_counts, n_states: int) -> "TabularBnPolicy":
        layout = JointLayout(dag, action_counts)
        theta = [np.zeros((n_states, layout.parent_sizes[i], k))
                 for i, k in enumerate(layout.action_counts)]
        return cls(dag, layout.action_counts, n_states, theta)

    @classmethod
    def gaussian(cls, dag: Dag, action_counts, n_states: int,
                 rng: np.random.Generator, sigma: float = 0.1) -> "TabularBnPolicy":
        pol = cls.zeros(dag, action_counts, n_states)
        pol.theta = [rng.normal(0.0, sigma, size=t.shape) for t in pol.theta]
        return pol

    def with_theta(self, theta) -> "TabularBnPolicy":
        new = TabularBnPolicy(self.dag, self.action_counts, self.n_states, theta)
        new.__dict__["layout"] = self.layout
        return new

    def local_table(self, i: int) -> np.ndarray:
        """All conditionals of agent ``i`` as an ``(S, P, |A^i|)`` array."""
        return _softmax(self.theta[i])

    def local_policy(self, i: int, state: int, parent_actions: Sequence[int] = ()) -> np.ndarray:
        if not 0 <= state < self.n_states:
            raise IndexError(f"state {state} out of range")
        p = self.layout.parent_config(i, parent_actions)
        return _softmax(self.theta[i][state, p])

    def joint_probability(self, state: int, joint_action: Sequence[int]) -> float:
        if not 0 <= state < self.n_states:
            raise IndexError(f"state {state} out of range")
        if len(joint_action) != self.n_agents:
            raise IndexError("joint action has the wrong length")
        prob = 1.0
        for i in self.dag.topo_order:
            ps = self.layout.parents[i]
            dist = self.local_policy(i, state, [joint_action[j] for j in ps])
            a = int(joint_action[i])
            if not 0 <= a < self.action_counts[i]:
                raise IndexError(f"action {a} out of range for agent {i}")
            prob *= dist[a]
        return float(prob)

    def to_joint_table(self) -> np.ndarray:
        """``pi(a|s)`` for every state and flat joint action, shape ``(S, A)``."""
        lay = self.layout
        table = np.ones((self.n_states, lay.n_joint))
        for i in range(self.n_agents):
            table *= self.local_table(i)[:, lay.parent_index[i], lay.joint_actions[:, i]]
        return table

    def parent_marginal(self, joint_table: np.ndarray, i: int, state: int) -> np.ndarray:
        """Marginal of agent ``i``'s parent actions at ``state`` (flat over parent configs)."""
        lay = self.layout
        return np.bincount(lay.parent_index[i], weights=joint_table[state],
                           minlength=lay.parent_sizes[i])

    def parent_marginals(self, joint_table: np.ndarray, i: int) -> np.ndarray:
        """``(S, P)`` parent marginals for every state at once."""
        return joint_table @ self.layout.group_matrix(i)

    def sample_joint(self, state: int, rng) -> np.ndarray:
        """Ancestral sampling in topological order."""
        rng = np.random.default_rng(rng)
        action = np.zeros(self.n_agents, dtype=np.int64)
        for i in self.dag.topo_order:
            dist = self.local_policy(i, state, [action[j] for j in self.layout.parents[i]])
            action[i] = rng.choice(len(dist), p=dist)
        return action

    def to_json(self) -> str:
        lay = self.layout
        return json.dumps({
            "dag": self.dag.adjacency.tolist(),
            "action_counts": list(self.action_counts),
            "n_states": self.n_states,
            "layout": {
                "parents": [list(p) for p in lay.parents],
                "theta_shapes": [list(s) for s in self.shapes()],
                "parent_radix": "mixed, parents sorted by agent index, first most significant",
            },
            "theta": [t.ravel().tolist() for t in self.theta],
        })

    @classmethod
    def from_json(cls, text: str) -> "TabularBnPolicy":
        doc = json.loads(text)
        dag = Dag(doc["dag"])
        shapes = doc["layout"]["theta_shapes"]
        theta = [np.asarray(t, dtype=np.float64).reshape(s)
                 for t, s in zip(doc["theta"], shapes)]
        return cls(dag, tuple(doc["action_counts"]), int(doc["n_states"]), theta)
