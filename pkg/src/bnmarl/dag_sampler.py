"""Differentiable, observation-conditioned DAG sampling.

A DAG is assembled as ``G = perm^T @ U @ perm`` where ``perm[k, agent] = 1``
puts ``agent`` at position ``k`` of the ordering and ``U`` is a strictly upper
triangular 0/1 edge matrix. Edges come from straight-through Gumbel-Softmax
over two-way (edge, no-edge) logits; the ordering from Gumbel-Sinkhorn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import MLP, Tensor
from .bn_policy import Dag, Topology, fixed_topology


def _check_finite(x: Tensor, what: str):
    if not np.all(np.isfinite(x.data)):
        raise ValueError(f"non-finite {what}")


def _upper_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)


def sample_edges(logits, temperature: float, rng: np.random.Generator, hard: bool = True,
                 noise: Optional[np.ndarray] = None):
    """Edge matrix from logits of shape ``(..., N, N, 2)``; channel 0 scores "edge".

    Returns ``(U, soft, noise)``. ``U`` carries exact 0/1 values when ``hard``
    (gradients flow through ``soft``), otherwise equals ``soft``. Only
    strictly-upper-triangular slots can be non-zero.
    """
    logits = ad.as_tensor(logits)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(logits, "edge logits")
    if noise is None:
        noise = rng.gumbel(size=logits.shape)
    probs = ad.softmax((logits + noise) * (1.0 / temperature), axis=-1)
    n = logits.shape[-2]
    mask = _upper_mask(n)
    soft = probs[..., 0] * mask
    if not hard:
        return soft, soft, noise
    hard_vals = (np.argmax(logits.data + noise, axis=-1) == 0).astype(np.float64) * mask
    return ad.straight_through(hard_vals, soft), soft, noise


def sinkhorn(log_alpha, iters: int) -> Tensor:
    """Alternate row and column normalization in log space; returns ``exp``."""
    if iters < 1:
        raise ValueError("sinkhorn needs at least one iteration")
    x = ad.as_tensor(log_alpha)
    for _ in range(iters):
        x = x - ad.logsumexp(x, axis=-1, keepdims=True)
        x = x - ad.logsumexp(x, axis=-2, keepdims=True)
    return ad.exp(x)


def greedy_assignment(scores: np.ndarray) -> np.ndarray:
    """Row-by-row argmax with used columns masked, for the last two axes."""
    scores = np.asarray(scores, dtype=np.float64)
    flat = scores.reshape(-1, *scores.shape[-2:])
    out = np.zeros_like(flat)
    n = flat.shape[-1]
    for b in range(flat.shape[0]):
        used = np.zeros(n, dtype=bool)
        for r in range(n):
            row = np.where(used, -np.inf, flat[b, r])
            c = int(np.argmax(row))
            out[b, r, c] = 1.0
            used[c] = True
    return out.reshape(scores.shape)


def hungarian_assignment(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    flat = scores.reshape(-1, *scores.shape[-2:])
    out = np.zeros_like(flat)
    for b in range(flat.shape[0]):
        rows, cols = linear_sum_assignment(flat[b], maximize=True)
        out[b, rows, cols] = 1.0
    return out.reshape(scores.shape)


def sample_permutation(logits, iters: int, temperature: float, rng: np.random.Generator,
                       hard: bool = True, noise: Optional[np.ndarray] = None,
                       assignment: str = "greedy"):
    """Permutation from ``(..., N, N)`` scores (``logits[k, j]``: agent ``j`` at position ``k``).

    Returns ``(perm, soft, noise)`` with ``soft`` doubly stochastic up to the
    Sinkhorn tolerance and ``perm`` an exact permutation (straight-through) when ``hard``.
    """
    logits = ad.as_tensor(logits)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_finite(logits, "permutation logits")
    if noise is None:
        noise = rng.gumbel(size=logits.shape)
    soft = sinkhorn((logits + noise) * (1.0 / temperature), iters)
    if not hard:
        return soft, soft, noise
    decode = greedy_assignment if assignment == "greedy" else hungarian_assignment
    return ad.straight_through(decode(soft.data), soft), soft, noise


def assemble_adjacency(perm, upper) -> Tensor:
    """Differentiable ``perm^T @ upper @ perm`` (batched over leading axes)."""
    perm = ad.as_tensor(perm)
    return ad.matmul(ad.matmul(ad.transpose(perm), upper), perm)


def assemble_dag(perm, upper) -> Dag:
    return Dag.from_perm_upper(np.rint(np.asarray(perm)).astype(np.int8),
                               np.rint(np.asarray(upper)).astype(np.int8))


def dag_density(G) -> float:
    """Edge count over the maximum ``N(N-1)/2``; accepts a ``Dag`` or a (soft) adjacency."""
    adj = G.adjacency if isinstance(G, Dag) else np.asarray(G.data if isinstance(G, Tensor) else G)
    n = adj.shape[-1]
    if n < 2:
        raise ValueError("density needs at least 2 agents")
    return float(2.0 * adj.sum() / (n * (n - 1)))


def soft_density(adjacency: Tensor) -> Tensor:
    """Per-sample density of a batched ``(..., N, N)`` adjacency tensor."""
    n = adjacency.shape[-1]
    if n < 2:
        raise ValueError("density needs at least 2 agents")
    return ad.sum_(ad.sum_(adjacency, axis=-1), axis=-1) * (2.0 / (n * (n - 1)))


def density_penalty(soft_adjacency, eta: float, alpha: float) -> Tensor:
    """``alpha * |rho - eta|`` averaged over any batch axes."""
    if alpha < 0 or not 0.0 <= eta <= 1.0:
        raise ValueError("need alpha >= 0 and eta in [0, 1]")
    rho = soft_density(ad.as_tensor(soft_adjacency))
    return ad.mean(ad.abs_(rho - eta)) * alpha


@dataclass(frozen=True)
class DensitySchedule:
    """Three-phase annealing of the density threshold and penalty weight.

    Boundaries ``a <= b <= c`` are percentages of total steps. Threshold stays
    at 1 until ``a``, then drops to 0 in ``eta_steps`` equal decrements by ``b``.
    Weight stays at ``alpha_lo`` until ``b``, then rises to ``alpha_hi`` in
    ``alpha_steps`` equal increments by ``c``.
    """

    a: float = 20.0
    b: float = 60.0
    c: float = 90.0
    eta_steps: int = 10
    alpha_steps: int = 10
    alpha_lo: float = 0.1
    alpha_hi: float = 1.0

    def __post_init__(self):
        if not 0 <= self.a <= self.b <= self.c <= 100:
            raise ValueError(f"need 0 <= a <= b <= c <= 100, got {self.a}, {self.b}, {self.c}")
        if self.eta_steps < 1 or self.alpha_steps < 1:
            raise ValueError("step counts must be positive")
        if self.alpha_lo < 0 or self.alpha_hi < 0:
            raise ValueError("alpha must be non-negative")

    @classmethod
    def constant(cls, eta: float = 1.0, alpha: float = 0.0) -> "ConstantSchedule":
        return ConstantSchedule(eta, alpha)


@dataclass(frozen=True)
class ConstantSchedule:
    eta: float = 1.0
    alpha: float = 0.0


def schedule_at(schedule, step: int, total_steps: int) -> tuple:
    """``(eta, alpha)`` at ``step`` out of ``total_steps``."""
    if not 0 <= step <= total_steps or total_steps <= 0:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if isinstance(schedule, ConstantSchedule):
        return schedule.eta, schedule.alpha
    pct = 100.0 * step / total_steps
    s = schedule
    if pct < s.a:
        eta = 1.0
    elif pct >= s.b:
        eta = 0.0
    else:
        k = math.floor((pct - s.a) / (s.b - s.a) * s.eta_steps)
        eta = 1.0 - k / s.eta_steps
    if pct < s.b:
        alpha = s.alpha_lo
    elif pct >= s.c:
        alpha = s.alpha_hi
    else:
        k = math.floor((pct - s.b) / (s.c - s.b) * s.alpha_steps)
        alpha = s.alpha_lo + (s.alpha_hi - s.alpha_lo) * k / s.alpha_steps
    return eta, alpha


@dataclass
class DagSample:
    adjacency: Tensor  # (B, N, N), hard forward values when sampled hard
    soft_adjacency: Tensor  # (B, N, N) relaxed companion
    edge_noise: Optional[np.ndarray]
    perm_noise: Optional[np.ndarray]

    @property
    def hard(self) -> np.ndarray:
        return self.adjacency.data


class DagSampler:
    """Edge Net and Permutation Net mapping joint observations to DAGs.

    ``mode`` is ``context_aware`` (learned), or one of the fixed topologies
    ``uncorrelated``, ``line``, ``fully`` which ignore the observation.
    ``fixed_order`` pins the permutation to the identity.
    """

    def __init__(self, n_agents: int, obs_dim: int, rng: np.random.Generator, hidden: int = 64,
                 mode: str = "context_aware", fixed_order: bool = False,
                 edge_temperature: float = 1.0, perm_temperature: float = 1.0,
                 sinkhorn_iters: int = 20, assignment: str = "greedy"):
        self.n = n_agents
        self.mode = mode
        self.fixed_order = fixed_order or mode != "context_aware"
        self.edge_temperature = edge_temperature
        self.perm_temperature = perm_temperature
        self.sinkhorn_iters = sinkhorn_iters
        self.assignment = assignment
        if mode == "context_aware":
            self.edge_net = MLP([obs_dim, hidden, 2 * n_agents * n_agents], rng, out_gain=0.1)
            self.perm_net = None if self.fixed_order else MLP(
                [obs_dim, hidden, n_agents * n_agents], rng, out_gain=0.1)
            self._fixed = None
        else:
            self.edge_net = self.perm_net = None
            self._fixed = fixed_topology(Topology(mode), n_agents).adjacency.astype(np.float64)

    def parameters(self) -> list:
        params = []
        for net in (self.edge_net, self.perm_net):
            if net is not None:
                params.extend(net.parameters())
        return params

    def logits(self, joint_obs) -> tuple:
        B = joint_obs.shape[0]
        n = self.n
        edge = ad.reshape(self.edge_net(joint_obs), (B, n, n, 2))
        perm = None if self.perm_net is None else ad.reshape(self.perm_net(joint_obs), (B, n, n))
        return edge, perm

    def sample(self, joint_obs, rng: np.random.Generator, edge_noise=None, perm_noise=None,
               hard_adjacency=None) -> DagSample:
        """Draw one DAG per row of ``joint_obs`` (shape ``(B, obs_dim)``).

        Passing the noises recorded at rollout time reproduces the relaxed
        path; ``hard_adjacency`` then pins the forward value to the recorded DAG.
        """
        B = joint_obs.shape[0]
        n = self.n
        if self._fixed is not None:
            adj = Tensor(np.broadcast_to(self._fixed, (B, n, n)).copy())
            return DagSample(adj, adj, None, None)
        edge_logits, perm_logits = self.logits(joint_obs)
        U, U_soft, edge_noise = sample_edges(edge_logits, self.edge_temperature, rng,
                                             hard=True, noise=edge_noise)
        if perm_logits is None:
            P = Tensor(np.broadcast_to(np.eye(n), (B, n, n)).copy())
            P_soft = P
        else:
            P, P_soft, perm_noise = sample_permutation(
                perm_logits, self.sinkhorn_iters, self.perm_temperature, rng,
                hard=True, noise=perm_noise, assignment=self.assignment)
        adj = assemble_adjacency(P, U)
        soft = assemble_adjacency(P_soft, U_soft)
        if hard_adjacency is not None:
            adj = ad.straight_through(hard_adjacency, adj)
        return DagSample(adj, soft, edge_noise, perm_noise)

    def state_dict(self) -> dict:
        return {f"p{k}": p.data for k, p in enumerate(self.parameters())}

    def load_state_dict(self, state: dict):
        for k, p in enumerate(self.parameters()):
            p.data = np.array(state[f"p{k}"], dtype=np.float64)
