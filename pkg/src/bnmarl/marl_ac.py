"""Multi-agent PPO whose actors condition on parent actions chosen by a DAG sampler.

Each agent's actor reads its own observation plus a parent block: for every
other agent ``j`` (in index order) the one-hot action of ``j`` multiplied by
the adjacency entry ``G[j, i]``. Non-parents therefore contribute zeros, and
the gradient with respect to ``G[j, i]`` reaches the DAG sampler through the
straight-through relaxations.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import MLP, Adam, Linear, Tensor
from .dag_sampler import (ConstantSchedule, DagSampler, DensitySchedule, dag_density,
                          density_penalty, schedule_at)
from .envs import AlohaEnv, AlohaSpec, CoordinationGameEnv, CoordinationGameSpec

log = logging.getLogger(__name__)


@dataclass
class ACConfig:
    env: str = "coordination"
    env_kwargs: dict = field(default_factory=dict)
    topology: str = "context_aware"
    total_steps: int = 200_000
    n_rollout_threads: int = 32
    ppo_epochs: int = 5
    lr_actor: float = 7e-4
    lr_critic: float = 7e-4
    lr_sampler: Optional[float] = None
    hidden: int = 64
    clip_ratio: float = 0.2
    entropy_coef: float = 0.01
    gae_lambda: float = 0.0
    advantage_critic: str = "v"
    normalize_advantages: bool = True
    max_grad_norm: Optional[float] = 10.0
    share_parent_obs: Optional[bool] = None
    resample_dag: str = "step"
    fixed_order: bool = False
    edge_temperature: float = 1.0
    perm_temperature: float = 1.0
    sinkhorn_iters: int = 20
    schedule: object = field(default_factory=ConstantSchedule)
    eval_episodes: int = 100

    def __post_init__(self):
        if self.topology not in ("context_aware", "uncorrelated", "line", "fully"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.advantage_critic not in ("v", "q"):
            raise ValueError("advantage_critic must be 'v' or 'q'")
        if self.resample_dag not in ("step", "episode"):
            raise ValueError("resample_dag must be 'step' or 'episode'")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive (use inf for the unclipped loss)")

    def make_env(self):
        if self.env in ("coordination", "coordination_game"):
            return CoordinationGameEnv(CoordinationGameSpec(**self.env_kwargs))
        if self.env == "aloha":
            return AlohaEnv(AlohaSpec(**self.env_kwargs))
        raise ValueError(f"unknown environment {self.env!r}")


class ActorNet:
    """``concat(Base(o^i), parent features) -> FC(|A^i|)``.

    Parent features are the raw padded action block, or ``Base`` of the
    padded (observation, action) block when parent observations are shared.
    """

    def __init__(self, agent: int, n_agents: int, obs_dim: int, n_actions: int, hidden: int,
                 rng: np.random.Generator, share_parent_obs: bool = False):
        if n_agents < 2:
            raise ValueError("need at least two agents")
        self.agent = agent
        self.n_actions = n_actions
        self.others = [j for j in range(n_agents) if j != agent]
        self.share_parent_obs = share_parent_obs
        self.base = MLP([obs_dim, hidden, hidden], rng, final_relu=True)
        block = (n_agents - 1) * n_actions
        if share_parent_obs:
            self.parent_base = MLP([(n_agents - 1) * (obs_dim + n_actions), hidden, hidden], rng,
                                   final_relu=True)
            head_in = 2 * hidden
        else:
            self.parent_base = None
            head_in = hidden + block
        self.head = Linear(head_in, n_actions, rng, gain=0.01)

    def parameters(self) -> list:
        params = self.base.parameters() + self.head.parameters()
        if self.parent_base is not None:
            params += self.parent_base.parameters()
        return params

    def logits(self, obs_i, adjacency, action_onehot, all_obs=None) -> Tensor:
        """``obs_i`` (B, obs_dim); ``adjacency`` (B, N, N); ``action_onehot`` (B, N, A)."""
        B = obs_i.shape[0]
        feats = self.base(obs_i)
        gate = ad.reshape(adjacency[:, self.others, self.agent], (B, len(self.others), 1))
        acts = ad.reshape(gate * action_onehot[:, self.others, :], (B, -1))
        if self.parent_base is None:
            return self.head(ad.concat([feats, acts], axis=-1))
        obs = ad.reshape(gate * all_obs[:, self.others, :], (B, -1))
        parent = self.parent_base(ad.concat([obs, acts], axis=-1))
        return self.head(ad.concat([feats, parent], axis=-1))


class CriticNet:
    """``Base(input) -> FC(1)``; the Q form appends the one-hot joint action."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.net = MLP([in_dim, hidden, hidden, 1], rng)

    def parameters(self) -> list:
        return self.net.parameters()

    def __call__(self, x) -> Tensor:
        out = self.net(x)
        return ad.reshape(out, (out.shape[0],))


class BnActorCritic:
    """Actors, V and Q critics, and the DAG sampler for one environment."""

    def __init__(self, env, config: ACConfig, rng: np.random.Generator):
        self.n = env.n_agents
        self.n_actions = env.n_actions
        self.obs_dim = env.obs_dim
        self.state_dim = env.state_dim
        share = config.share_parent_obs
        if share is None:
            share = isinstance(env, AlohaEnv)
        self.share_parent_obs = share
        h = config.hidden
        self.actors = [ActorNet(i, self.n, self.obs_dim, self.n_actions, h, rng, share)
                       for i in range(self.n)]
        self.v_critic = CriticNet(self.state_dim, h, rng)
        self.q_critic = CriticNet(self.state_dim + self.n * self.n_actions, h, rng)
        self.sampler = DagSampler(self.n, self.n * self.obs_dim, rng, hidden=h,
                                  mode=config.topology, fixed_order=config.fixed_order,
                                  edge_temperature=config.edge_temperature,
                                  perm_temperature=config.perm_temperature,
                                  sinkhorn_iters=config.sinkhorn_iters)

    def actor_parameters(self) -> list:
        return [p for a in self.actors for p in a.parameters()]

    def critic_parameters(self) -> list:
        return self.v_critic.parameters() + self.q_critic.parameters()

    def all_parameters(self) -> list:
        return self.actor_parameters() + self.sampler.parameters() + self.critic_parameters()

    def state_dict(self) -> dict:
        return {f"p{k}": p.data.copy() for k, p in enumerate(self.all_parameters())}

    def load_state_dict(self, state: dict):
        params = self.all_parameters()
        if len(state) != len(params):
            raise ValueError("checkpoint does not match the network layout")
        for k, p in enumerate(params):
            arr = np.asarray(state[f"p{k}"], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k} shape {arr.shape} != {p.shape}")
            p.data = arr

    def onehot(self, actions: np.ndarray) -> np.ndarray:
        out = np.zeros(actions.shape + (self.n_actions,))
        np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
        return out

    def log_probs(self, obs: np.ndarray, adjacency, actions: np.ndarray) -> tuple:
        """Per-agent log-probabilities ``(B, N)`` and entropies of recorded actions."""
        onehot = self.onehot(actions)
        logps, ents = [], []
        for i, actor in enumerate(self.actors):
            lp = ad.log_softmax(actor.logits(obs[:, i, :], adjacency, onehot, obs), axis=-1)
            logps.append(ad.reshape(ad.gather(lp, actions[:, i]), (-1, 1)))
            ents.append(ad.reshape(-ad.sum_(ad.exp(lp) * lp, axis=-1), (-1, 1)))
        return ad.concat(logps, axis=-1), ad.concat(ents, axis=-1)


def topological_positions(adjacency: np.ndarray) -> np.ndarray:
    """``(B, N)`` rank of each agent in a topological order of each hard DAG."""
    B, n, _ = adjacency.shape
    pos = np.zeros((B, n), dtype=np.int64)
    for b in range(B):
        indeg = adjacency[b].sum(axis=0).astype(int)
        done = np.zeros(n, dtype=bool)
        for k in range(n):
            ready = np.flatnonzero((indeg == 0) & ~done)
            if ready.size == 0:
                raise ValueError("sampled adjacency is cyclic")
            j = ready[0]
            pos[b, j] = k
            done[j] = True
            indeg -= adjacency[b, j].astype(int)
    return pos


def act(model: BnActorCritic, obs: np.ndarray, rng: np.random.Generator, dag=None,
        deterministic: bool = False) -> dict:
    """Sample a DAG and then each agent's action in topological order.

    ``obs`` is ``(B, N, obs_dim)``. Returns a dict with ``actions`` (B, N),
    ``log_probs`` (B, N), ``adjacency`` (B, N, N) and the sampler noises.
    A given ``dag`` (from an earlier call) is reused instead of resampling.
    """
    B = obs.shape[0]
    with ad.no_grad():
        if dag is None:
            dag = model.sampler.sample(Tensor(obs.reshape(B, -1)), rng)
        adj = dag.hard
        pos = topological_positions(np.rint(adj).astype(np.int64))
        actions = np.zeros((B, model.n), dtype=np.int64)
        logp = np.zeros((B, model.n))
        adj_t = Tensor(adj)
        for k in range(model.n):
            onehot = model.onehot(actions)
            for i in np.unique(np.flatnonzero((pos == k).any(axis=0))):
                rows = np.flatnonzero(pos[:, i] == k)
                lp = ad.log_softmax(
                    model.actors[i].logits(obs[:, i, :], adj_t, onehot, obs), axis=-1).data
                p = np.exp(lp[rows])
                if deterministic:
                    choice = np.argmax(p, axis=1)
                else:
                    u = rng.random(len(rows))[:, None]
                    choice = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), p.shape[1] - 1)
                actions[rows, i] = choice
                logp[rows, i] = lp[rows, choice]
                onehot = model.onehot(actions)
    return {"actions": actions, "log_probs": logp, "adjacency": adj, "dag": dag}


@dataclass
class RolloutBatch:
    """Time-major arrays ``(T, B, ...)`` from one episode per rollout thread."""

    obs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    adjacency: np.ndarray
    edge_noise: Optional[np.ndarray]
    perm_noise: Optional[np.ndarray]
    dag_obs: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape((-1,) + arr.shape[2:])

    @property
    def size(self) -> int:
        return self.rewards.size


def gae_advantages(rewards: np.ndarray, values: np.ndarray, next_values: np.ndarray,
                   terminals: np.ndarray, gamma: float, lam: float) -> tuple:
    """Generalized advantage estimates over time-major ``(T, B)`` arrays.

    ``lam = 0`` gives one-step TD advantages ``r + gamma V(o') - V(o)``.
    ``terminals`` marks true episode ends (no bootstrap); time-limit
    truncation should bootstrap and is therefore not terminal.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        live = 1.0 - terminals[t]
        delta = rewards[t] + gamma * next_values[t] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values


def collect_rollout(model: BnActorCritic, envs: list, rng: np.random.Generator,
                    seeds: Optional[list] = None, resample_dag: str = "step") -> RolloutBatch:
    B = len(envs)
    obs = np.stack([env.reset(None if seeds is None else seeds[b]) for b, env in enumerate(envs)])
    T = envs[0].episode_length
    keys = ("obs", "states", "actions", "log_probs", "rewards", "adjacency", "edge_noise",
            "perm_noise", "dag_obs", "dones")
    buf = {k: [] for k in keys}
    dag = None
    dag_obs = None
    for t in range(T):
        state = np.stack([env.global_state() for env in envs])
        if resample_dag == "step" or dag is None:
            dag = None
            dag_obs = obs
        out = act(model, obs, rng, dag=dag)
        dag = out["dag"]
        results = [env.step(a) for env, a in zip(envs, out["actions"])]
        buf["obs"].append(obs)
        buf["states"].append(state)
        buf["actions"].append(out["actions"])
        buf["log_probs"].append(out["log_probs"])
        buf["rewards"].append(np.array([r.reward for r in results]))
        buf["adjacency"].append(out["adjacency"])
        buf["edge_noise"].append(dag.edge_noise)
        buf["perm_noise"].append(dag.perm_noise)
        buf["dag_obs"].append(dag_obs)
        buf["dones"].append(np.array([r.done for r in results], dtype=np.float64))
        obs = np.stack([r.obs for r in results])
    final_state = np.stack([env.global_state() for env in envs])
    final_actions = act(model, obs, rng, dag=None if resample_dag == "step" else dag)["actions"]
    states = np.stack(buf["states"])
    actions = np.stack(buf["actions"])
    next_states = np.concatenate([states[1:], final_state[None]], axis=0)
    next_actions = np.concatenate([actions[1:], final_actions[None]], axis=0)
    noise = {k: None if buf[k][0] is None else np.stack(buf[k]) for k in ("edge_noise", "perm_noise")}
    return RolloutBatch(
        obs=np.stack(buf["obs"]), states=states, actions=actions,
        log_probs=np.stack(buf["log_probs"]), rewards=np.stack(buf["rewards"]),
        adjacency=np.stack(buf["adjacency"]), edge_noise=noise["edge_noise"],
        perm_noise=noise["perm_noise"], dag_obs=np.stack(buf["dag_obs"]),
        next_states=next_states, next_actions=next_actions, dones=np.stack(buf["dones"]))


def recompute_dag(model: BnActorCritic, batch: RolloutBatch, rng: np.random.Generator):
    """Relaxed DAG path with the recorded noises; forward values equal the recorded DAGs."""
    dag_obs = batch.flat("dag_obs")
    M = dag_obs.shape[0]
    edge = None if batch.edge_noise is None else batch.flat("edge_noise")
    perm = None if batch.perm_noise is None else batch.flat("perm_noise")
    return model.sampler.sample(Tensor(dag_obs.reshape(M, -1)), rng, edge_noise=edge,
                                perm_noise=perm, hard_adjacency=batch.flat("adjacency"))


def critic_loss(critic: CriticNet, inputs: np.ndarray, targets: np.ndarray) -> Tensor:
    """Mean squared error to fixed targets (no gradient through the targets)."""
    if len(inputs) == 0:
        raise ValueError("empty batch")
    diff = critic(Tensor(inputs)) - Tensor(np.asarray(targets, dtype=np.float64))
    return ad.mean(diff * diff)


def td_targets_q(q_critic: CriticNet, model: BnActorCritic, batch: RolloutBatch,
                 gamma: float) -> np.ndarray:
    """``y = r + gamma Q(o', a')`` evaluated without gradient."""
    with ad.no_grad():
        nxt = q_input(model, batch.flat("next_states"), batch.flat("next_actions"))
        q_next = q_critic(Tensor(nxt)).data
    return batch.flat("rewards") + gamma * q_next


def q_input(model: BnActorCritic, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    onehot = model.onehot(actions).reshape(len(actions), -1)
    return np.concatenate([states, onehot], axis=1)


def actor_loss(new_log_probs: Tensor, old_log_probs: np.ndarray, advantages: np.ndarray,
               clip_ratio: float) -> Tensor:
    """Negated PPO-clipped surrogate, summed over agents and averaged over samples.

    ``new_log_probs`` and ``old_log_probs`` are ``(M, N)``; ``advantages`` is
    ``(M,)`` and shared by all agents. ``clip_ratio = inf`` gives the plain
    importance-weighted score ``-E[ratio * A]``.
    """
    if new_log_probs.shape[0] == 0:
        raise ValueError("empty batch")
    adv = Tensor(np.asarray(advantages, dtype=np.float64)[:, None])
    ratio = ad.exp(new_log_probs - Tensor(old_log_probs))
    surrogate = ratio * adv
    if math.isfinite(clip_ratio):
        clipped = ad.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * adv
        surrogate = ad.minimum(surrogate, clipped)
    return -ad.mean(ad.sum_(surrogate, axis=1))


@dataclass
class IterationLog:
    step: int
    mean_return: float
    dag_density: float
    eta: float
    alpha: float
    grad_norm: float
    wall_time: float


@dataclass
class TrainResult:
    logs: list
    eval_return: float
    eval_return_stderr: float
    eval_density: float
    model: BnActorCritic


def evaluate(model: BnActorCritic, config: ACConfig, episodes: int, rng: np.random.Generator,
             seed: int = 0) -> tuple:
    """Mean and stderr of undiscounted episode return, and mean hard DAG density."""
    envs = [config.make_env() for _ in range(min(episodes, config.n_rollout_threads))]
    returns, densities = [], []
    ep = 0
    while ep < episodes:
        k = min(len(envs), episodes - ep)
        obs = np.stack([envs[b].reset(seed + ep + b) for b in range(k)])
        total = np.zeros(k)
        dag = None
        for t in range(envs[0].episode_length):
            out = act(model, obs, rng, dag=None if config.resample_dag == "step" else dag)
            dag = out["dag"]
            densities.extend(dag_density(a) for a in out["adjacency"])
            res = [envs[b].step(out["actions"][b]) for b in range(k)]
            total += [r.reward for r in res]
            obs = np.stack([r.obs for r in res])
        returns.extend(total.tolist())
        ep += k
    returns = np.asarray(returns)
    stderr = float(returns.std() / math.sqrt(len(returns)))
    return float(returns.mean()), stderr, float(np.mean(densities)) if densities else 0.0


def train(config: ACConfig, seed: int = 0, callback=None, record_wall_time: bool = False) -> TrainResult:
    """Alternate rollouts and PPO epochs; returns per-iteration logs and a final evaluation."""
    rng = np.random.default_rng(seed)
    envs = [config.make_env() for _ in range(config.n_rollout_threads)]
    model = BnActorCritic(envs[0], config, rng)
    gamma = envs[0].spec.gamma
    lr_sampler = config.lr_actor if config.lr_sampler is None else config.lr_sampler
    actor_opt = Adam(model.actor_parameters(), lr=config.lr_actor, max_grad_norm=config.max_grad_norm)
    sampler_opt = Adam(model.sampler.parameters(), lr=lr_sampler, max_grad_norm=config.max_grad_norm)
    critic_opt = Adam(model.critic_parameters(), lr=config.lr_critic, max_grad_norm=config.max_grad_norm)

    per_iter = config.n_rollout_threads * envs[0].episode_length
    n_iters = max(1, config.total_steps // per_iter)
    total = n_iters * per_iter
    logs = []
    start = time.perf_counter()
    episode_seed = np.random.SeedSequence(seed).spawn(1)[0]
    for it in range(n_iters):
        seeds = [int(x) for x in np.random.default_rng(episode_seed.spawn(1)[0]).integers(
            0, 2 ** 31 - 1, size=len(envs))]
        batch = collect_rollout(model, envs, rng, seeds, config.resample_dag)
        eta, alpha = schedule_at(config.schedule, it * per_iter, total)
        grad_norm = update(model, batch, config, gamma, eta, alpha, rng,
                           actor_opt, sampler_opt, critic_opt)
        ep_return = float(batch.rewards.sum(axis=0).mean())
        density = float(np.mean([dag_density(a) for a in batch.flat("adjacency")]))
        wall = time.perf_counter() - start if record_wall_time else float("nan")
        entry = IterationLog((it + 1) * per_iter, ep_return, density, eta, alpha, grad_norm, wall)
        logs.append(entry)
        if callback is not None:
            callback(entry)
        if not math.isfinite(grad_norm):
            raise FloatingPointError(f"non-finite loss at iteration {it} (seed {seed})")
    eval_rng = np.random.default_rng([seed, 1])
    ret, err, dens = evaluate(model, config, config.eval_episodes, eval_rng, seed=10_000 * (seed + 1))
    return TrainResult(logs, ret, err, dens, model)


def update(model: BnActorCritic, batch: RolloutBatch, config: ACConfig, gamma: float,
           eta: float, alpha: float, rng, actor_opt: Adam, sampler_opt: Adam,
           critic_opt: Adam) -> float:
    """PPO epochs on the full batch; returns the last actor/sampler gradient norm."""
    M = batch.size
    states = batch.flat("states")
    with ad.no_grad():
        values = model.v_critic(Tensor(states)).data.reshape(batch.rewards.shape)
        next_values = model.v_critic(Tensor(batch.flat("next_states"))).data.reshape(batch.rewards.shape)
    terminals = np.zeros_like(batch.rewards)  # episode ends are time limits
    adv, v_targets = gae_advantages(batch.rewards, values, next_values, terminals, gamma,
                                    config.gae_lambda)
    if config.advantage_critic == "q":
        with ad.no_grad():
            q = model.q_critic(Tensor(q_input(model, states, batch.flat("actions")))).data
        adv = (q - values.reshape(-1)).reshape(batch.rewards.shape)
    batch.advantages, batch.returns = adv, v_targets
    adv_flat = adv.reshape(-1)
    if config.normalize_advantages and M > 1:
        adv_flat = (adv_flat - adv_flat.mean()) / (adv_flat.std() + 1e-8)
    q_targets = td_targets_q(model.q_critic, model, batch, gamma)
    q_in = q_input(model, states, batch.flat("actions"))

    obs = batch.flat("obs")
    actions = batch.flat("actions")
    old_logp = batch.flat("log_probs")
    grad_norm = 0.0
    for _ in range(config.ppo_epochs):
        dag = recompute_dag(model, batch, rng)
        logp, ent = model.log_probs(obs, dag.adjacency, actions)
        loss = actor_loss(logp, old_logp, adv_flat, config.clip_ratio)
        if config.entropy_coef:
            loss = loss - config.entropy_coef * ad.mean(ad.sum_(ent, axis=1))
        if alpha > 0 and model.sampler.mode == "context_aware":
            loss = loss + density_penalty(dag.soft_adjacency, eta, alpha)
        actor_opt.zero_grad()
        sampler_opt.zero_grad()
        if loss.requires_grad:
            loss.backward()
        grad_norm = math.sqrt(actor_opt.step() ** 2 + sampler_opt.step() ** 2)

        c_loss = (critic_loss(model.v_critic, states, v_targets.reshape(-1))
                  + critic_loss(model.q_critic, q_in, q_targets))
        critic_opt.zero_grad()
        c_loss.backward()
        critic_opt.step()
        if not math.isfinite(loss.item()) or not math.isfinite(c_loss.item()):
            return float("nan")
    return grad_norm


def save_checkpoint(path, model: BnActorCritic, config: ACConfig):
    import json
    from dataclasses import asdict
    cfg = asdict(config)
    cfg["schedule"] = {"type": type(config.schedule).__name__, **asdict(config.schedule)}
    np.savez(path, __config__=json.dumps(cfg), **model.state_dict())


def load_checkpoint(path, config: ACConfig, seed: int = 0) -> BnActorCritic:
    data = np.load(path)
    model = BnActorCritic(config.make_env(), config, np.random.default_rng(seed))
    model.load_state_dict({k: data[k] for k in data.files if k != "__config__"})
    return model
