"""Acceptance checks, one per criterion; each prints a PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from bnmarl import autodiff as ad
from bnmarl.autodiff import MLP, Tensor
from bnmarl.bn_policy import Dag, TabularBnPolicy, Topology, fixed_topology
from bnmarl.dag_sampler import (DagSampler, DensitySchedule, dag_density, density_penalty,
                                schedule_at, sinkhorn)
from bnmarl.envs import (AlohaEnv, AlohaSpec, CoordinationGameSpec, coordination_game,
                         coordination_reward)
from bnmarl.exact_pg import AscentConfig, ascend, bn_policy_gradient
from bnmarl.experiment import mean_stderr
from bnmarl.markov_game import random_game, value_from_start
from bnmarl.marl_ac import ACConfig, train
from bnmarl.solvers import nash_gap, optimal_value, poa

TOPOS = ("uncorrelated", "line", "fully")

# Tabular protocol: practical step size with monotonicity monitoring.
ETA = 0.5
ITERS = 2000
LOG_EVERY = 50
BURN_IN = ITERS // 10
N_SEEDS = 50


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _fd(game, policy, h=1e-5):
    out = []
    for i, th in enumerate(policy.theta):
        g = np.zeros_like(th)
        for idx in np.ndindex(th.shape):
            plus = [t.copy() for t in policy.theta]
            minus = [t.copy() for t in policy.theta]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (value_from_start(game, policy.with_theta(plus).to_joint_table())
                      - value_from_start(game, policy.with_theta(minus).to_joint_table())) / (2 * h)
        out.append(g)
    return out


def test_gradient_correctness(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 4))
        counts = tuple(int(k) for k in rng.integers(2, 4, size=n))
        game = random_game(rng, int(rng.integers(2, 9)), counts, gamma=float(rng.uniform(0.5, 0.95)))
        for kind in Topology:
            pol = TabularBnPolicy.gaussian(fixed_topology(kind, n), counts, game.n_states, rng, 1.0)
            exact = np.concatenate([g.ravel() for g in bn_policy_gradient(game, pol)])
            fd = np.concatenate([g.ravel() for g in _fd(game, pol)])
            worst = max(worst, np.max(np.abs(exact - fd)) / np.max(np.abs(fd)))
    elapsed = time.perf_counter() - start
    ok = report("gradient correctness", worst < 1e-6 and elapsed < 60,
                f"max rel err {worst:.2e} (< 1e-6) over 20 games x 3 topologies in {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2 and 3. tabular dynamics on the coordination game


def _run_tabular(n_agents, kind, seed):
    game = coordination_game(CoordinationGameSpec(n_agents=n_agents))
    pol = TabularBnPolicy.gaussian(fixed_topology(kind, n_agents), game.action_counts,
                                   game.n_states, np.random.default_rng(seed), 0.1)
    traj = ascend(game, pol, AscentConfig(step_size=ETA, max_iters=ITERS, log_every=LOG_EVERY,
                                          grad_tol=0.0),
                  callback=lambda s: {"nash_gap": nash_gap(game, s.policy, s.value)})
    return {
        "iters": [s.iteration for s in traj],
        "gaps": [s.metrics["nash_gap"] for s in traj],
        "value": traj[-1].value,
        "poa": poa(game, traj[-1].policy, traj[-1].value, optimal_value(game)),
        "violations": traj[-1].metrics["monotone_violations"],
    }


@pytest.fixture(scope="module")
def tabular_runs():
    return {(n, kind): [_run_tabular(n, kind, seed) for seed in range(N_SEEDS)]
            for n in (2, 3) for kind in TOPOS}


def _non_increasing_after_burn_in(run, tol=1e-10):
    gaps = [g for it, g in zip(run["iters"], run["gaps"]) if it >= BURN_IN]
    return all(b <= a + tol for a, b in zip(gaps, gaps[1:]))


@pytest.mark.slow
def test_nash_gap_convergence(tabular_runs, report):
    details, ok = [], True
    for (n, kind), runs in tabular_runs.items():
        frac = np.mean([r["gaps"][-1] < 1e-2 for r in runs])
        mono = np.mean([_non_increasing_after_burn_in(r) for r in runs])
        ok &= frac >= 0.9 and mono == 1.0
        details.append(f"N={n} {kind}: {frac:.0%} final gap<1e-2, {mono:.0%} non-increasing")
    assert report("Nash-gap convergence", ok,
                  f"eta={ETA}, {ITERS} iters, burn-in {BURN_IN}; " + "; ".join(details))


@pytest.mark.slow
def test_topology_ordering_and_monotone_improvement(tabular_runs, report):
    stats = {k: mean_stderr(r["poa"] for r in tabular_runs[(3, k)]) for k in TOPOS}
    (u, su), (l, sl), (f, sf) = stats["uncorrelated"], stats["line"], stats["fully"]
    order_ok = f >= u + 2 * su and u - su <= l <= f + sf
    violations = sum(r["violations"] for runs in tabular_runs.values() for r in runs)
    ok = report("topology ordering", order_ok and violations == 0,
                f"N=3 POA unc {u:.7f}±{su:.1e}, line {l:.7f}±{sl:.1e}, fully {f:.7f}±{sf:.1e} "
                f"(line - fully = {l - f:.1e}); "
                f"monotone violations across all {len(tabular_runs) * N_SEEDS} runs: {violations}")
    assert ok


# ---------------------------------------------------------------------------
# 4. oracle equivalence


def _enum_optimal(game):
    S, A = game.n_states, game.n_joint_actions
    best = -np.inf
    for choice in itertools.product(range(A), repeat=S):
        pi = np.zeros((S, A))
        pi[np.arange(S), choice] = 1.0
        best = max(best, value_from_start(game, pi))
    return best


def _enum_gap(game, pol):
    v = value_from_start(game, pol.to_joint_table())
    best = -np.inf
    for i, th in enumerate(pol.theta):
        cells = th.shape[0] * th.shape[1]
        for choice in itertools.product(range(th.shape[2]), repeat=cells):
            table = np.full(th.shape, -np.inf)
            table.reshape(cells, -1)[np.arange(cells), choice] = 0.0
            theta = [t.copy() for t in pol.theta]
            theta[i] = table
            best = max(best, value_from_start(game, pol.with_theta(theta).to_joint_table()))
    return best - v


def test_oracle_equivalence(report):
    rng = np.random.default_rng(77)
    err_gap = err_opt = 0.0
    cg = coordination_game(CoordinationGameSpec(n_agents=2))
    err_opt = abs(optimal_value(cg) - _enum_optimal(cg))
    cases = 0
    for kind in TOPOS:
        pols = [TabularBnPolicy.zeros(fixed_topology(kind, 2), (2, 2), 4)]
        pols += [TabularBnPolicy.gaussian(fixed_topology(kind, 2), (2, 2), 4, rng, 1.0)
                 for _ in range(3)]
        for pol in pols:
            err_gap = max(err_gap, abs(nash_gap(cg, pol) - _enum_gap(cg, pol)))
            cases += 1
    for _ in range(10):
        game = random_game(rng, int(rng.integers(2, 4)), (2, 2), gamma=0.9)
        kind = TOPOS[int(rng.integers(3))]
        pol = TabularBnPolicy.gaussian(fixed_topology(kind, 2), (2, 2), game.n_states, rng, 1.0)
        err_gap = max(err_gap, abs(nash_gap(game, pol) - _enum_gap(game, pol)))
        err_opt = max(err_opt, abs(optimal_value(game) - _enum_optimal(game)))
    ok = report("oracle equivalence", err_gap < 1e-8 and err_opt < 1e-8,
                f"max |nash_gap - enum| {err_gap:.1e}, max |V* - enum| {err_opt:.1e} "
                f"({cases} coordination-game policies, 10 random games)")
    assert ok


# ---------------------------------------------------------------------------
# 5. DAG sampler


def test_dag_sampler_properties(report):
    rng = np.random.default_rng(5)
    acyclic = True
    for n in (5, 10):
        sampler = DagSampler(n, 2 * n, rng, hidden=32)
        with ad.no_grad():
            sample = sampler.sample(Tensor(rng.normal(size=(10_000, 2 * n))), rng)
        for adj in sample.hard:
            try:
                Dag(adj.astype(np.int8))
            except ValueError:
                acyclic = False
    sink_err = 0.0
    for n in (5, 10):
        s = sinkhorn(rng.normal(size=(10_000, n, n)), 20).data
        sink_err = max(sink_err, np.max(np.abs(s.sum(-1) - 1)), np.max(np.abs(s.sum(-2) - 1)))
    noisy = sinkhorn(rng.normal(size=(10_000, 5, 5)) + rng.gumbel(size=(10_000, 5, 5)), 20).data
    noisy_frac = np.mean(np.abs(noisy.sum(-1) - 1).max(-1) < 1e-3)
    dens_ok = all(
        dag_density(fixed_topology("uncorrelated", n)) == 0
        and dag_density(fixed_topology("line", n)) == 2 * (n - 1) / (n * (n - 1))
        and dag_density(fixed_topology("fully", n)) == 1
        for n in range(2, 11))
    soft = np.triu(rng.uniform(size=(6, 6)), 1)[None]
    rho = 2 * soft.sum() / 30
    pen_ok = all(abs(density_penalty(Tensor(soft), e, a).item() - a * abs(rho - e)) < 1e-12
                 for e in (0.0, 0.3, 1.0) for a in (0.0, 0.5, 2.0))
    sched = DensitySchedule()
    sched_ok = True
    for step in range(0, 1001):
        pct = step / 10
        eta = 1.0 if pct < 20 else 0.0 if pct >= 60 else 1 - np.floor((pct - 20) / 40 * 10) / 10
        alpha = 0.1 if pct < 60 else 1.0 if pct >= 90 else 0.1 + 0.9 * np.floor((pct - 60) / 30 * 10) / 10
        e, a = schedule_at(sched, step, 1000)
        sched_ok &= abs(e - eta) < 1e-12 and abs(a - alpha) < 1e-12
    ok = report("DAG sampler properties", acyclic and sink_err < 1e-3 and dens_ok and pen_ok and sched_ok,
                f"2x10^4 sampled DAGs acyclic={acyclic}; Sinkhorn(20) max row/col error {sink_err:.1e} "
                f"on N(0,1) logits (Gumbel-perturbed: {noisy_frac:.1%} within 1e-3); densities exact={dens_ok}; "
                f"penalty closed form={pen_ok}; schedule closed form={sched_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 6. autodiff


def test_autodiff(report):
    from test_autodiff import OPS, check
    failed = []
    for name, (op, arrays) in sorted(OPS.items()):
        try:
            check(op, *arrays, tol=1e-4)
        except AssertionError:
            failed.append(name)
    rng = np.random.default_rng(8)
    net = MLP([4, 6, 6, 2], rng)
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 2))

    def loss():
        d = net(Tensor(x)).data - y
        return float(np.mean(d * d))
    out = net(Tensor(x)) - Tensor(y)
    ad.mean(out * out).backward()
    worst = 0.0
    for p in net.parameters():
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            old = p.data[idx]
            p.data[idx] = old + 1e-4
            fp = loss()
            p.data[idx] = old - 1e-4
            fm = loss()
            p.data[idx] = old
            num[idx] = (fp - fm) / 2e-4
        worst = max(worst, np.max(np.abs(p.grad - num)) / max(np.max(np.abs(num)), 1e-8))
    ok = report("autodiff", not failed and worst < 1e-4,
                f"{len(OPS) - len(failed)}/{len(OPS)} op checks pass (rel err < 1e-4); "
                f"3-layer MLP rel err {worst:.1e}" + (f"; failed: {failed}" if failed else ""))
    assert ok


# ---------------------------------------------------------------------------
# 7. environment fidelity


def _pseudocode_reward(state):
    n = len(state)
    bound = 1 if n in (2, 3) else 2
    zeros = list(state).count(0)
    ones = n - zeros
    if abs(zeros - ones) <= bound:
        return 1 if zeros < ones else 0
    elif zeros > ones:
        return 3
    return 2


def test_environment_fidelity(report):
    reward_ok = all(coordination_reward(s) == _pseudocode_reward(s)
                    for n in (2, 3, 5) for s in itertools.product((0, 1), repeat=n))
    trans_ok = True
    for n in (2, 3, 5):
        g = coordination_game(CoordinationGameSpec(n_agents=n))
        bits = np.array(list(itertools.product((0, 1), repeat=n)))
        for i in range(n):
            zero_next = bits[:, i] == 0
            for a_idx, a in enumerate(bits):
                p = g.transition[0, a_idx, zero_next].sum()
                trans_ok &= abs(p - (0.9 if a[i] == 0 else 0.1)) < 1e-12
        trans_ok &= np.max(np.abs(g.transition.sum(-1) - 1)) < 1e-12
    spec = AlohaSpec()
    env = AlohaEnv(spec)
    nb = spec.neighbors()
    rng = np.random.default_rng(31)
    wait_ok = arith_ok = bounds_ok = True
    env.reset(0)
    for t in range(10_000):
        if t % spec.episode_length == 0:
            env.reset(t)
        wait = t % 2 == 0
        a = np.zeros(10, dtype=int) if wait else rng.integers(0, 2, size=10)
        before = env.state.backlog.copy()
        r = env.step(a).reward
        senders = (a == 1) & (before > 0)
        coll = senders & (nb & senders[None]).any(1)
        if wait:
            wait_ok &= r == 0.0
        arith_ok &= abs(r - (0.1 * (senders & ~coll).sum() - 10.0 * coll.sum())) < 1e-12
        bounds_ok &= 0 <= env.state.backlog.min() and env.state.backlog.max() <= spec.max_backlog
    ok = report("environment fidelity", reward_ok and trans_ok and wait_ok and arith_ok and bounds_ok,
                f"reward on all 2^N states N in (2,3,5)={reward_ok}; P(s_i'=0|a_i)=0.9/0.1 exact={trans_ok}; "
                f"Aloha over 10^4 steps: all-wait zero={wait_ok}, reward arithmetic={arith_ok}, "
                f"backlog bounds={bounds_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 8. end-to-end training


def _random_baseline(episodes=100_000, seed=0):
    spec = CoordinationGameSpec(n_agents=2)
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, size=(episodes, 2))
    total = np.zeros(episodes)
    for _ in range(spec.episode_length):
        total += [coordination_reward(x) for x in ((0, 0), (0, 1), (1, 0), (1, 1))] @ np.eye(4)[
            s[:, 0] * 2 + s[:, 1]].T
        a = rng.integers(0, 2, size=(episodes, 2))
        p_zero = np.where(a == 0, 0.9, 0.1)
        s = (rng.random((episodes, 2)) >= p_zero).astype(int)
    return float(total.mean())


def _train_many(topology, seeds, **kw):
    results = []
    for seed in seeds:
        start = time.perf_counter()
        res = train(ACConfig(topology=topology, **kw), seed=seed)
        results.append((res, time.perf_counter() - start))
    return results


@pytest.mark.slow
def test_end_to_end_training(report):
    seeds = range(5)
    baseline = _random_baseline()
    cg = {t: _train_many(t, seeds, env="coordination", total_steps=200_000)
          for t in ("context_aware", "fully", "uncorrelated")}
    aloha_kw = dict(env="aloha", env_kwargs={"grid_shape": (2, 2)}, total_steps=200_000)
    annealed = _train_many("context_aware", seeds, schedule=DensitySchedule(), **aloha_kw)
    uncorr = _train_many("uncorrelated", seeds, **aloha_kw)

    stat = {t: mean_stderr(r.eval_return for r, _ in runs) for t, runs in cg.items()}
    beat = {t: stat[t][0] >= 1.2 * baseline for t in ("context_aware", "fully")}
    order = stat["context_aware"][0] >= stat["uncorrelated"][0] - stat["uncorrelated"][1]
    ann_ret = mean_stderr(r.eval_return for r, _ in annealed)
    unc_ret = mean_stderr(r.eval_return for r, _ in uncorr)
    densities = [r.eval_density for r, _ in annealed]
    sparse = max(densities) < 0.05
    ann_ok = ann_ret[0] >= unc_ret[0] - unc_ret[1]
    runs = [w for group in (*cg.values(), annealed, uncorr) for _, w in group]
    fast = max(runs) <= 1800
    ok = report("end-to-end training", all(beat.values()) and order and sparse and ann_ok and fast,
                f"CG N=2 random baseline {baseline:.2f} (x1.2 = {1.2 * baseline:.2f}); returns "
                + ", ".join(f"{t} {m:.2f}±{s:.2f}" for t, (m, s) in stat.items())
                + f"; Aloha-4 annealed {ann_ret[0]:.3f}±{ann_ret[1]:.3f} vs uncorrelated "
                  f"{unc_ret[0]:.3f}±{unc_ret[1]:.3f}, final densities max {max(densities):.4f}; "
                  f"slowest run {max(runs):.0f}s")
    assert ok
