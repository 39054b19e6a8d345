"""Latent selection, exact policy values, consistency gaps and discrete MI diagnostics."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np

from .autograd import Tensor
from .environments import (
    DEFAULT_ENUMERATION_BUDGET,
    EnumerationTooLargeError,
    Environment,
    MarkovPolicy,
    PolicyFn,
    Trajectory,
    counterexample_env,
    counterexample_episodes,
    iter_policy_trajectories,
    rollout_returns,
    sample_episode,
    trajectory_probability,
)

DEFAULT_K = 256
SUPPORT_TOL = 1e-3
Z95 = 1.96


class NumericError(FloatingPointError):
    pass


def _first_argmax(values: np.ndarray) -> int:
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NumericError("value function returned a non-finite value")
    return int(np.argmax(values))  # numpy returns the first maximiser


# -- latent selection ------------------------------------------------------


def supported_latents(bundle, s0: int, tol: float = SUPPORT_TOL) -> np.ndarray:
    """Atoms whose prior mass at ``s0`` is at least ``tol`` (categorical latents only)."""
    probs = bundle.prior_probs(s0)
    atoms = np.flatnonzero(probs >= tol)
    return atoms if len(atoms) else np.array([int(np.argmax(probs))])


def select_latent(bundle, s0: int, K: int = DEFAULT_K, rng: np.random.Generator | None = None,
                  exhaustive: bool | None = None, support_tol: float = SUPPORT_TOL):
    """Propose ``K`` latents from the prior at ``s0`` and return the one with the highest value.

    Ties go to the lowest sample index. A categorical prior whose atom count
    is at most ``K`` is scanned exhaustively over atoms with mass at least
    ``support_tol`` (ties to the lowest atom).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    if bundle.kind == "tabular":
        n_atoms = len(bundle.prior_probs(s0))
        if exhaustive is None:
            exhaustive = n_atoms <= K
        if exhaustive:
            atoms = supported_latents(bundle, s0, support_tol)
        else:
            atoms = rng.choice(n_atoms, size=K, p=bundle.prior_probs(s0))
        values = np.array([bundle.value(int(z)) for z in atoms])
        return int(atoms[_first_argmax(values)])
    prior = bundle.prior(np.array([s0]))
    mu, sigma = prior.mu.data[0], prior.sigma().data[0]
    samples = mu + sigma * rng.standard_normal((K, len(mu)))
    values = bundle.value_net(Tensor(samples)).data[:, 0]
    return samples[_first_argmax(values)]


def return_latent(bundle, target: float | None = None) -> int:
    """Atom of a return-conditioned bundle closest to ``target`` (default: the largest return)."""
    values = bundle.atom_values
    if target is None:
        return len(values) - 1
    return int(np.argmin(np.abs(values - target)))


# -- policies and values ---------------------------------------------------


def conditioned_policy(bundle, z) -> PolicyFn:
    """The bundle's policy with its latent fixed to ``z``."""
    if hasattr(bundle, "policy_table") and bundle.kind == "tabular" and not getattr(bundle, "history_dependent", False):
        return MarkovPolicy(bundle.policy_table(int(z)))
    z = np.array(z, dtype=np.float64) if bundle.kind == "neural" else int(z)

    def policy(history: Trajectory, state: int) -> np.ndarray:
        return bundle.policy_probs(history, state, z)

    return policy


def markov_policy_value(env: Environment, policy: MarkovPolicy) -> float:
    """Backward induction over a time-indexed Markov policy."""
    table = np.array(policy.time_table(env.horizon), dtype=np.float64)
    mask = env.action_mask.astype(np.float64)
    rbar = env.expected_reward()
    v = np.zeros(env.n_states)
    for t in range(env.horizon, -1, -1):
        pa = table[t] * mask
        pa = np.where(pa.sum(axis=1, keepdims=True) > 0, pa, mask)
        pa = pa / pa.sum(axis=1, keepdims=True)
        q = rbar + env.transition_probs @ v
        v = (pa * q).sum(axis=1)
    return float(v[env.initial_state])


def enumerated_policy_value(env: Environment, policy: PolicyFn,
                            budget: int = DEFAULT_ENUMERATION_BUDGET) -> float:
    """Sum of ``Pr[tau | policy, env] * R(tau)`` over every reachable trajectory."""
    return math.fsum(p * tau.ret for tau, p in iter_policy_trajectories(env, policy, budget))


def exact_policy_value(env: Environment, policy: PolicyFn,
                       budget: int = DEFAULT_ENUMERATION_BUDGET) -> float:
    if isinstance(policy, MarkovPolicy) and env.markov:
        return markov_policy_value(env, policy)
    return enumerated_policy_value(env, policy, budget)


def consistency_gap(bundle, env: Environment, z) -> float:
    """``|V(z) - V_env(pi_z)|``."""
    return abs(bundle.value(z) - exact_policy_value(env, conditioned_policy(bundle, z)))


def max_consistency_gap(bundle, env: Environment, support_tol: float = SUPPORT_TOL) -> tuple[float, int]:
    """Largest gap over the prior's supported atoms; returns ``(gap, atom)``."""
    gaps = [(consistency_gap(bundle, env, int(z)), int(z))
            for z in supported_latents(bundle, env.initial_state, support_tol)]
    return max(gaps)


# -- Bayes-optimal tabular fits --------------------------------------------


class BayesOptimalBundle:
    """Counting fit of policy, value and prior to a dataset with given latent assignments.

    ``markov=True`` pools the policy over ``(z, s)``; otherwise it is keyed
    by ``(z, history, s)``. Unvisited cells fall back to uniform.
    """

    kind = "tabular"
    conditioning = "latent"

    def __init__(self, n_states: int, n_actions: int, n_atoms: int, markov: bool = True):
        self.n_states, self.n_actions, self.n_atoms = n_states, n_actions, n_atoms
        self.markov = markov
        self.history_dependent = not markov
        self.policy_counts: dict = defaultdict(lambda: np.zeros(n_actions))
        self.return_sum = np.zeros(n_atoms)
        self.z_mass = np.zeros(n_atoms)
        self.prior_counts = np.zeros((n_states, n_atoms))

    def _cell(self, z: int, history: Trajectory, state: int) -> Hashable:
        if self.markov:
            return (z, state)
        return (z, history.states, history.actions, history.rewards, state)

    def value(self, z: int) -> float:
        return float(self.return_sum[z] / self.z_mass[z]) if self.z_mass[z] > 0 else 0.0

    def prior_probs(self, s0: int) -> np.ndarray:
        row = self.prior_counts[s0]
        return row / row.sum() if row.sum() > 0 else np.full(self.n_atoms, 1.0 / self.n_atoms)

    def policy_probs(self, history: Trajectory, state: int, z: int) -> np.ndarray:
        counts = self.policy_counts.get(self._cell(int(z), history, state))
        if counts is None or counts.sum() == 0:
            return np.full(self.n_actions, 1.0 / self.n_actions)
        return counts / counts.sum()

    def policy_table(self, z: int) -> np.ndarray:
        return np.array([self.policy_probs(Trajectory((), (), ()), s, z) for s in range(self.n_states)])


def bayes_optimal_fit(trajectories: Sequence[Trajectory], assignment: Sequence[int],
                      n_states: int, n_actions: int, weights: Sequence[float] | None = None,
                      markov: bool = True) -> BayesOptimalBundle:
    """Exact conditional frequencies of the (weighted) data given hard latent assignments."""
    weights = np.ones(len(trajectories)) if weights is None else np.asarray(weights, dtype=np.float64)
    n_atoms = int(max(assignment)) + 1
    fit = BayesOptimalBundle(n_states, n_actions, n_atoms, markov)
    for tau, z, w in zip(trajectories, assignment, weights):
        z = int(z)
        fit.z_mass[z] += w
        fit.return_sum[z] += w * tau.ret
        fit.prior_counts[tau.states[0], z] += w
        for t in range(len(tau)):
            fit.policy_counts[fit._cell(z, tau.prefix(t), tau.states[t])][tau.actions[t]] += w
    fit.policy_counts = dict(fit.policy_counts)
    return fit


# -- mutual information ----------------------------------------------------


def conditional_mutual_information(x: Sequence[Hashable], z: Sequence[Hashable], c: Sequence[Hashable],
                                   weights: Sequence[float] | None = None) -> float:
    """Plug-in ``MI(X; Z | C)`` in nats from weighted joint counts."""
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    joint: dict = defaultdict(float)
    for xi, zi, ci, wi in zip(x, z, c, w):
        if wi > 0:
            joint[(ci, xi, zi)] += wi
    total = sum(joint.values())
    if total <= 0:
        return 0.0
    pc, pcx, pcz = defaultdict(float), defaultdict(float), defaultdict(float)
    for (ci, xi, zi), v in joint.items():
        pc[ci] += v
        pcx[(ci, xi)] += v
        pcz[(ci, zi)] += v
    mi = 0.0
    for (ci, xi, zi), v in joint.items():
        mi += v * math.log(v * pc[ci] / (pcx[(ci, xi)] * pcz[(ci, zi)]))
    return max(mi / total, 0.0)


def mi_exact_discrete(trajectories: Sequence[Trajectory], assignments, conditioning: str = "sa",
                      weights: Sequence[float] | None = None) -> tuple[float, float]:
    """``(MI(r_t; z | C), MI(s_{t+1}; z | C))`` pooled over steps.

    ``assignments`` holds one atom id per trajectory, or an ``(n, m)`` array
    of posterior probabilities (soft assignment). ``conditioning`` is
    ``"sa"`` for ``C = (s_t, a_t)`` or ``"hsa"`` to also condition on the
    history ``tau_{0:t-1}``. Terminal steps use -1 as the next state.
    """
    if conditioning not in ("sa", "hsa"):
        raise ValueError("conditioning must be 'sa' or 'hsa'")
    assignments = np.asarray(assignments)
    tw = np.ones(len(trajectories)) if weights is None else np.asarray(weights, dtype=np.float64)
    if assignments.ndim == 1:
        atom_lists = [[(int(z), 1.0)] for z in assignments]
    else:
        atom_lists = [[(k, float(q)) for k, q in enumerate(row) if q > 0] for row in assignments]
    rs, nxt, zs, cs, ws = [], [], [], [], []
    for tau, atoms, w in zip(trajectories, atom_lists, tw):
        for t in range(len(tau)):
            s, a = tau.states[t], tau.actions[t]
            c = (s, a) if conditioning == "sa" else (tau.states[:t], tau.actions[:t], tau.rewards[:t], s, a)
            s2 = tau.states[t + 1] if t + 1 < len(tau) else -1
            for z, q in atoms:
                rs.append(tau.rewards[t])
                nxt.append(s2)
                zs.append(z)
                cs.append(c)
                ws.append(w * q)
    return (conditional_mutual_information(rs, zs, cs, ws),
            conditional_mutual_information(nxt, zs, cs, ws))


def posterior_assignments(bundle, index) -> np.ndarray:
    """Posterior probabilities ``q(z | tau)`` for every trajectory of a DatasetIndex."""
    return bundle.posterior(index.full).probs().data


# -- counter-example -------------------------------------------------------


@dataclass
class CounterexampleReport:
    policy_s0_z0: list[float]
    policy_s1_z0: list[float]
    prob_tau2_under_policy: float
    prob_tau2_given_z0_in_data: float
    value_z0: float
    exact_value_z0: float
    gap_z0: float

    @property
    def support_contradiction(self) -> bool:
        return self.prob_tau2_under_policy > 0 and self.prob_tau2_given_z0_in_data == 0

    def failures(self) -> list[str]:
        out = []
        if self.policy_s0_z0 != [0.5, 0.5]:
            out.append(f"pi(.|s0,z0) = {self.policy_s0_z0}, expected [0.5, 0.5]")
        if self.policy_s1_z0 != [0.5, 0.5]:
            out.append(f"pi(.|s1,z0) = {self.policy_s1_z0}, expected [0.5, 0.5]")
        if self.prob_tau2_under_policy != 0.25:
            out.append(f"Pr[tau2 | pi_z0, env] = {self.prob_tau2_under_policy}, expected 0.25")
        if self.prob_tau2_given_z0_in_data != 0.0:
            out.append(f"Pr[tau2 | z0, data] = {self.prob_tau2_given_z0_in_data}, expected 0")
        if self.gap_z0 != 0.0:
            out.append(f"value gap at z0 = {self.gap_z0}, expected 0")
        return out


def counterexample_check() -> CounterexampleReport:
    """Cluster {tau0, tau1} as z0 and {tau2, tau3} as z1, fit a Markov policy by counting, compare supports."""
    env = counterexample_env()
    episodes = counterexample_episodes()
    assignment = [0, 0, 1, 1]
    fit = bayes_optimal_fit(episodes, assignment, env.n_states, env.n_actions, markov=True)
    pi = conditioned_policy(fit, 0)
    tau2 = episodes[2]
    in_z0 = [tau for tau, z in zip(episodes, assignment) if z == 0]
    exact = exact_policy_value(env, pi)
    return CounterexampleReport(
        policy_s0_z0=[float(v) for v in pi.probs(0, 0)],
        policy_s1_z0=[float(v) for v in pi.probs(1, 1)],
        prob_tau2_under_policy=trajectory_probability(env, pi, tau2),
        prob_tau2_given_z0_in_data=sum(tau == tau2 for tau in in_z0) / len(in_z0),
        value_z0=fit.value(0),
        exact_value_z0=exact,
        gap_z0=abs(fit.value(0) - exact),
    )


# -- evaluation ------------------------------------------------------------

EVAL_FIELDS = ("method", "env", "p", "epsilon", "seed", "v_selected", "mean_return", "ci95",
               "exact_value", "gap")


@dataclass
class EvalReport:
    method: str
    env: str
    p: float | None
    epsilon: float | None
    seed: int
    z: object
    v_selected: float
    mean_return: float
    ci95: float
    exact_value: float | None
    gap: float | None
    gap_is_exact: bool = True
    extras: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in EVAL_FIELDS}


def ci_half_width(returns: np.ndarray) -> float:
    if len(returns) < 2:
        return 0.0
    return float(Z95 * np.std(returns, ddof=1) / math.sqrt(len(returns)))


def _rollouts(env: Environment, policy: PolicyFn, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    if isinstance(policy, MarkovPolicy):
        return rollout_returns(env, policy, n, rng)
    return np.array([sample_episode(env, policy, rng).ret for _ in range(n)])


def evaluate(bundle, env: Environment, method: str, n_rollouts: int = 10_000, K: int = DEFAULT_K,
             seed: int = 0, target_return: float | None = None, support_tol: float = SUPPORT_TOL,
             p: float | None = None, epsilon: float | None = None) -> EvalReport:
    """Select ``z*`` for the method, roll it out, and compare the learned and true values.

    Latent methods select through the prior and value function; ``rcsl``
    conditions on ``target_return`` (default: the largest return seen in
    training); ``pct-bc`` has a single unconditioned policy and no value.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    if bundle.conditioning == "return":
        z = return_latent(bundle, target_return)
        v_sel = bundle.value(z)
    elif bundle.conditioning == "none":
        z, v_sel = 0, float("nan")
    else:
        z = select_latent(bundle, env.initial_state, K, rng, support_tol=support_tol)
        v_sel = bundle.value(z)
    policy = conditioned_policy(bundle, z)
    returns = _rollouts(env, policy, n_rollouts, seed)
    mean, ci = float(returns.mean()), ci_half_width(returns)
    try:
        exact = exact_policy_value(env, policy)
        gap = abs(v_sel - exact) if np.isfinite(v_sel) else None
        gap_exact = True
    except EnumerationTooLargeError:
        exact = None
        gap = abs(v_sel - mean) if np.isfinite(v_sel) else None
        gap_exact = False
    return EvalReport(method, env.name, p, epsilon, seed, z if np.isscalar(z) else list(np.ravel(z)),
                      float(v_sel), mean, ci, exact, gap, gap_exact)


def write_reports(reports: Sequence[EvalReport], path: str | Path, extra_rows: Sequence[dict] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EVAL_FIELDS), lineterminator="\n")
        writer.writeheader()
        for r in reports:
            writer.writerow(_fmt(r.row()))
        for row in extra_rows:
            writer.writerow(_fmt({k: row.get(k) for k in EVAL_FIELDS}))
    return path


def _fmt(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if v is None or (isinstance(v, float) and math.isnan(v)):
            out[k] = ""
        elif isinstance(v, float):
            out[k] = repr(round(v, 12))
        else:
            out[k] = v
    return out


# -- consistency suite -----------------------------------------------------


def exhaustive_dataset(env: Environment, behavior: PolicyFn,
                       budget: int = DEFAULT_ENUMERATION_BUDGET) -> tuple[list[Trajectory], np.ndarray]:
    """Every reachable trajectory with its exact probability under ``behavior`` as a weight."""
    pairs = [(tau, p) for tau, p in iter_policy_trajectories(env, behavior, budget) if p > 0]
    return [tau for tau, _ in pairs], np.array([p for _, p in pairs])


def first_action_assignment(trajectories: Sequence[Trajectory]) -> list[int]:
    """``z = a_0``: carries no reward or next-state information once ``(history, s, a)`` is known."""
    return [tau.actions[0] for tau in trajectories]


@dataclass
class SuiteResult:
    name: str
    max_gap: float
    mi_reward: float
    mi_next_state: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_gap <= self.tol


def consistency_suite(envs: Sequence[Environment] | None = None, tol: float = 1e-6) -> list[SuiteResult]:
    """Bayes-optimal fits with an MI-free posterior on exhaustive data are consistent for every atom."""
    from .environments import bandit_env, frozen_lake_env, toy_tree_env, uniform_policy

    if envs is None:
        envs = [
            bandit_env(0.3),
            toy_tree_env(),
            frozen_lake_env(p=0.5, layout=("SF", "HG"), horizon=3),
            counterexample_env(),
        ]
    out = []
    for env in envs:
        trajs, weights = exhaustive_dataset(env, uniform_policy(env))
        z = first_action_assignment(trajs)
        fit = bayes_optimal_fit(trajs, z, env.n_states, env.n_actions, weights=weights, markov=False)
        gaps = [consistency_gap(fit, env, atom) for atom in sorted(set(z))]
        mi_r, mi_s = mi_exact_discrete(trajs, z, conditioning="hsa", weights=weights)
        out.append(SuiteResult(env.name, max(gaps), mi_r, mi_s, tol))
    return out
