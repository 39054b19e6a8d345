"""Offline datasets: collection, scripted behaviour policies, persistence and the negative sampler."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .environments import (
    Environment,
    MarkovPolicy,
    PolicyFn,
    Trajectory,
    sample_episode,
)

SENTINEL = -1  # next-state placeholder for the final step of an episode


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnsupportedEnvironmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    env_fingerprint: str | None = None
    behavior_meta: dict = field(default_factory=dict)
    n_states: int | None = None
    n_actions: int | None = None

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise EmptyDatasetError("dataset has no trajectories")
        lengths = {len(t) for t in trajs}
        if len(lengths) != 1:
            raise DatasetError(f"trajectories have mixed horizons: {sorted(lengths)}")
        object.__setattr__(self, "trajectories", trajs)
        if self.n_states is None:
            object.__setattr__(self, "n_states", 1 + max(max(t.states) for t in trajs))
        if self.n_actions is None:
            object.__setattr__(self, "n_actions", 1 + max(max(t.actions) for t in trajs))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    @property
    def horizon(self) -> int:
        return len(self.trajectories[0]) - 1

    def returns(self) -> np.ndarray:
        return np.array([t.ret for t in self.trajectories])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        states = np.array([t.states for t in self.trajectories], dtype=np.int64)
        actions = np.array([t.actions for t in self.trajectories], dtype=np.int64)
        rewards = np.array([t.rewards for t in self.trajectories], dtype=np.float64)
        return states, actions, rewards

    def subset(self, keep: Sequence[bool] | np.ndarray, note: str = "") -> "Dataset":
        trajs = tuple(t for t, k in zip(self.trajectories, keep) if k)
        meta = dict(self.behavior_meta)
        if note:
            meta["filter"] = note
        return Dataset(trajs, self.env_fingerprint, meta, self.n_states, self.n_actions)


@dataclass(frozen=True)
class NegativeSampler:
    """Empirical joint marginal over ``(reward, next_state)`` pairs."""

    support: tuple[tuple[float, int], ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.support)

    def index(self) -> dict[tuple[float, int], int]:
        return {pair: i for i, pair in enumerate(self.support)}

    def rewards(self) -> np.ndarray:
        return np.array([r for r, _ in self.support])

    def next_states(self) -> np.ndarray:
        return np.array([s for _, s in self.support], dtype=np.int64)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Draw support indices with probability ``weights``."""
        return rng.choice(len(self.support), size=size, p=self.weights)


def step_pairs(tau: Trajectory) -> list[tuple[float, int]]:
    nxt = list(tau.states[1:]) + [SENTINEL]
    return [(r, s2) for r, s2 in zip(tau.rewards, nxt)]


def build_negative_sampler(d: Dataset) -> NegativeSampler:
    counts = Counter(pair for tau in d for pair in step_pairs(tau))
    support = tuple(sorted(counts))
    total = sum(counts.values())
    return NegativeSampler(support, np.array([counts[k] / total for k in support]))


# -- behaviour policies ----------------------------------------------------


def bandit_behavior(p: float) -> MarkovPolicy:
    """Pulls arm 0 with probability ``p`` and arm 1 otherwise."""
    return MarkovPolicy(np.array([[p, 1.0 - p]]))


def value_iteration(env: Environment) -> tuple[np.ndarray, np.ndarray]:
    """Finite-horizon backward induction.

    Returns ``(values, q)`` with ``values[t, s]`` the optimal expected
    reward-to-go from step ``t`` (``values[H + 1] = 0``) and ``q[t, s, a]``
    the action values; unavailable actions get ``-inf``.
    """
    H, S = env.horizon, env.n_states
    rbar = env.expected_reward()
    values = np.zeros((H + 2, S))
    q = np.zeros((H + 1, S, env.n_actions))
    for t in range(H, -1, -1):
        q[t] = rbar + env.transition_probs @ values[t + 1]
        q[t][~env.action_mask] = -np.inf
        values[t] = q[t].max(axis=1)
    return values, q


def greedy_table(env: Environment) -> np.ndarray:
    _, q = value_iteration(env)
    greedy = np.zeros_like(q)
    best = q.argmax(axis=-1)  # lowest index wins ties
    np.put_along_axis(greedy, best[..., None], 1.0, axis=-1)
    return greedy


def epsilon_mixed_planner(
    env: Environment, epsilon: float, plan_env: Environment | None = None
) -> MarkovPolicy:
    """Greedy on finite-horizon values of ``plan_env`` (default ``env``), uniform with probability ``epsilon``."""
    plan_env = plan_env or env
    if not env.markov or not plan_env.markov:
        raise UnsupportedEnvironmentError("the planner needs a Markov environment")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if plan_env.horizon != env.horizon:
        plan_env = plan_env.with_horizon(env.horizon)
    mask = env.action_mask.astype(np.float64)
    uniform = mask / mask.sum(axis=1, keepdims=True)
    return MarkovPolicy((1.0 - epsilon) * greedy_table(plan_env) + epsilon * uniform)


# -- construction ----------------------------------------------------------


def collect(
    env: Environment, behavior: PolicyFn, n: int, seed: int, meta: dict | None = None
) -> Dataset:
    """``n`` i.i.d. episodes; episode ``i`` uses its own RNG stream spawned from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n)
    trajs = tuple(sample_episode(env, behavior, np.random.default_rng(ss)) for ss in streams)
    info = {"seed": seed, "n": n, **(meta or {})}
    return Dataset(trajs, env.fingerprint(), info, env.n_states, env.n_actions)


def literal_dataset(
    trajectories: Sequence[Trajectory], env: Environment | None = None, meta: dict | None = None
) -> Dataset:
    if env is None:
        return Dataset(tuple(trajectories), None, dict(meta or {"behavior": "literal"}))
    return Dataset(
        tuple(trajectories),
        env.fingerprint(),
        dict(meta or {"behavior": "literal"}),
        env.n_states,
        env.n_actions,
    )


# -- persistence -----------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def save(d: Dataset, path: str | Path) -> Path:
    """One JSON record per line; a ``.meta`` sidecar carries fingerprint and behaviour info."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for tau in d:
            rec = {"states": list(tau.states), "actions": list(tau.actions), "rewards": list(tau.rewards)}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    meta = {
        "fingerprint": d.env_fingerprint,
        "behavior": d.behavior_meta,
        "n_states": d.n_states,
        "n_actions": d.n_actions,
        "n_trajectories": len(d),
    }
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    trajs = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                trajs.append(Trajectory(rec["states"], rec["actions"], rec["rewards"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetParseError(line_no, str(exc)) from exc
            if trajs and len(trajs[-1]) != len(trajs[0]):
                raise DatasetParseError(line_no, "trajectory horizon differs from line 1")
    if not trajs:
        raise EmptyDatasetError(f"dataset file {path} is empty")
    meta_file = _meta_path(path)
    meta = json.loads(meta_file.read_text(encoding="utf-8")) if meta_file.exists() else {}
    return Dataset(
        tuple(trajs),
        meta.get("fingerprint"),
        meta.get("behavior", {}),
        meta.get("n_states"),
        meta.get("n_actions"),
    )
