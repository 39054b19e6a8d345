"""Finite-horizon stochastic environments with exact distribution access.

Every environment is tabular: rewards and next states are drawn
independently given ``(state, action)`` from explicit finite distributions,
so trajectory probabilities can be enumerated exactly. Absorbing states are
self-loops with zero reward, which keeps every episode at ``horizon + 1``
decision steps.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

PROB_TOL = 1e-12
DEFAULT_ENUMERATION_BUDGET = 1_000_000

LEFT, DOWN, RIGHT, UP = 0, 1, 2, 3
_MOVES = {LEFT: (0, -1), DOWN: (1, 0), RIGHT: (0, 1), UP: (-1, 0)}
_PERPENDICULAR = {LEFT: (UP, DOWN), RIGHT: (DOWN, UP), UP: (LEFT, RIGHT), DOWN: (RIGHT, LEFT)}

CLASSIC_4X4 = ("SFFF", "FHFH", "FFFH", "HFFG")


class InvalidParameterError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class PolicyError(ValueError):
    pass


class EnumerationTooLargeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if not len(self.states) == len(self.actions) == len(self.rewards):
            raise ValueError(
                f"trajectory lists differ in length: {len(self.states)}, "
                f"{len(self.actions)}, {len(self.rewards)}"
            )

    def __len__(self) -> int:
        return len(self.states)

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    @property
    def ret(self) -> float:
        return float(sum(self.rewards))

    def prefix(self, t: int) -> "Trajectory":
        """The sub-episode of the first ``t`` steps (empty for ``t == 0``)."""
        return Trajectory(self.states[:t], self.actions[:t], self.rewards[:t])


EMPTY_HISTORY = Trajectory((), (), ())

# A policy maps (history so far, current state) to a distribution over actions.
PolicyFn = Callable[[Trajectory, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class Environment:
    """Tabular finite-horizon MDP.

    ``reward_probs[s, a, k]`` is the probability of reward ``reward_values[k]``
    and ``transition_probs[s, a, s']`` the probability of moving to ``s'``.
    ``action_mask[s, a]`` marks the actions available in ``s``.
    """

    name: str
    n_states: int
    n_actions: int
    horizon: int
    initial_state: int
    reward_values: np.ndarray
    reward_probs: np.ndarray
    transition_probs: np.ndarray
    action_mask: np.ndarray
    params: dict = field(default_factory=dict)
    state_labels: tuple[str, ...] = ()
    markov: bool = True

    def __post_init__(self):
        for name in ("reward_values", "reward_probs", "transition_probs", "action_mask"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        S, A = self.n_states, self.n_actions
        if self.horizon < 0:
            raise InvalidParameterError("horizon must be >= 0")
        if not 0 <= self.initial_state < S:
            raise InvalidParameterError("initial state out of range")
        if self.reward_probs.shape != (S, A, len(self.reward_values)):
            raise InvalidParameterError(f"reward_probs has shape {self.reward_probs.shape}")
        if self.transition_probs.shape != (S, A, S):
            raise InvalidParameterError(
                f"transition_probs has shape {self.transition_probs.shape}"
            )
        if self.action_mask.shape != (S, A) or not self.action_mask.any(axis=1).all():
            raise InvalidParameterError("every state needs at least one available action")
        for arr, what in ((self.reward_probs, "reward"), (self.transition_probs, "transition")):
            if (arr < 0).any() or np.abs(arr.sum(axis=-1) - 1.0).max() > PROB_TOL:
                raise InvalidParameterError(f"{what} distributions must sum to 1")

    # -- distribution access ---------------------------------------------
    def reward_dist(self, s: int, a: int) -> list[tuple[float, float]]:
        probs = self.reward_probs[s, a]
        return [(float(self.reward_values[k]), float(probs[k])) for k in np.flatnonzero(probs)]

    def transition_dist(self, s: int, a: int) -> list[tuple[int, float]]:
        probs = self.transition_probs[s, a]
        return [(int(s2), float(probs[s2])) for s2 in np.flatnonzero(probs)]

    def valid_actions(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.action_mask[s])

    def expected_reward(self) -> np.ndarray:
        """Mean reward table of shape ``(n_states, n_actions)``."""
        return self.reward_probs @ self.reward_values

    def is_deterministic(self) -> bool:
        return bool(
            ((self.reward_probs > 0).sum(-1) == 1).all()
            and ((self.transition_probs > 0).sum(-1) == 1).all()
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"name": self.name, "params": self.params}, sort_keys=True).encode())
        h.update(json.dumps([self.n_states, self.n_actions, self.horizon, self.initial_state]).encode())
        for arr in (self.reward_values, self.reward_probs, self.transition_probs, self.action_mask):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def with_horizon(self, horizon: int) -> "Environment":
        return _replace(self, horizon=horizon, params={**self.params, "horizon": horizon})

    def restrict(self, probs: np.ndarray, s: int) -> np.ndarray:
        """Validate a policy output and renormalise it onto the actions available in ``s``.

        If the policy puts no mass on any available action, the available
        actions are taken uniformly.
        """
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (self.n_actions,):
            raise PolicyError(f"policy returned shape {probs.shape}, expected ({self.n_actions},)")
        if not np.isfinite(probs).all() or (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-6:
            raise PolicyError(f"policy returned an invalid distribution {probs}")
        masked = probs * self.action_mask[s]
        total = masked.sum()
        if total <= 0:
            # all mass on unavailable actions: the move is forced
            masked, total = self.action_mask[s].astype(np.float64), float(self.action_mask[s].sum())
        return masked / total


def _replace(env: Environment, **changes) -> Environment:
    fields = {
        k: getattr(env, k)
        for k in (
            "name", "n_states", "n_actions", "horizon", "initial_state", "reward_values",
            "reward_probs", "transition_probs", "action_mask", "params", "state_labels", "markov",
        )
    }
    fields.update(changes)
    return Environment(**fields)


def _check_prob(value: float, name: str) -> float:
    if not (0.0 <= value <= 1.0) or not np.isfinite(value):
        raise InvalidParameterError(f"{name} must lie in [0, 1], got {value}")
    return float(value)


def _point_rewards(values: Sequence[float], table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Turn an ``(S, A)`` table of deterministic rewards into support/probability arrays."""
    support = np.array(sorted(set(values) | set(np.unique(table).tolist())), dtype=np.float64)
    probs = (table[..., None] == support).astype(np.float64)
    return support, probs


# -- built-in environments -------------------------------------------------


def bandit_env(p: float) -> Environment:
    """Two-armed Bernoulli bandit: arm 0 pays Bern(1 - p), arm 1 pays Bern(p)."""
    p = _check_prob(p, "p")
    reward_probs = np.array([[[p, 1.0 - p], [1.0 - p, p]]])
    return Environment(
        name="bandit",
        n_states=1,
        n_actions=2,
        horizon=0,
        initial_state=0,
        reward_values=np.array([0.0, 1.0]),
        reward_probs=reward_probs,
        transition_probs=np.ones((1, 2, 1)),
        action_mask=np.ones((1, 2), dtype=bool),
        params={"p": p},
        state_labels=("s0",),
    )


TREE_ROOT, TREE_HIGH, TREE_ZERO, TREE_LOW = 0, 1, 2, 3


def toy_tree_env(q_hi: float = 0.01, r_hi: float = 100.0, r_lo: float = 10.0) -> Environment:
    """Two-step tree: action 0 gambles on a rare high-reward leaf, action 1 surely reaches ``r_lo``.

    The root pays nothing. Leaves offer a single action that pays the leaf
    reward, so the three reachable episodes differ only in the leaf reached.
    """
    q_hi = _check_prob(q_hi, "q_hi")
    S, A = 4, 2
    rewards = np.zeros((S, A))
    rewards[TREE_HIGH] = r_hi
    rewards[TREE_LOW] = r_lo
    support, reward_probs = _point_rewards([0.0], rewards)
    trans = np.zeros((S, A, S))
    trans[TREE_ROOT, 0, TREE_HIGH] = q_hi
    trans[TREE_ROOT, 0, TREE_ZERO] = 1.0 - q_hi
    trans[TREE_ROOT, 1, TREE_LOW] = 1.0
    for leaf in (TREE_HIGH, TREE_ZERO, TREE_LOW):
        trans[leaf, :, leaf] = 1.0
    mask = np.ones((S, A), dtype=bool)
    mask[1:, 1] = False
    return Environment(
        name="toytree",
        n_states=S,
        n_actions=A,
        horizon=1,
        initial_state=TREE_ROOT,
        reward_values=support,
        reward_probs=reward_probs,
        transition_probs=trans,
        action_mask=mask,
        params={"q_hi": q_hi, "r_hi": float(r_hi), "r_lo": float(r_lo)},
        state_labels=("root", "leaf_high", "leaf_zero", "leaf_low"),
    )


def toy_tree_fixture(env: Environment | None = None) -> list[Trajectory]:
    """Four hand-built episodes: one lucky gamble, two failed gambles, one safe choice."""
    env = env or toy_tree_env()
    r_hi, r_lo = env.params["r_hi"], env.params["r_lo"]
    return [
        Trajectory((TREE_ROOT, TREE_HIGH), (0, 0), (0.0, r_hi)),
        Trajectory((TREE_ROOT, TREE_ZERO), (0, 0), (0.0, 0.0)),
        Trajectory((TREE_ROOT, TREE_ZERO), (0, 0), (0.0, 0.0)),
        Trajectory((TREE_ROOT, TREE_LOW), (1, 0), (0.0, r_lo)),
    ]


def parse_layout(text: str | Sequence[str]) -> tuple[str, ...]:
    rows = text.split() if isinstance(text, str) else [r.strip() for r in text]
    rows = tuple(r for r in rows if r)
    if not rows:
        raise LayoutError("layout is empty")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise LayoutError(f"row {i} has length {len(row)}, expected {width}")
        bad = set(row) - set("SFHG")
        if bad:
            raise LayoutError(f"row {i} contains unknown cells {sorted(bad)}")
    joined = "".join(rows)
    if joined.count("S") != 1:
        raise LayoutError("layout needs exactly one start cell 'S'")
    if "G" not in joined:
        raise LayoutError("layout needs at least one goal cell 'G'")
    return rows


def load_layout(path: str | Path) -> tuple[str, ...]:
    return parse_layout(Path(path).read_text(encoding="utf-8").splitlines())


def frozen_lake_env(
    width: int | None = None,
    height: int | None = None,
    p: float = 1.0 / 3.0,
    layout: Sequence[str] | str = CLASSIC_4X4,
    horizon: int = 20,
) -> Environment:
    """Slippery grid world.

    An action moves in the intended direction with probability ``p`` and
    slips to each perpendicular direction with probability ``(1 - p) / 2``.
    Moves off the grid leave the agent in place. Acting on a goal cell pays 1
    and moves to an extra absorbing sink state; holes absorb with reward 0.
    """
    p = _check_prob(p, "p")
    rows = parse_layout(layout)
    if height is not None and height != len(rows) or width is not None and width != len(rows[0]):
        raise LayoutError(f"layout is {len(rows[0])}x{len(rows)}, expected {width}x{height}")
    nrow, ncol = len(rows), len(rows[0])
    n_cells = nrow * ncol
    sink = n_cells
    S, A = n_cells + 1, 4
    trans = np.zeros((S, A, S))
    rewards = np.zeros((S, A))
    start = 0
    for r in range(nrow):
        for c in range(ncol):
            s = r * ncol + c
            cell = rows[r][c]
            if cell == "S":
                start = s
            if cell == "G":
                trans[s, :, sink] = 1.0
                rewards[s, :] = 1.0
                continue
            if cell == "H":
                trans[s, :, s] = 1.0
                continue
            for a in range(A):
                side1, side2 = _PERPENDICULAR[a]
                for move, prob in ((a, p), (side1, 0.5 * (1 - p)), (side2, 0.5 * (1 - p))):
                    if prob == 0.0:
                        continue
                    dr, dc = _MOVES[move]
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < nrow and 0 <= nc < ncol):
                        nr, nc = r, c
                    trans[s, a, nr * ncol + nc] += prob
    trans[sink, :, sink] = 1.0
    support, reward_probs = _point_rewards([0.0], rewards)
    labels = tuple(f"{rows[i // ncol][i % ncol]}({i // ncol},{i % ncol})" for i in range(n_cells))
    return Environment(
        name="frozenlake",
        n_states=S,
        n_actions=A,
        horizon=horizon,
        initial_state=start,
        reward_values=support,
        reward_probs=reward_probs,
        transition_probs=trans,
        action_mask=np.ones((S, A), dtype=bool),
        params={"p": p, "layout": list(rows), "horizon": horizon},
        state_labels=labels + ("sink",),
    )


def counterexample_env() -> Environment:
    """Three-state deterministic chain with two binary choices and zero reward everywhere."""
    S, A = 3, 2
    trans = np.zeros((S, A, S))
    trans[0, :, 1] = 1.0
    trans[1, :, 2] = 1.0
    trans[2, :, 2] = 1.0
    reward_probs = np.ones((S, A, 1))
    return Environment(
        name="counterexample",
        n_states=S,
        n_actions=A,
        horizon=1,
        initial_state=0,
        reward_values=np.array([0.0]),
        reward_probs=reward_probs,
        transition_probs=trans,
        action_mask=np.ones((S, A), dtype=bool),
        params={},
        state_labels=("s0", "s1", "terminal"),
    )


def counterexample_episodes() -> list[Trajectory]:
    """The four episodes tau_0..tau_3, ordered (0,0), (1,1), (0,1), (1,0)."""
    return [
        Trajectory((0, 1), (a0, a1), (0.0, 0.0))
        for a0, a1 in ((0, 0), (1, 1), (0, 1), (1, 0))
    ]


ENVIRONMENTS = {
    "bandit": bandit_env,
    "toytree": toy_tree_env,
    "frozenlake": frozen_lake_env,
    "counterexample": counterexample_env,
}


def make_env(name: str, **params) -> Environment:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise InvalidParameterError(
            f"unknown environment {name!r}; known: {', '.join(sorted(ENVIRONMENTS))}"
        ) from None
    return factory(**params)


# -- policies --------------------------------------------------------------


class MarkovPolicy:
    """Tabular policy over ``(state)`` or ``(timestep, state)``.

    ``table`` has shape ``(S, A)`` for a stationary policy or ``(H + 1, S, A)``
    for a time-dependent one.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim not in (2, 3):
            raise PolicyError("Markov policy table must be (S, A) or (T, S, A)")
        self.table = table

    def probs(self, t: int, s: int) -> np.ndarray:
        if self.table.ndim == 2:
            return self.table[s]
        return self.table[min(t, len(self.table) - 1), s]

    def time_table(self, horizon: int) -> np.ndarray:
        if self.table.ndim == 2:
            return np.broadcast_to(self.table, (horizon + 1,) + self.table.shape)
        return self.table[: horizon + 1]

    def __call__(self, history: Trajectory, state: int) -> np.ndarray:
        return self.probs(len(history), state)


def uniform_policy(env: Environment) -> MarkovPolicy:
    mask = env.action_mask.astype(np.float64)
    return MarkovPolicy(mask / mask.sum(axis=1, keepdims=True))


def constant_policy(env: Environment, action: int) -> MarkovPolicy:
    table = np.zeros((env.n_states, env.n_actions))
    table[:, action] = 1.0
    return MarkovPolicy(table)


# -- simulation ------------------------------------------------------------


def sample_episode(env: Environment, policy: PolicyFn, rng: np.random.Generator) -> Trajectory:
    states: list[int] = []
    actions: list[int] = []
    rewards: list[float] = []
    s = env.initial_state
    for t in range(env.horizon + 1):
        history = Trajectory(states, actions, rewards)
        probs = env.restrict(policy(history, s), s)
        a = int(rng.choice(env.n_actions, p=probs))
        k = int(rng.choice(len(env.reward_values), p=env.reward_probs[s, a]))
        states.append(s)
        actions.append(a)
        rewards.append(float(env.reward_values[k]))
        if t < env.horizon:
            s = int(rng.choice(env.n_states, p=env.transition_probs[s, a]))
    return Trajectory(states, actions, rewards)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(len(probs))[:, None]
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)


def rollout_returns(
    env: Environment, policy: MarkovPolicy, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorised Monte Carlo returns of ``n`` episodes under a Markov policy."""
    table = policy.time_table(env.horizon)
    mask = env.action_mask.astype(np.float64)
    s = np.full(n, env.initial_state)
    total = np.zeros(n)
    for t in range(env.horizon + 1):
        pa = table[t][s] * mask[s]
        pa = np.where(pa.sum(axis=1, keepdims=True) > 0, pa, mask[s])
        pa /= pa.sum(axis=1, keepdims=True)
        a = _sample_rows(pa, rng)
        k = _sample_rows(env.reward_probs[s, a], rng)
        total += env.reward_values[k]
        if t < env.horizon:
            s = _sample_rows(env.transition_probs[s, a], rng)
    return total


def enumerate_trajectories(
    env: Environment, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> list[tuple[Trajectory, float]]:
    """All trajectories with nonzero environment support and their reward x transition factors.

    Actions are enumerated over the available set; the caller multiplies in
    the policy factors (see :func:`trajectory_probability`).
    """
    out: list[tuple[Trajectory, float]] = []
    H = env.horizon

    def visit(states, actions, rewards, s, prob):
        for a in env.valid_actions(s):
            for r, pr in env.reward_dist(s, a):
                st, ac, rw = states + (s,), actions + (int(a),), rewards + (r,)
                if len(st) == H + 1:
                    if len(out) >= budget:
                        raise EnumerationTooLargeError(
                            f"more than {budget} trajectories in {env.name}"
                        )
                    out.append((Trajectory(st, ac, rw), prob * pr))
                    continue
                for s2, ps in env.transition_dist(s, a):
                    visit(st, ac, rw, s2, prob * pr * ps)

    visit((), (), (), env.initial_state, 1.0)
    return out


def policy_factor(env: Environment, policy: PolicyFn, tau: Trajectory) -> float:
    prob = 1.0
    for t in range(len(tau)):
        s = tau.states[t]
        prob *= env.restrict(policy(tau.prefix(t), s), s)[tau.actions[t]]
        if prob == 0.0:
            break
    return prob


def environment_factor(env: Environment, tau: Trajectory) -> float:
    if tau.states[0] != env.initial_state:
        return 0.0
    prob = 1.0
    for t in range(len(tau)):
        s, a, r = tau.states[t], tau.actions[t], tau.rewards[t]
        if not env.action_mask[s, a]:
            return 0.0
        prob *= float(env.reward_probs[s, a][env.reward_values == r].sum())
        if t + 1 < len(tau):
            prob *= float(env.transition_probs[s, a, tau.states[t + 1]])
    return prob


def trajectory_probability(env: Environment, policy: PolicyFn, tau: Trajectory) -> float:
    """Pr[tau | policy, env]."""
    env_part = environment_factor(env, tau)
    return env_part * policy_factor(env, policy, tau) if env_part > 0 else 0.0


def iter_policy_trajectories(
    env: Environment, policy: PolicyFn, budget: int = DEFAULT_ENUMERATION_BUDGET
) -> Iterator[tuple[Trajectory, float]]:
    for tau, env_prob in enumerate_trajectories(env, budget):
        yield tau, env_prob * policy_factor(env, policy, tau)
