"""Parameterised policy, posterior, prior, value and energy functions.

Two families share one interface:

* ``TabularBundle`` -- categorical latent with ``n_atoms`` atoms; every
  function is a lookup table and expectations over the latent are exact.
* ``NeuralBundle`` -- diagonal Gaussian latent; small ReLU MLPs over one-hot
  features, with history summarised by mean-pooled per-step embeddings.

Per-trajectory loss pieces (``nll``, ``contrastive``, ``value_error``) take a
conditioning ``z`` produced by ``draw``. For the tabular family ``z`` is an
``(n, n_atoms)`` mixing matrix (posterior probabilities in exact mode, a
straight-through one-hot sample otherwise); for the neural family it is an
``(n, latent_dim)`` reparameterised sample.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor, concat, stopgrad
from .datasets import SENTINEL, Dataset, NegativeSampler, step_pairs
from .environments import Trajectory

LOG_PROB_FLOOR = float(np.log(1e-12))
SIGMA_FLOOR = 1e-6
LOG_SIGMA_RANGE = (-5.0, 2.0)
CHECKPOINT_MAGIC = b"FCKPT"
CHECKPOINT_VERSION = 1


class KindMismatchError(TypeError):
    pass


# -- parameters ------------------------------------------------------------


class ParamStore:
    """Named parameter arrays; a name's prefix before the first dot is its group."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or n.split(".", 1)[0] == group]

    def groups(self) -> list[str]:
        return list(OrderedDict.fromkeys(n.split(".", 1)[0] for n in self.params))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def grad(self, name: str) -> np.ndarray:
        g = self.params[name].grad
        return np.zeros_like(self.params[name].data) if g is None else g

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, t.data.copy()) for n, t in self.params.items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name}")
            if self.params[name].data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape}")
            self.params[name].data = np.array(value, dtype=np.float64)


# -- latent distributions --------------------------------------------------


@dataclass
class LatentDistribution:
    kind: str  # "categorical" | "gaussian"
    logits: Tensor | None = None
    mu: Tensor | None = None
    log_sigma: Tensor | None = None

    @classmethod
    def categorical(cls, logits) -> "LatentDistribution":
        return cls("categorical", logits=_t(logits))

    @classmethod
    def gaussian(cls, mu, log_sigma) -> "LatentDistribution":
        log_sigma = _t(log_sigma).clip(*LOG_SIGMA_RANGE)
        return cls("gaussian", mu=_t(mu), log_sigma=log_sigma)

    @property
    def dim(self) -> int:
        return (self.logits if self.kind == "categorical" else self.mu).shape[-1]

    def probs(self) -> Tensor:
        return self.logits.softmax(axis=-1)

    def log_probs(self) -> Tensor:
        return self.logits.log_softmax(axis=-1)

    def sigma(self) -> Tensor:
        return self.log_sigma.exp().maximum(SIGMA_FLOOR)

    def detach(self) -> "LatentDistribution":
        if self.kind == "categorical":
            return LatentDistribution("categorical", logits=self.logits.detach())
        return LatentDistribution("gaussian", mu=self.mu.detach(), log_sigma=self.log_sigma.detach())


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def kl(a: LatentDistribution, b: LatentDistribution) -> Tensor:
    """Closed-form KL(a || b), summed over the last axis."""
    if a.kind != b.kind or a.dim != b.dim:
        raise KindMismatchError(f"cannot compare {a.kind}[{a.dim}] with {b.kind}[{b.dim}]")
    if a.kind == "categorical":
        pa = a.probs()
        return (pa * (a.log_probs() - b.log_probs())).sum(axis=-1)
    sa, sb = a.sigma(), b.sigma()
    ratio = (sa / sb).square()
    diff = ((a.mu - b.mu) / sb).square()
    return ((ratio + diff - 1.0) * 0.5 - sa.log() + sb.log()).sum(axis=-1)


def sample_latent(
    dist: LatentDistribution, rng: np.random.Generator, temperature: float = 1.0
) -> Tensor:
    """Reparameterised sample.

    Gaussian: ``mu + sigma * eps``. Categorical: straight-through Gumbel
    softmax; the forward value is one-hot, the gradient is that of the
    relaxed sample at ``temperature``.
    """
    if dist.kind == "gaussian":
        eps = rng.standard_normal(dist.mu.shape)
        return dist.mu + dist.sigma() * eps
    logits = dist.logits
    gumbel = -np.log(-np.log(rng.uniform(1e-12, 1.0, size=logits.shape)))
    soft = ((logits + gumbel) * (1.0 / temperature)).softmax(axis=-1)
    hard = np.zeros(soft.shape)
    np.put_along_axis(hard, soft.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return soft + (hard - soft.data)


# -- batches ---------------------------------------------------------------


def trajectory_key(tau: Trajectory, window: int) -> tuple:
    w = min(window, len(tau))
    return (tau.states[:w], tau.actions[:w], tau.rewards[:w], tau.ret)


@dataclass
class Batch:
    states: np.ndarray        # (n, T) int
    actions: np.ndarray       # (n, T) int
    rewards: np.ndarray       # (n, T) float
    next_states: np.ndarray   # (n, T) int, SENTINEL mapped to n_states
    rho_index: np.ndarray     # (n, T) index into the negative sampler support
    keys: np.ndarray          # (n,) posterior table rows
    returns: np.ndarray       # (n,)
    return_atoms: np.ndarray  # (n,) index into the sorted distinct returns
    weights: np.ndarray       # (n,) nonnegative, sums to 1

    def __len__(self) -> int:
        return len(self.states)

    @property
    def initial_states(self) -> np.ndarray:
        return self.states[:, 0]

    def take(self, idx: np.ndarray, weights: np.ndarray | None = None) -> "Batch":
        w = self.weights[idx] if weights is None else weights
        return Batch(
            self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx],
            self.rho_index[idx], self.keys[idx], self.returns[idx], self.return_atoms[idx],
            np.asarray(w, dtype=np.float64) / np.sum(w),
        )


class DatasetIndex:
    """Array view of a dataset with posterior keys and negative-sampler indices."""

    def __init__(self, dataset: Dataset, sampler: NegativeSampler, window: int,
                 keys: Sequence[tuple] | None = None):
        self.dataset = dataset
        self.sampler = sampler
        self.window = window
        self.n_states = dataset.n_states
        states, actions, rewards = dataset.arrays()
        nxt = np.concatenate([states[:, 1:], np.full((len(states), 1), SENTINEL)], axis=1)
        rho = sampler.index()
        rho_index = np.array([[rho[pair] for pair in step_pairs(t)] for t in dataset])
        sigs = [trajectory_key(t, window) for t in dataset]
        if keys is None:
            keys = list(OrderedDict.fromkeys(sigs))
        self.key_list = list(keys)
        key_pos = {k: i for i, k in enumerate(self.key_list)}
        key_idx = np.array([key_pos.get(k, -1) for k in sigs])
        returns = dataset.returns()
        self.return_values = np.unique(returns)
        ret_atoms = np.searchsorted(self.return_values, returns)
        self.full = Batch(
            states, actions, rewards, np.where(nxt == SENTINEL, self.n_states, nxt),
            rho_index, key_idx, returns, ret_atoms, np.full(len(states), 1.0 / len(states)),
        )
        # identical trajectories collapse into one weighted row
        traj_ids: dict[Trajectory, int] = {}
        first, counts = [], []
        for i, t in enumerate(dataset):
            j = traj_ids.setdefault(t, len(first))
            if j == len(first):
                first.append(i)
                counts.append(0)
            counts[j] += 1
        self.unique_rows = np.array(first)
        self.unique_counts = np.array(counts, dtype=np.float64)

    def full_batch(self) -> Batch:
        return self.full.take(self.unique_rows, self.unique_counts)

    def sample_batch(self, size: int, rng: np.random.Generator) -> Batch:
        if size >= len(self.dataset):
            return self.full_batch()
        idx = rng.integers(0, len(self.dataset), size=size)
        uniq, counts = np.unique(idx, return_counts=True)
        return self.full.take(uniq, counts.astype(np.float64))


# -- networks --------------------------------------------------------------


class MLP:
    """Two-layer ReLU network stored in a ParamStore under ``prefix``."""

    def __init__(self, store: ParamStore, prefix: str, sizes: Sequence[int], rng: np.random.Generator):
        self.names = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = store.add(f"{prefix}.w{i}", rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            b = store.add(f"{prefix}.b{i}", np.zeros(fan_out))
            self.names.append((w, b))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])
        for i, (w, b) in enumerate(self.names):
            h = h @ w + b
            if i < len(self.names) - 1:
                h = h.relu()
        return h.reshape(*lead, h.shape[-1])


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def log_mean_exp(x: Tensor, axis: int = -1, log_weights: np.ndarray | None = None) -> Tensor:
    """Stable ``log E[exp x]``; uniform weights unless ``log_weights`` (normalised) is given."""
    if log_weights is None:
        return x.logsumexp(axis=axis) - float(np.log(x.shape[axis]))
    return (x + log_weights).logsumexp(axis=axis)


# -- bundles ---------------------------------------------------------------


class TabularBundle:
    kind = "tabular"

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        n_atoms: int,
        n_keys: int,
        n_rho: int,
        seed: int = 0,
        conditioning: str = "latent",
        atom_values: Sequence[float] | None = None,
        init_scale: float = 0.05,
        meta: dict | None = None,
    ):
        self.n_states, self.n_actions, self.n_atoms = n_states, n_actions, n_atoms
        self.n_keys, self.n_rho = n_keys, n_rho
        self.seed = seed
        # "latent" (learned posterior), "return" (z is the episode return) or "none"
        self.conditioning = conditioning
        self.atom_values = None if atom_values is None else np.asarray(atom_values, dtype=np.float64)
        self.meta = dict(meta or {})
        rng = np.random.default_rng(seed)
        u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)  # noqa: E731
        self.store = ParamStore()
        self.store.add("policy.logits", u(n_states, n_atoms, n_actions))
        self.store.add("posterior.logits", u(max(n_keys, 1), n_atoms))
        self.store.add("prior.logits", u(n_states, n_atoms))
        self.store.add("value.table", u(n_atoms))
        self.store.add("energy.table", u(max(n_rho, 1), n_atoms, n_states, n_actions))

    def config(self) -> dict:
        return {
            "class": "TabularBundle",
            "n_states": self.n_states, "n_actions": self.n_actions, "n_atoms": self.n_atoms,
            "n_keys": self.n_keys, "n_rho": self.n_rho, "seed": self.seed,
            "conditioning": self.conditioning,
            "atom_values": None if self.atom_values is None else self.atom_values.tolist(),
            "meta": self.meta,
        }

    # distributions
    def posterior(self, batch: Batch) -> LatentDistribution:
        return LatentDistribution.categorical(self.store["posterior.logits"][batch.keys])

    def prior(self, s0: np.ndarray) -> LatentDistribution:
        return LatentDistribution.categorical(self.store["prior.logits"][np.asarray(s0)])

    def draw(self, batch: Batch, rng: np.random.Generator | None = None, exact: bool = True,
             temperature: float = 1.0, detach: bool = False) -> Tensor:
        if self.conditioning == "return":
            return Tensor(one_hot(batch.return_atoms, self.n_atoms))
        if self.conditioning == "none":
            return Tensor(np.ones((len(batch), 1)))
        q = self.posterior(batch)
        z = q.probs() if exact else sample_latent(q, rng, temperature)
        return z.detach() if detach else z

    # per-atom tables gathered along the batch
    def _atoms(self) -> np.ndarray:
        return np.arange(self.n_atoms)[None, None, :]

    def action_logp_atoms(self, batch: Batch) -> Tensor:
        logp = self.store["policy.logits"].log_softmax(axis=-1)
        out = logp[batch.states[:, :, None], self._atoms(), batch.actions[:, :, None]]
        return out.maximum(LOG_PROB_FLOOR)

    def contrastive_atoms(self, batch: Batch, sampler: NegativeSampler,
                          rng: np.random.Generator | None = None, n_negatives: int | None = None,
                          include_positive: bool = True) -> Tensor:
        table = self.store["energy.table"]
        s, a = batch.states[:, :, None], batch.actions[:, :, None]
        f_pos = table[batch.rho_index[:, :, None], self._atoms(), s, a]
        if n_negatives is None:
            # exact expectation over the sampler's support
            log_w = np.log(sampler.weights)[:, None, None, None]
            log_part = (table + log_w).logsumexp(axis=0)
            return f_pos - log_part[self._atoms(), s, a]
        neg = sampler.sample(batch.states.shape + (n_negatives,), rng)
        f_neg = table[neg[:, :, None, :], self._atoms()[..., None], s[..., None], a[..., None]]
        if include_positive:
            f_neg = concat([f_neg, f_pos.expand_dims(-1)], axis=-1)
        return f_pos - log_mean_exp(f_neg, axis=-1)

    def nll(self, batch: Batch, z: Tensor) -> Tensor:
        per_atom = -self.action_logp_atoms(batch).sum(axis=1)
        return (per_atom * z).sum(axis=-1)

    def contrastive(self, batch: Batch, z: Tensor, sampler: NegativeSampler,
                    rng: np.random.Generator | None = None, n_negatives: int | None = None,
                    include_positive: bool = True) -> Tensor:
        per_atom = self.contrastive_atoms(batch, sampler, rng, n_negatives, include_positive).sum(axis=1)
        return (per_atom * z).sum(axis=-1)

    def value_error(self, batch: Batch, z: Tensor) -> Tensor:
        err = (self.store["value.table"][None, :] - batch.returns[:, None]).square()
        return (err * z).sum(axis=-1)

    # inference
    def value(self, z: int) -> float:
        if self.conditioning == "return":
            return float(self.atom_values[z])
        return float(self.store["value.table"].data[z])

    def prior_probs(self, s0: int) -> np.ndarray:
        return self.prior(np.array([s0])).probs().data[0]

    def policy_probs(self, history: Trajectory, state: int, z: int) -> np.ndarray:
        logits = self.store["policy.logits"].data[state, z]
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def policy_table(self, z: int) -> np.ndarray:
        logits = self.store["policy.logits"].data[:, z]
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class NeuralBundle:
    kind = "neural"

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        latent_dim: int = 8,
        hidden: int = 64,
        embed_dim: int = 16,
        context: int = 20,
        window: int = 20,
        seed: int = 0,
        conditioning: str = "latent",
        return_scale: float = 1.0,
        meta: dict | None = None,
    ):
        self.n_states, self.n_actions = n_states, n_actions
        self.latent_dim = latent_dim if conditioning == "latent" else 1
        self.hidden, self.embed_dim = hidden, embed_dim
        self.context, self.window = context, window
        self.seed = seed
        self.conditioning = conditioning
        self.return_scale = float(return_scale) or 1.0
        self.meta = dict(meta or {})
        rng = np.random.default_rng(seed)
        S, A, d, E, Hd = n_states, n_actions, self.latent_dim, embed_dim, hidden
        step_in = S + A + 1
        self.store = ParamStore()
        self.policy_embed = MLP(self.store, "policy.embed", [step_in, Hd, E], rng)
        self.policy_head = MLP(self.store, "policy.head", [E + S + d, Hd, A], rng)
        self.posterior_embed = MLP(self.store, "posterior.embed", [step_in, Hd, E], rng)
        self.posterior_head = MLP(self.store, "posterior.head", [E, Hd, 2 * d], rng)
        self.prior_net = MLP(self.store, "prior.net", [S, Hd, 2 * d], rng)
        self.value_net = MLP(self.store, "value.net", [d, Hd, 1], rng)
        self.energy_net = MLP(self.store, "energy.net", [1 + S + 1 + d + E + S + A, Hd, 1], rng)

    def config(self) -> dict:
        return {
            "class": "NeuralBundle",
            "n_states": self.n_states, "n_actions": self.n_actions,
            "latent_dim": self.latent_dim, "hidden": self.hidden, "embed_dim": self.embed_dim,
            "context": self.context, "window": self.window, "seed": self.seed,
            "conditioning": self.conditioning, "return_scale": self.return_scale, "meta": self.meta,
        }

    # features
    def _step_features(self, states, actions, rewards) -> np.ndarray:
        return np.concatenate(
            [one_hot(states, self.n_states), one_hot(actions, self.n_actions), rewards[..., None]], axis=-1
        )

    def _history(self, feats: np.ndarray) -> Tensor:
        T = feats.shape[-2]
        avg = np.zeros((T, T))
        for t in range(1, T):
            lo = max(0, t - self.context)
            avg[t, lo:t] = 1.0 / (t - lo)
        emb = self.policy_embed(Tensor(feats))
        return Tensor(avg) @ emb

    # distributions
    def posterior(self, batch: Batch) -> LatentDistribution:
        w = min(self.window, batch.states.shape[1])
        feats = self._step_features(batch.states[:, :w], batch.actions[:, :w], batch.rewards[:, :w])
        pooled = self.posterior_embed(Tensor(feats)).mean(axis=1)
        out = self.posterior_head(pooled)
        d = self.latent_dim
        return LatentDistribution.gaussian(out[:, :d], out[:, d:])

    def prior(self, s0: np.ndarray) -> LatentDistribution:
        out = self.prior_net(Tensor(one_hot(np.asarray(s0), self.n_states)))
        d = self.latent_dim
        return LatentDistribution.gaussian(out[..., :d], out[..., d:])

    def draw(self, batch: Batch, rng: np.random.Generator | None = None, exact: bool = True,
             temperature: float = 1.0, detach: bool = False) -> Tensor:
        if self.conditioning == "return":
            return Tensor(batch.returns[:, None] / self.return_scale)
        if self.conditioning == "none":
            return Tensor(np.zeros((len(batch), 1)))
        z = sample_latent(self.posterior(batch), rng)
        return z.detach() if detach else z

    def _policy_logp(self, hist: Tensor, states: np.ndarray, z: Tensor) -> Tensor:
        n, T = states.shape
        zt = z.expand_dims(1).broadcast_to((n, T, z.shape[-1]))
        logits = self.policy_head(concat([hist, Tensor(one_hot(states, self.n_states)), zt], axis=-1))
        return logits.log_softmax(axis=-1)

    def nll(self, batch: Batch, z: Tensor) -> Tensor:
        hist = self._history(self._step_features(batch.states, batch.actions, batch.rewards))
        logp = self._policy_logp(hist, batch.states, z)
        n, T = batch.states.shape
        picked = logp[np.arange(n)[:, None], np.arange(T)[None, :], batch.actions]
        return -picked.maximum(LOG_PROB_FLOOR).sum(axis=1)

    def _energy(self, r: np.ndarray, s_next: np.ndarray, z: Tensor, hist: Tensor,
                states: np.ndarray, actions: np.ndarray) -> Tensor:
        lead = r.shape
        zt = z.reshape(z.shape[0], *([1] * (len(lead) - 1)), z.shape[-1]).broadcast_to(lead + (z.shape[-1],))
        h = hist.reshape(*hist.shape[:2], *([1] * (len(lead) - 2)), hist.shape[-1]).broadcast_to(
            lead + (hist.shape[-1],)
        )
        ctx = np.concatenate([one_hot(states, self.n_states), one_hot(actions, self.n_actions)], axis=-1)
        ctx = np.broadcast_to(ctx.reshape(*ctx.shape[:2], *([1] * (len(lead) - 2)), ctx.shape[-1]),
                              lead + (ctx.shape[-1],))
        x = concat([Tensor(r[..., None]), Tensor(one_hot(s_next, self.n_states + 1)), zt, h, Tensor(ctx)], axis=-1)
        return self.energy_net(x)[..., 0]

    def contrastive(self, batch: Batch, z: Tensor, sampler: NegativeSampler,
                    rng: np.random.Generator | None = None, n_negatives: int | None = None,
                    include_positive: bool = True) -> Tensor:
        hist = stopgrad(self._history(self._step_features(batch.states, batch.actions, batch.rewards)))
        f_pos = self._energy(batch.rewards, batch.next_states, z, hist, batch.states, batch.actions)
        rho_r = sampler.rewards()
        rho_s = np.where(sampler.next_states() == SENTINEL, self.n_states, sampler.next_states())
        n, T = batch.states.shape
        if n_negatives is None:
            J = len(sampler)
            idx = np.broadcast_to(np.arange(J), (n, T, J))
            log_w = np.log(sampler.weights)
        else:
            idx = sampler.sample((n, T, n_negatives), rng)
            log_w = None
        f_neg = self._energy(rho_r[idx], rho_s[idx], z, hist, batch.states, batch.actions)
        if n_negatives is not None and include_positive:
            f_neg = concat([f_neg, f_pos.expand_dims(-1)], axis=-1)
        return (f_pos - log_mean_exp(f_neg, axis=-1, log_weights=log_w)).sum(axis=1)

    def value_error(self, batch: Batch, z: Tensor) -> Tensor:
        v = self.value_net(z)[:, 0]
        return (v - batch.returns).square()

    # inference
    def value(self, z) -> float:
        if self.conditioning == "return":
            return float(np.asarray(z).ravel()[0] * self.return_scale)
        return float(self.value_net(Tensor(np.asarray(z, dtype=np.float64)[None, :])).data[0, 0])

    def policy_probs(self, history: Trajectory, state: int, z) -> np.ndarray:
        states = np.array([list(history.states) + [state]])
        actions = np.array([list(history.actions) + [0]])
        rewards = np.array([list(history.rewards) + [0.0]])
        hist = self._history(self._step_features(states, actions, rewards))
        zt = Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
        logp = self._policy_logp(hist, states, zt).data[0, -1]
        p = np.exp(logp - logp.max())
        return p / p.sum()


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(bundle, path: str | Path) -> Path:
    """Flat named-array container: magic, version, JSON header, then raw little-endian float64 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = bundle.store.state_dict()
    index = [{"name": n, "shape": list(a.shape)} for n, a in state.items()]
    header = json.dumps({"config": bundle.config(), "arrays": index}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for arr in state.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path):
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack("<II", raw[off: off + 8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off: off + hlen])
    off += hlen
    cfg = dict(header["config"])
    cls = {"TabularBundle": TabularBundle, "NeuralBundle": NeuralBundle}[cfg.pop("class")]
    bundle = cls(**cfg)
    state = {}
    for entry in header["arrays"]:
        size = int(np.prod(entry["shape"])) * 8
        state[entry["name"]] = np.frombuffer(raw[off: off + size], dtype="<f8").reshape(entry["shape"]).copy()
        off += size
    bundle.store.load_state_dict(state)
    return bundle
