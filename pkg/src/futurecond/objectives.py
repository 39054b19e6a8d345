"""Training losses and the training loop.

Methods:

* ``rcsl``   -- imitate actions conditioned on the episode return.
* ``pct-bc`` -- unconditional imitation of the top ``percentile`` of episodes by return.
* ``vae``    -- future-conditioned imitation with a KL(q || prior) penalty.
* ``doc``    -- future-conditioned imitation with a contrastive penalty that
  removes reward/next-state information from the latent, plus value and
  prior fitting for inference.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autograd import Tensor
from .datasets import Dataset, NegativeSampler, build_negative_sampler
from .models import (
    DatasetIndex,
    NeuralBundle,
    TabularBundle,
    kl,
    log_mean_exp,
)

log = logging.getLogger(__name__)

METHODS = ("rcsl", "vae", "doc", "pct-bc")
EXHAUSTIVE_NEGATIVES_MAX = 64
EXACT_LATENT_MAX_ATOMS = 64


class NumericError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    method: str = "doc"
    beta: float = 1.0
    learning_rate: float = 0.05
    batch_size: int = 0  # 0 means the full dataset each step
    negatives: int = 16
    steps: int = 1500
    seed: int = 0
    window: int = 20
    percentile: float = 0.1
    model: str = "tabular"
    n_atoms: int = 16
    latent_dim: int = 8
    optimizer: str = "adam"
    lr_schedule: str = "linear"
    include_positive: bool = True
    energy_steps: int = 1
    temperature: float = 1.0
    grad_clip: float | None = None
    exhaustive_negatives: bool | None = None  # None: exhaustive when the sampler support is small
    exact_latent: bool | None = None          # None: exact expectation when n_atoms is small
    log_every: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 0 or self.negatives < 1 or self.steps < 0:
            raise ValueError("batch_size >= 0, negatives >= 1 and steps >= 0 are required")
        if self.model not in ("tabular", "neural"):
            raise ValueError(f"unknown model family {self.model!r}")
        if not 0.0 < self.percentile <= 1.0:
            raise ValueError("percentile must lie in (0, 1]")

    def use_exhaustive(self, sampler: NegativeSampler) -> bool:
        if self.exhaustive_negatives is not None:
            return self.exhaustive_negatives
        return self.model == "tabular" and len(sampler) <= EXHAUSTIVE_NEGATIVES_MAX

    def use_exact_latent(self) -> bool:
        if self.exact_latent is not None:
            return self.exact_latent
        return self.model == "tabular" and self.n_atoms <= EXACT_LATENT_MAX_ATOMS


@dataclass
class LossReport:
    step: int
    nll: float
    contrastive: float = 0.0
    value_mse: float = 0.0
    prior_kl: float = 0.0
    total: float = 0.0

    CSV_FIELDS = ("step", "nll", "contrastive", "value_mse", "prior_kl", "total")

    def row(self) -> list:
        return [self.step, self.nll, self.contrastive, self.value_mse, self.prior_kl, self.total]


def _wmean(values: Tensor, weights: np.ndarray) -> Tensor:
    return (values * weights).sum()


# -- losses ----------------------------------------------------------------


def rcsl_loss(bundle, batch) -> Tensor:
    """Mean over the batch of summed per-step action NLL, conditioned on the episode return."""
    if bundle.conditioning not in ("return", "none"):
        raise ValueError("rcsl_loss needs a return-conditioned (or unconditioned) bundle")
    z = bundle.draw(batch)
    return _wmean(bundle.nll(batch, z), batch.weights)


def vae_loss(bundle, batch, beta: float, rng=None, z: Tensor | None = None, exact: bool = True):
    """Future-conditioned NLL plus ``beta`` x KL(q || prior); q receives gradient from both terms.

    Returns ``(loss, nll, kl)``.
    """
    if z is None:
        z = bundle.draw(batch, rng, exact=exact)
    nll = _wmean(bundle.nll(batch, z), batch.weights)
    prior_kl = _wmean(kl(bundle.posterior(batch), bundle.prior(batch.initial_states)), batch.weights)
    return nll + beta * prior_kl, nll, prior_kl


def contrastive_term(
    energy: Callable,
    z,
    step: tuple,
    sampler: NegativeSampler,
    n_negatives: int | None = None,
    rng: np.random.Generator | None = None,
    include_positive: bool = True,
) -> Tensor:
    """``f(r, s') - log E_rho[exp f(r~, s~')]`` for one step ``(history, s, a, r, s_next)``.

    ``energy(r, s_next, z, history, s, a)`` returns a scalar. With
    ``n_negatives=None`` the expectation is the exact weighted sum over the
    sampler support; otherwise it is a log-mean-exp over ``n_negatives``
    draws, with the positive pair appended when ``include_positive``.
    """
    history, s, a, r, s_next = step
    f_pos = energy(r, s_next, z, history, s, a)
    f_pos = f_pos if isinstance(f_pos, Tensor) else Tensor(f_pos)
    if n_negatives is None:
        idx = np.arange(len(sampler))
        log_w = np.log(sampler.weights)
    else:
        idx = sampler.sample(n_negatives, rng)
        log_w = None
    vals = [energy(*sampler.support[i], z, history, s, a) for i in idx]
    if n_negatives is not None and include_positive:
        vals.append(f_pos)
    f_neg = _stack(vals)
    if not np.isfinite(f_neg.data).all() or not np.isfinite(f_pos.data).all():
        raise NumericError("energy function returned a non-finite value")
    return f_pos.reshape(()) - log_mean_exp(f_neg, axis=-1, log_weights=log_w)


def _stack(vals) -> Tensor:
    from .autograd import concat

    return concat([(v if isinstance(v, Tensor) else Tensor(v)).reshape(1) for v in vals], axis=0)


def doc_loss(bundle, batch, sampler: NegativeSampler, beta: float, n_negatives: int | None = None,
             rng=None, z: Tensor | None = None, exact: bool = True, include_positive: bool = True):
    """Returns ``(policy_side, energy_side, nll, contrastive)``.

    ``policy_side`` = NLL + beta x contrastive, minimised over policy and
    posterior. ``energy_side`` = contrastive with the latent detached,
    maximised over the energy function.
    """
    if z is None:
        z = bundle.draw(batch, rng, exact=exact)
    nll = _wmean(bundle.nll(batch, z), batch.weights)
    con = _wmean(bundle.contrastive(batch, z, sampler, rng, n_negatives, include_positive), batch.weights)
    policy_side = nll + beta * con
    energy_side = _wmean(
        bundle.contrastive(batch, z.detach(), sampler, rng, n_negatives, include_positive), batch.weights
    )
    return policy_side, energy_side, nll, con


def aux_loss(bundle, batch, rng=None, z: Tensor | None = None, exact: bool = True,
             with_prior: bool = True):
    """Value regression plus KL(stopgrad(q) || prior); nothing flows back into the posterior.

    Returns ``(loss, value_mse, prior_kl)``.
    """
    z = bundle.draw(batch, rng, exact=exact, detach=True) if z is None else z.detach()
    value_mse = _wmean(bundle.value_error(batch, z), batch.weights)
    if not with_prior:
        return value_mse, value_mse, Tensor(0.0)
    q = bundle.posterior(batch).detach()
    prior_kl = _wmean(kl(q, bundle.prior(batch.initial_states)), batch.weights)
    return value_mse + prior_kl, value_mse, prior_kl


# -- optimisation ----------------------------------------------------------


class Optimizer:
    """Adam or SGD over a ParamStore; groups listed in ``ascend`` move uphill."""

    def __init__(self, store, lr: float, kind: str = "adam", ascend=("energy",),
                 betas=(0.9, 0.999), eps: float = 1e-8, grad_clip: float | None = None):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.store, self.lr, self.kind = store, lr, kind
        self.ascend = set(ascend)
        self.betas, self.eps, self.grad_clip = betas, eps, grad_clip
        self.m = {n: np.zeros_like(t.data) for n, t in store.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        if self.grad_clip is not None:
            norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                grads = {n: g * (self.grad_clip / norm) for n, g in grads.items()}
        b1, b2 = self.betas
        for name, g in grads.items():
            sign = 1.0 if name.split(".", 1)[0] in self.ascend else -1.0
            param = self.store[name]
            if self.kind == "sgd":
                param.data = param.data + sign * lr * g
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            param.data = param.data + sign * lr * mhat / (np.sqrt(vhat) + self.eps)


def _collect(store, groups) -> dict[str, np.ndarray]:
    return {n: store.grad(n).copy() for g in groups for n in store.names(g)}


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    bundle: object
    log: list[LossReport]
    index: DatasetIndex
    config: TrainConfig
    extras: dict = field(default_factory=dict)


def filter_top_percentile(dataset: Dataset, percentile: float) -> Dataset:
    """Keep episodes whose return reaches the ``1 - percentile`` quantile."""
    rets = dataset.returns()
    threshold = np.quantile(rets, 1.0 - percentile)
    return dataset.subset(rets >= threshold, note=f"return >= {threshold:g}")


def build_bundle(config: TrainConfig, index: DatasetIndex):
    d = index.dataset
    conditioning = {"rcsl": "return", "pct-bc": "none"}.get(config.method, "latent")
    meta = {"method": config.method}
    if config.model == "tabular":
        if conditioning == "return":
            n_atoms, atom_values = len(index.return_values), index.return_values
        elif conditioning == "none":
            n_atoms, atom_values = 1, None
        else:
            n_atoms, atom_values = config.n_atoms, None
        return TabularBundle(
            d.n_states, d.n_actions, n_atoms, len(index.key_list), len(index.sampler),
            seed=config.seed, conditioning=conditioning, atom_values=atom_values, meta=meta,
        )
    scale = float(np.max(np.abs(index.return_values))) or 1.0
    return NeuralBundle(
        d.n_states, d.n_actions, latent_dim=config.latent_dim, context=config.window,
        window=config.window, seed=config.seed, conditioning=conditioning,
        return_scale=scale, meta=meta,
    )


def train(method: str | None, dataset: Dataset, config: TrainConfig | None = None) -> TrainResult:
    """Gradient training; deterministic for a fixed ``config.seed``.

    Per step: draw a batch, draw the latent (exact posterior expectation for
    small tabular latents), evaluate the method's loss and update. For
    ``doc`` the policy and posterior descend the policy-side objective, the
    value and prior descend the auxiliary objective, and the energy function
    ascends the contrastive objective.
    """
    config = config or TrainConfig()
    if method is not None and method != config.method:
        config = TrainConfig(**{**asdict(config), "method": method})
    if config.method == "pct-bc":
        dataset = filter_top_percentile(dataset, config.percentile)
    sampler = build_negative_sampler(dataset)
    index = DatasetIndex(dataset, sampler, config.window)
    bundle = build_bundle(config, index)
    store = bundle.store
    opt = Optimizer(store, config.learning_rate, config.optimizer, grad_clip=config.grad_clip)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    exact = config.use_exact_latent()
    n_neg = None if config.use_exhaustive(sampler) else config.negatives
    history: list[LossReport] = []

    for step in range(config.steps):
        lr = config.learning_rate
        if config.lr_schedule == "linear":
            lr *= 1.0 - step / max(config.steps, 1)
        batch = index.sample_batch(config.batch_size or len(dataset), rng)
        store.zero_grad()
        report = LossReport(step=step, nll=0.0)

        if config.method in ("rcsl", "pct-bc"):
            loss = rcsl_loss(bundle, batch)
            loss.backward()
            report.nll = report.total = loss.item()
            grads = _collect(store, ["policy"])
        elif config.method == "vae":
            z = bundle.draw(batch, rng, exact=exact, temperature=config.temperature)
            loss, nll, prior_kl = vae_loss(bundle, batch, config.beta, z=z)
            value_loss, value_mse, _ = aux_loss(bundle, batch, z=z, with_prior=False)
            (loss + value_loss).backward()
            report.nll, report.prior_kl, report.value_mse = nll.item(), prior_kl.item(), value_mse.item()
            report.total = loss.item() + value_mse.item()
            grads = _collect(store, ["policy", "posterior", "prior", "value"])
        else:
            z = bundle.draw(batch, rng, exact=exact, temperature=config.temperature)
            policy_side, energy_side, nll, con = doc_loss(
                bundle, batch, sampler, config.beta, n_neg, rng, z=z,
                include_positive=config.include_positive,
            )
            a_loss, value_mse, prior_kl = aux_loss(bundle, batch, z=z)
            (policy_side + a_loss).backward()
            grads = _collect(store, ["policy", "posterior", "value", "prior"])
            store.zero_grad()
            energy_side.backward()
            grads.update(_collect(store, ["energy"]))
            for _ in range(config.energy_steps - 1):
                opt_energy_only(opt, grads, lr)
                store.zero_grad()
                _, energy_side, _, _ = doc_loss(
                    bundle, batch, sampler, config.beta, n_neg, rng, z=z.detach(),
                    include_positive=config.include_positive,
                )
                energy_side.backward()
                grads.update(_collect(store, ["energy"]))
            report.nll, report.contrastive = nll.item(), con.item()
            report.value_mse, report.prior_kl = value_mse.item(), prior_kl.item()
            report.total = policy_side.item() + a_loss.item()

        if not np.isfinite(report.total):
            raise TrainingDivergedError(step, report.total)
        opt.step(grads, lr)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            history.append(report)
            log.debug("step %d total %.6f", step, report.total)
    return TrainResult(bundle, history, index, config)


def opt_energy_only(opt: Optimizer, grads: dict[str, np.ndarray], lr: float) -> None:
    """Apply only the energy-group part of ``grads`` (extra inner ascent steps)."""
    opt.step({n: g for n, g in grads.items() if n.startswith("energy.")}, lr)
    for n in [n for n in grads if n.startswith("energy.")]:
        del grads[n]
