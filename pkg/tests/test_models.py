from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from futurecond.autograd import Tensor
from futurecond.datasets import build_negative_sampler, collect, literal_dataset
from futurecond.environments import frozen_lake_env, toy_tree_env, toy_tree_fixture, uniform_policy
from futurecond.models import (
    SIGMA_FLOOR,
    DatasetIndex,
    KindMismatchError,
    LatentDistribution,
    NeuralBundle,
    TabularBundle,
    kl,
    load_checkpoint,
    sample_latent,
    save_checkpoint,
)

from oracles import categorical_kl


def tree_index(window=20):
    d = literal_dataset(toy_tree_fixture(), toy_tree_env())
    return DatasetIndex(d, build_negative_sampler(d), window)


def tabular_for(index, n_atoms=4, seed=0):
    d = index.dataset
    return TabularBundle(d.n_states, d.n_actions, n_atoms, len(index.key_list), len(index.sampler), seed=seed)


def test_identical_trajectories_share_posterior():
    index = tree_index()
    b = tabular_for(index)
    q = b.posterior(index.full).probs().data
    # rows 1 and 2 of the fixture are the same episode
    np.testing.assert_array_equal(q[1], q[2])
    np.testing.assert_allclose(q.sum(axis=1), 1.0)


def test_tabular_posterior_near_uniform_at_init():
    index = tree_index()
    q = tabular_for(index, n_atoms=8).posterior(index.full).probs().data
    assert np.abs(q - 1 / 8).max() < 0.02


def test_gaussian_posterior_finite_positive_sigma():
    env = frozen_lake_env(p=0.5)
    d = collect(env, uniform_policy(env), 5, seed=0)
    index = DatasetIndex(d, build_negative_sampler(d), 20)
    b = NeuralBundle(d.n_states, d.n_actions, seed=1)
    q = b.posterior(index.full)
    assert np.isfinite(q.mu.data).all()
    assert (q.sigma().data > 0).all()


def test_sigma_floor_sample_close_to_mean():
    dist = LatentDistribution.gaussian(np.array([[0.3, -1.0]]), np.array([[-50.0, -50.0]]))
    z = sample_latent(dist, np.random.default_rng(0))
    # log sigma is clamped at -5, so samples stay within a few multiples of exp(-5)
    assert np.abs(z.data - dist.mu.data).max() < 6 * np.exp(-5)
    assert dist.sigma().data.min() >= SIGMA_FLOOR


def test_single_atom_categorical_sample():
    logits = Tensor(np.zeros((3, 1)), requires_grad=True)
    z = sample_latent(LatentDistribution.categorical(logits), np.random.default_rng(0))
    np.testing.assert_array_equal(z.data, 1.0)
    z.sum().backward()
    assert np.isfinite(logits.grad).all()


def test_gaussian_sample_mean_clt():
    mu = np.array([[0.5, -2.0, 1.0]])
    dist = LatentDistribution.gaussian(np.repeat(mu, 100_000, axis=0), np.zeros((100_000, 3)))
    z = sample_latent(dist, np.random.default_rng(3)).data
    assert np.all(np.abs(z.mean(axis=0) - mu[0]) <= 4 / np.sqrt(100_000))


def test_reparameterised_gradient_of_mean_is_one():
    n = 100_000
    mu = Tensor(np.zeros((1, 2)), requires_grad=True)
    dist = LatentDistribution.gaussian(mu.broadcast_to((n, 2)), np.zeros((n, 2)))
    sample_latent(dist, np.random.default_rng(0)).mean(axis=0).sum().backward()
    np.testing.assert_allclose(mu.grad, 1.0, atol=0.05)


def test_kl_closed_forms():
    a = LatentDistribution.categorical(np.log([[0.9, 0.1]]))
    b = LatentDistribution.categorical(np.log([[0.5, 0.5]]))
    assert kl(a, b).item() == pytest.approx(categorical_kl([0.9, 0.1], [0.5, 0.5]), abs=1e-12)
    assert kl(a, b).item() == pytest.approx(0.3680642071684971, abs=1e-12)
    mu = 1.7
    g1 = LatentDistribution.gaussian(np.array([[mu, mu]]), np.zeros((1, 2)))
    g0 = LatentDistribution.gaussian(np.zeros((1, 2)), np.zeros((1, 2)))
    assert kl(g1, g0).item() == pytest.approx(2 * mu**2 / 2)
    assert kl(g0, g0).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_kind_mismatch():
    with pytest.raises(KindMismatchError):
        kl(LatentDistribution.categorical(np.zeros((1, 2))), LatentDistribution.gaussian(np.zeros((1, 2)), np.zeros((1, 2))))
    with pytest.raises(KindMismatchError):
        kl(LatentDistribution.categorical(np.zeros((1, 2))), LatentDistribution.categorical(np.zeros((1, 3))))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.booleans())
def test_kl_nonnegative_and_zero_on_equal(seed, dim, gaussian):
    rng = np.random.default_rng(seed)
    if gaussian:
        a = LatentDistribution.gaussian(rng.normal(size=(1, dim)), rng.uniform(-2, 1, size=(1, dim)))
        b = LatentDistribution.gaussian(rng.normal(size=(1, dim)), rng.uniform(-2, 1, size=(1, dim)))
    else:
        a = LatentDistribution.categorical(rng.normal(size=(1, dim)) * 3)
        b = LatentDistribution.categorical(rng.normal(size=(1, dim)) * 3)
    assert kl(a, b).item() >= -1e-12
    assert abs(kl(a, a).item()) <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_policy_outputs_are_distributions(seed):
    rng = np.random.default_rng(seed)
    index = tree_index()
    tab = tabular_for(index, seed=seed % 1000)
    tab.store["policy.logits"].data = rng.normal(size=tab.store["policy.logits"].shape) * 20
    for z in range(tab.n_atoms):
        assert abs(tab.policy_table(z).sum(axis=1) - 1).max() <= 1e-9
    nb = NeuralBundle(4, 2, seed=seed % 1000)
    p = nb.policy_probs(toy_tree_fixture()[0].prefix(1), 1, rng.normal(size=8) * 10)
    assert abs(p.sum() - 1) <= 1e-9 and (p >= 0).all()


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    index = tree_index()
    b = tabular_for(index, seed=3)
    path = save_checkpoint(b, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    for name, arr in b.store.state_dict().items():
        assert np.array_equal(arr, back.store[name].data)
    assert save_checkpoint(back, tmp_path / "n.ckpt").read_bytes() == path.read_bytes()
    nb = NeuralBundle(5, 4, seed=2, latent_dim=3)
    p2 = save_checkpoint(nb, tmp_path / "nn.ckpt")
    nb2 = load_checkpoint(p2)
    for name, arr in nb.store.state_dict().items():
        assert np.array_equal(arr, nb2.store[name].data)


def test_checkpoint_rejects_other_files(tmp_path):
    f = tmp_path / "x.ckpt"
    f.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(f)


def test_param_store_zero_grad_shapes():
    b = tabular_for(tree_index())
    b.store.zero_grad()
    for name in b.store.names():
        assert b.store[name].grad.shape == b.store[name].data.shape
        assert not b.store[name].grad.any()
    assert set(b.store.groups()) == {"policy", "posterior", "prior", "value", "energy"}
