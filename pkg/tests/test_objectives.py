from __future__ import annotations

import math

import numpy as np
import pytest

from futurecond.autograd import Tensor, numerical_gradient
from futurecond.datasets import bandit_behavior, build_negative_sampler, collect, literal_dataset
from futurecond.environments import (
    Trajectory,
    bandit_env,
    counterexample_env,
    counterexample_episodes,
    frozen_lake_env,
    toy_tree_env,
    toy_tree_fixture,
    uniform_policy,
)
from futurecond.inference import mi_exact_discrete, posterior_assignments, select_latent
from futurecond.models import LOG_PROB_FLOOR, DatasetIndex, NeuralBundle, TabularBundle
from futurecond.objectives import (
    NumericError,
    Optimizer,
    TrainConfig,
    TrainingDivergedError,
    aux_loss,
    contrastive_term,
    doc_loss,
    rcsl_loss,
    train,
    vae_loss,
)
from futurecond.models import save_checkpoint

from oracles import softmax


def make_index(trajs, window=20, env=None):
    d = literal_dataset(trajs, env)
    return DatasetIndex(d, build_negative_sampler(d), window)


def tabular(index, n_atoms=3, seed=0, conditioning="latent", scale=1.0):
    d = index.dataset
    b = TabularBundle(d.n_states, d.n_actions, n_atoms, len(index.key_list), len(index.sampler), seed=seed,
                      conditioning=conditioning,
                      atom_values=index.return_values if conditioning == "return" else None)
    rng = np.random.default_rng(seed + 100)
    for name in b.store.names():
        b.store[name].data = rng.normal(size=b.store[name].shape) * scale
    return b


# -- RCSL --------------------------------------------------------------------


def test_rcsl_perfect_policy_zero_loss():
    index = make_index(toy_tree_fixture(), env=toy_tree_env())
    b = tabular(index, n_atoms=len(index.return_values), conditioning="return")
    logits = np.full(b.store["policy.logits"].shape, -1e3)
    # every (state, return) pair in the fixture has a single observed action
    for row in range(len(index.dataset)):
        for t in range(2):
            s, a = index.full.states[row, t], index.full.actions[row, t]
            logits[s, index.full.return_atoms[row], a] = 1e3
    b.store["policy.logits"].data = logits
    assert rcsl_loss(b, index.full_batch()).item() == pytest.approx(0.0, abs=1e-12)


def test_rcsl_uniform_binary_is_log2():
    index = make_index([Trajectory((0,), (0,), (1.0,)), Trajectory((0,), (1,), (0.0,))])
    b = tabular(index, n_atoms=2, conditioning="return", scale=0.0)
    assert rcsl_loss(b, index.full_batch()).item() == pytest.approx(math.log(2))


def test_rcsl_hand_computed_fixture():
    trajs = [Trajectory((0, 1), (0, 1), (0.0, 1.0)), Trajectory((0, 1), (1, 1), (0.0, 0.0))]
    index = make_index(trajs)
    b = tabular(index, n_atoms=2, conditioning="return", scale=0.0)
    logits = np.zeros(b.store["policy.logits"].shape)
    logits[0, 1, 0] = math.log(3.0)   # return 1: pi(a0|s0) = 3/4
    logits[1, 1, 1] = math.log(4.0)   # return 1: pi(a1|s1) = 4/5
    logits[0, 0, 1] = math.log(9.0)   # return 0: pi(a1|s0) = 9/10
    b.store["policy.logits"].data = logits
    # by hand: 0.5 * [-(log 3/4 + log 4/5)] + 0.5 * [-(log 9/10 + log 1/2)]
    hand = 0.5 * -(math.log(0.75) + math.log(0.8)) + 0.5 * -(math.log(0.9) + math.log(0.5))
    assert rcsl_loss(b, index.full_batch()).item() == pytest.approx(hand, abs=1e-12)


def test_zero_probability_action_is_clamped():
    index = make_index([Trajectory((0,), (1,), (0.0,))])
    b = tabular(index, n_atoms=1, conditioning="return", scale=0.0)
    logits = np.zeros(b.store["policy.logits"].shape)
    logits[0, 0, 0] = 1e4
    b.store["policy.logits"].data = logits
    assert rcsl_loss(b, index.full_batch()).item() == pytest.approx(-LOG_PROB_FLOOR)


# -- VAE ---------------------------------------------------------------------


def test_vae_beta_zero_is_nll_and_matches_exact_enumeration():
    index = make_index(toy_tree_fixture(), env=toy_tree_env())
    b = tabular(index, n_atoms=3, seed=4)
    batch = index.full_batch()
    loss0, nll, _ = vae_loss(b, batch, beta=0.0)
    assert loss0.item() == pytest.approx(nll.item(), abs=0)
    # oracle: explicit sums over trajectories, steps and atoms
    pol = softmax(b.store["policy.logits"].data)
    q = softmax(b.store["posterior.logits"].data)
    prior = softmax(b.store["prior.logits"].data)
    beta = 0.7
    total = 0.0
    for row, w in zip(range(len(batch)), batch.weights):
        key = batch.keys[row]
        s0 = batch.states[row, 0]
        for z in range(3):
            nll_z = -sum(np.log(pol[batch.states[row, t], z, batch.actions[row, t]]) for t in range(2))
            total += w * q[key, z] * nll_z
        total += w * beta * sum(q[key, z] * np.log(q[key, z] / prior[s0, z]) for z in range(3))
    assert vae_loss(b, batch, beta=beta)[0].item() == pytest.approx(total, abs=1e-12)


def test_vae_kl_zero_when_posterior_equals_prior():
    index = make_index(toy_tree_fixture(), env=toy_tree_env())
    b = tabular(index, n_atoms=3, seed=1)
    b.store["posterior.logits"].data[:] = b.store["prior.logits"].data[0]
    _, _, prior_kl = vae_loss(b, index.full_batch(), beta=1.0)
    assert prior_kl.item() == pytest.approx(0.0, abs=1e-12)


def test_vae_gradient_reaches_posterior_through_kl():
    index = make_index(toy_tree_fixture(), env=toy_tree_env())
    b = tabular(index, n_atoms=3, seed=2)
    b.store.zero_grad()
    batch = index.full_batch()
    z = b.draw(batch).detach()  # isolate the KL path
    vae_loss(b, batch, beta=1.0, z=z)[0].backward()
    assert np.abs(b.store.grad("posterior.logits")).max() > 0


# -- contrastive term --------------------------------------------------------


def _sampler_fixture():
    trajs = [Trajectory((0, 1), (0, 1), (float(r), 0.0)) for r in (0, 1, 1, 2)]
    return build_negative_sampler(literal_dataset(trajs))


def test_contrastive_constant_energy_is_zero():
    sampler = _sampler_fixture()
    step = ((), 0, 0, 1.0, 1)
    f = lambda r, s2, z, h, s, a: Tensor(3.7)  # noqa: E731
    assert contrastive_term(f, None, step, sampler).item() == pytest.approx(0.0, abs=1e-12)
    assert contrastive_term(f, None, step, sampler, 5, np.random.default_rng(0)).item() == pytest.approx(0.0, abs=1e-12)


def test_contrastive_single_negative_equal_to_positive_is_zero():
    sampler = _sampler_fixture()
    pos = sampler.support[0]
    step = ((), 0, 0, pos[0], pos[1])
    table = {pair: v for pair, v in zip(sampler.support, [0.3, -1.2, 2.0, 0.7])}
    f = lambda r, s2, z, h, s, a: Tensor(table[(r, s2)])  # noqa: E731
    one_atom = type(sampler)((pos,), np.array([1.0]))
    assert contrastive_term(f, None, step, one_atom, 1, np.random.default_rng(0), include_positive=False).item() == 0.0


def test_contrastive_exhaustive_matches_direct_summation():
    sampler = _sampler_fixture()
    rng = np.random.default_rng(7)
    table = {pair: rng.normal() * 3 for pair in sampler.support}
    f = lambda r, s2, z, h, s, a: Tensor(table[(r, s2)])  # noqa: E731
    for pos in sampler.support:
        step = ((), 0, 0, pos[0], pos[1])
        direct = table[pos] - math.log(sum(w * math.exp(table[p]) for p, w in zip(sampler.support, sampler.weights)))
        assert abs(contrastive_term(f, None, step, sampler).item() - direct) <= 1e-9


def test_contrastive_non_finite_energy_raises():
    sampler = _sampler_fixture()
    f = lambda r, s2, z, h, s, a: Tensor(float("nan"))  # noqa: E731
    with pytest.raises(NumericError):
        contrastive_term(f, None, ((), 0, 0, 0.0, 1), sampler)


@pytest.mark.parametrize("seed", range(5))
def test_tabular_contrastive_exhaustive_matches_direct_summation(seed):
    env = frozen_lake_env(p=0.5, layout=("SF", "HG"), horizon=3)
    d = collect(env, uniform_policy(env), 15, seed=seed)
    index = DatasetIndex(d, build_negative_sampler(d), 20)
    b = tabular(index, n_atoms=3, seed=seed, scale=2.0)
    batch = index.full
    z = b.draw(batch)
    got = b.contrastive(batch, z, index.sampler).data
    f = b.store["energy.table"].data
    w = index.sampler.weights
    q = z.data
    for row in range(len(batch)):
        want = 0.0
        for atom in range(3):
            for t in range(batch.states.shape[1]):
                s, a = batch.states[row, t], batch.actions[row, t]
                log_part = math.log(sum(w[j] * math.exp(f[j, atom, s, a]) for j in range(len(w))))
                want += q[row, atom] * (f[batch.rho_index[row, t], atom, s, a] - log_part)
        assert abs(got[row] - want) <= 1e-9


def test_sampled_contrastive_bounded_by_log_n_plus_one():
    env = frozen_lake_env(p=0.5)
    d = collect(env, uniform_policy(env), 10, seed=0)
    index = DatasetIndex(d, build_negative_sampler(d), 20)
    b = tabular(index, n_atoms=2, scale=20.0)
    batch = index.full
    per_step_bound = math.log(17)
    vals = b.contrastive(batch, b.draw(batch), index.sampler, np.random.default_rng(0), 16).data
    assert np.all(vals <= per_step_bound * batch.states.shape[1] + 1e-9)


# -- DoC ---------------------------------------------------------------------


def bandit_index(p=0.1, n=200, seed=0):
    d = collect(bandit_env(p), bandit_behavior(p), n, seed=seed)
    return DatasetIndex(d, build_negative_sampler(d), 20)


def test_doc_beta_zero_and_zero_energy_reduce_to_nll():
    index = bandit_index()
    b = tabular(index, n_atoms=4, seed=3)
    batch = index.full_batch()
    policy_side, _, nll, _ = doc_loss(b, batch, index.sampler, beta=0.0)
    assert policy_side.item() == nll.item()
    b.store["energy.table"].data[:] = 0.0
    policy_side, energy_side, nll, con = doc_loss(b, batch, index.sampler, beta=1.0)
    assert abs(policy_side.item() - nll.item()) <= 1e-12
    policy_side, _, nll, _ = doc_loss(b, batch, index.sampler, beta=1.0, n_negatives=8,
                                      rng=np.random.default_rng(0))
    assert policy_side.item() == nll.item()


def test_doc_bandit_fixture_matches_enumeration_oracle():
    index = bandit_index(n=50)
    b = tabular(index, n_atoms=3, seed=5)
    batch = index.full_batch()
    beta = 1.3
    policy_side, energy_side, _, _ = doc_loss(b, batch, index.sampler, beta=beta)
    pol = softmax(b.store["policy.logits"].data)
    q = softmax(b.store["posterior.logits"].data)
    f = b.store["energy.table"].data
    rho = dict(zip(index.sampler.support, index.sampler.weights))
    support = list(index.sampler.support)
    nll = con = 0.0
    for row, w in enumerate(batch.weights):
        a, r = batch.actions[row, 0], batch.rewards[row, 0]
        j_pos = support.index((r, -1))
        for z in range(3):
            wz = w * q[batch.keys[row], z]
            nll -= wz * math.log(pol[0, z, a])
            log_part = math.log(sum(rho[pair] * math.exp(f[j, z, 0, a]) for j, pair in enumerate(support)))
            con += wz * (f[j_pos, z, 0, a] - log_part)
    assert policy_side.item() == pytest.approx(nll + beta * con, abs=1e-12)
    assert energy_side.item() == pytest.approx(con, abs=1e-12)


def test_doc_policy_side_gradient_matches_finite_differences():
    index = bandit_index(n=40)
    b = tabular(index, n_atoms=3, seed=9)
    batch = index.full_batch()

    def loss():
        return doc_loss(b, batch, index.sampler, beta=0.8)[0].item()

    b.store.zero_grad()
    doc_loss(b, batch, index.sampler, beta=0.8)[0].backward()
    for name in ("policy.logits", "posterior.logits", "energy.table"):
        analytic = b.store.grad(name).copy()
        numeric = numerical_gradient(loss, b.store[name].data, h=1e-6)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-8)
        assert err <= 1e-4, name


def test_energy_side_gives_no_gradient_to_policy_or_posterior():
    index = bandit_index(n=40)
    b = tabular(index, n_atoms=3, seed=9)
    b.store.zero_grad()
    doc_loss(b, index.full_batch(), index.sampler, beta=1.0)[1].backward()
    for group in ("policy", "posterior", "prior", "value"):
        for name in b.store.names(group):
            assert not b.store.grad(name).any()
    assert np.abs(b.store.grad("energy.table")).max() > 0


def _losses(b, batch, sampler):
    ps, es, _, _ = doc_loss(b, batch, sampler, beta=1.0)
    return ps.item(), es.item()


def test_adversarial_signs_single_step():
    index = bandit_index(n=100)
    b = tabular(index, n_atoms=3, seed=11)
    batch = index.full_batch()
    before_ps, before_es = _losses(b, batch, index.sampler)

    b.store.zero_grad()
    doc_loss(b, batch, index.sampler, beta=1.0)[0].backward()
    grads = {n: b.store.grad(n).copy() for g in ("policy", "posterior") for n in b.store.names(g)}
    Optimizer(b.store, 1e-4, kind="sgd").step(grads)
    after_ps, _ = _losses(b, batch, index.sampler)
    assert after_ps < before_ps

    _, before_es = _losses(b, batch, index.sampler)
    b.store.zero_grad()
    doc_loss(b, batch, index.sampler, beta=1.0)[1].backward()
    grads = {n: b.store.grad(n).copy() for n in b.store.names("energy")}
    Optimizer(b.store, 1e-4, kind="sgd").step(grads)
    _, after_es = _losses(b, batch, index.sampler)
    assert after_es > before_es


# -- auxiliary loss ----------------------------------------------------------


@pytest.mark.parametrize("kind", ["tabular", "neural"])
def test_aux_loss_stop_gradient_contract(kind):
    env = frozen_lake_env(p=0.5)
    d = collect(env, uniform_policy(env), 8, seed=2)
    index = DatasetIndex(d, build_negative_sampler(d), 20)
    if kind == "tabular":
        b = tabular(index, n_atoms=4, seed=1)
    else:
        b = NeuralBundle(d.n_states, d.n_actions, latent_dim=3, hidden=8, embed_dim=4, seed=1)
    b.store.zero_grad()
    aux_loss(b, index.full_batch(), rng=np.random.default_rng(0), exact=kind == "tabular")[0].backward()
    for name in b.store.names("posterior"):
        assert np.array_equal(b.store.grad(name), np.zeros_like(b.store[name].data))
    assert any(np.abs(b.store.grad(n)).max() > 0 for n in b.store.names("prior"))
    assert any(np.abs(b.store.grad(n)).max() > 0 for n in b.store.names("value"))


def test_aux_loss_zero_when_value_exact_and_posterior_equals_prior():
    index = make_index([Trajectory((0,), (0,), (2.0,)), Trajectory((0,), (1,), (2.0,))])
    b = tabular(index, n_atoms=2, seed=0)
    b.store["value.table"].data[:] = 2.0
    b.store["posterior.logits"].data[:] = b.store["prior.logits"].data[0]
    assert aux_loss(b, index.full_batch())[0].item() == pytest.approx(0.0, abs=1e-12)


def test_aux_loss_arithmetic():
    index = make_index([Trajectory((0,), (0,), (10.0,))])
    b = tabular(index, n_atoms=2, seed=0)
    b.store["value.table"].data[:] = 0.0
    b.store["posterior.logits"].data[:] = b.store["prior.logits"].data[0]
    assert aux_loss(b, index.full_batch())[0].item() == pytest.approx(100.0)


# -- optimiser and training --------------------------------------------------


def test_zero_gradients_leave_parameters_unchanged():
    index = bandit_index(n=20)
    b = tabular(index, n_atoms=2)
    before = b.store.state_dict()
    opt = Optimizer(b.store, 0.1)
    for _ in range(3):
        opt.step({n: np.zeros_like(t.data) for n, t in b.store.params.items()})
    for name, arr in before.items():
        assert np.array_equal(arr, b.store[name].data)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(negatives=0)
    with pytest.raises(ValueError):
        TrainConfig(method="dqn")


@pytest.mark.parametrize("method", ["doc", "vae", "rcsl", "pct-bc"])
def test_training_is_deterministic(tmp_path, method):
    d = collect(bandit_env(0.2), bandit_behavior(0.2), 100, seed=0)
    cfg = TrainConfig(method=method, steps=30, seed=4)
    a = save_checkpoint(train(None, d, cfg).bundle, tmp_path / "a.ckpt").read_bytes()
    b = save_checkpoint(train(None, d, cfg).bundle, tmp_path / "b.ckpt").read_bytes()
    assert a == b


def test_training_sampled_modes_are_deterministic(tmp_path):
    env = frozen_lake_env(p=0.5, layout=("SF", "HG"), horizon=3)
    d = collect(env, uniform_policy(env), 30, seed=0)
    cfg = TrainConfig(steps=10, seed=1, exact_latent=False, exhaustive_negatives=False, batch_size=8)
    a = train("doc", d, cfg).bundle.store.state_dict()
    b = train("doc", d, cfg).bundle.store.state_dict()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_loss_report_total_matches_parts():
    d = collect(bandit_env(0.3), bandit_behavior(0.3), 100, seed=0)
    for method, beta in (("doc", 1.0), ("vae", 0.1), ("rcsl", 1.0)):
        log = train(method, d, TrainConfig(method=method, steps=20, beta=beta)).log
        assert len(log) == 20
        for rep in log:
            if method == "doc":
                parts = rep.nll + beta * rep.contrastive + rep.value_mse + rep.prior_kl
            elif method == "vae":
                parts = rep.nll + beta * rep.prior_kl + rep.value_mse
            else:
                parts = rep.nll
            assert abs(rep.total - parts) <= 1e-9


def test_divergence_reports_step():
    d = literal_dataset([Trajectory((0,), (0,), (float("inf"),)), Trajectory((0,), (1,), (0.0,))])
    with pytest.raises(TrainingDivergedError) as info:
        train("doc", d, TrainConfig(steps=5))
    assert info.value.step == 0


def test_pct_bc_trains_on_top_returns_only():
    d = collect(bandit_env(0.1), bandit_behavior(0.1), 400, seed=0)
    res = train("pct-bc", d, TrainConfig(method="pct-bc", steps=200, percentile=0.1))
    assert all(t.ret == 1.0 for t in res.index.dataset)
    # among reward-1 episodes both arms are equally common, so the policy is indifferent
    probs = res.bundle.policy_table(0)[0]
    assert probs[0] == pytest.approx(0.5, abs=0.1)


def test_neural_doc_trains_and_stays_finite():
    env = frozen_lake_env(p=0.7, layout=("SF", "FG"), horizon=4)
    d = collect(env, uniform_policy(env), 30, seed=0)
    res = train("doc", d, TrainConfig(model="neural", steps=15, learning_rate=1e-3, batch_size=10, latent_dim=3))
    assert all(np.isfinite(r.total) for r in res.log)
    z = select_latent(res.bundle, env.initial_state, K=16, rng=np.random.default_rng(0))
    assert z.shape == (3,)


def test_doc_bandit_selected_policy_pulls_good_arm():
    d = collect(bandit_env(0.1), bandit_behavior(0.1), 1000, seed=0)
    b = train("doc", d, TrainConfig(steps=3000, seed=0)).bundle
    z = select_latent(b, 0)
    assert b.policy_table(z)[0, 0] >= 0.95


def test_zero_mi_limit_on_deterministic_data():
    env = counterexample_env()
    d = literal_dataset(counterexample_episodes() * 3, env)
    res = train("doc", d, TrainConfig(steps=300))
    q = posterior_assignments(res.bundle, res.index)
    mi_r, mi_s = mi_exact_discrete(list(res.index.dataset), q, conditioning="sa")
    assert mi_r <= 1e-9 and mi_s <= 1e-9


def test_mi_suppression_against_vae():
    wins = 0
    for seed in range(5):
        d = collect(bandit_env(0.1), bandit_behavior(0.1), 1000, seed=seed)
        trajs = list(d)
        doc = train("doc", d, TrainConfig(steps=3000, seed=seed))
        vae = train("vae", d, TrainConfig(method="vae", beta=0.1, steps=3000, seed=seed))
        mi_doc = mi_exact_discrete(trajs, posterior_assignments(doc.bundle, doc.index))[0]
        mi_vae = mi_exact_discrete(trajs, posterior_assignments(vae.bundle, vae.index))[0]
        assert mi_doc <= 0.05
        wins += mi_vae > mi_doc
    assert wins >= 4
