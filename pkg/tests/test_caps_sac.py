import copy
import math

import numpy as np
import pytest

from capsrace import nets
from capsrace.augment import PerturbationConfig
from capsrace.caps_sac import (CapsConfig, Learner, LossError, SacConfig, learner_update, mean_distance,
                               policy_terms, spatial_loss, steering_penalty_reward, temporal_loss)
from capsrace.replay import Batch

OBS = (12, 14, 6)


def make_batch(rng, n=6, shape=OBS, done=None, returns=None):
    o = lambda: rng.integers(0, 256, (n, *shape), dtype=np.uint8)
    return Batch(o(), rng.uniform(-1, 1, (n, 2)),
                 rng.normal(size=n) if returns is None else np.asarray(returns, float),
                 o(), o(), np.zeros(n, bool) if done is None else np.asarray(done))


def stub(table):
    return lambda states: np.array([table[int(s)] for s in states], dtype=float)


# temporal / spatial terms

def test_temporal_identical_states_zero():
    s = np.arange(4)
    assert float(temporal_loss(stub({i: (i, -i) for i in range(4)}), s, s).data) == 0.0


def test_temporal_three_four_five():
    pol = stub({0: (0, 0), 1: (3, 4)})
    assert float(temporal_loss(pol, np.array([0]), np.array([1])).data) == 5.0


def test_temporal_batch_mean():
    pol = stub({0: (0, 0), 1: (3, 4)})
    assert float(temporal_loss(pol, np.array([0, 0]), np.array([0, 1])).data) == 2.5


def test_temporal_length_mismatch():
    with pytest.raises(ValueError):
        temporal_loss(stub({0: (0, 0)}), np.array([0, 0]), np.array([0]))


def test_spatial_degenerate_phi_zero(rng):
    phi = PerturbationConfig(phi_enabled=["brightness"], brightness=(1.0, 1.0))
    s = rng.integers(0, 256, (5, 6, 6, 6), dtype=np.uint8)
    pol = lambda x: np.c_[x.reshape(len(x), -1).mean(1), x.reshape(len(x), -1).std(1)]
    assert float(spatial_loss(pol, s, phi, rng).data) == 0.0


def test_spatial_constant_policy_zero(rng):
    s = rng.integers(0, 256, (5, 6, 6, 6), dtype=np.uint8)
    pol = lambda x: np.tile([0.3, -0.2], (len(x), 1))
    assert float(spatial_loss(pol, s, PerturbationConfig(), rng).data) == 0.0


def test_spatial_brightness_monte_carlo():
    # f(s) = (c * mean(s)/255, 0); brightness b ~ U(0.6, 1.4) gives E|f(s') - f(s)| = c * m * E|b - 1| = 0.2 c m
    c = 2.0
    phi = PerturbationConfig(phi_enabled=["brightness"])
    pol = lambda x: np.c_[c * x.reshape(len(x), -1).mean(1) / 255.0, np.zeros(len(x))]
    img_rng = np.random.default_rng(0)
    s = img_rng.integers(0, 151, (16, 8, 8, 6), dtype=np.uint8)
    m = s.reshape(16, -1).mean(1) / 255.0
    expected = 0.2 * c * m.mean()
    got = np.mean([float(spatial_loss(pol, s, phi, np.random.default_rng(seed)).data) for seed in range(1000)])
    assert got == pytest.approx(expected, rel=0.02)


def test_distances_nonnegative(rng):
    a, b = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    assert float(mean_distance(a, b).data) >= 0


# learner

@pytest.fixture
def fresh(tiny_arch):
    def make(caps=CapsConfig(), seed=0, arch=tiny_arch, **sac):
        n = nets.build_networks(OBS, 2, arch, seed=1)
        return Learner(n, SacConfig(batch_size=6, **sac), caps, seed=seed)
    return make


def test_zero_weights_objective_is_sac_loss(fresh, rng):
    L = fresh(CapsConfig(lambda_T=0.0, lambda_S=0.0))
    rep = learner_update(make_batch(rng), L)
    assert rep.total_policy_objective == rep.policy_loss
    assert rep.l_temporal > 0 and rep.l_spatial > 0


def test_objective_affine_in_weights(fresh, rng):
    L = fresh()
    b = make_batch(rng)
    from capsrace.caps_sac import perturb_batch

    perturbed = perturb_batch(PerturbationConfig(), b.obs, rng)
    eps = rng.normal(size=(6, 2))
    vals = {}
    for lt in (0.0, 1.0):
        for ls in (0.0, 1.0):
            t = policy_terms(L.nets, b.obs, b.successor_obs, perturbed, eps, 0.3, CapsConfig(lambda_T=lt, lambda_S=ls))
            vals[lt, ls] = (t.objective(lt, ls), float(t.l_temporal.data), float(t.l_spatial.data))
    base = vals[0, 0][0]
    lT, lS = vals[0, 0][1], vals[0, 0][2]
    assert vals[1, 0][0] - base == pytest.approx(lT, abs=1e-6)
    assert vals[0, 1][0] - base == pytest.approx(lS, abs=1e-6)
    assert vals[1, 1][0] - base == pytest.approx(lT + lS, abs=1e-6)


def test_unit_losses_raise_objective_by_one(fresh, rng):
    L = fresh()
    b = make_batch(rng)
    t = policy_terms(L.nets, b.obs, b.successor_obs, b.bootstrap_obs, rng.normal(size=(6, 2)), 0.3,
                     CapsConfig(lambda_T=1.0, lambda_S=1.0))
    t.l_temporal.data = np.asarray(1.0)
    t.l_spatial.data = np.asarray(1.0)
    assert t.objective(1.0, 0.0) - t.objective(0.0, 0.0) == 1.0


def test_critic_target_hand_computed(tiny_arch64, rng):
    n = nets.build_networks(OBS, 2, tiny_arch64, seed=2)
    for tgt, bias in ((n.target1, 0.8), (n.target2, 0.5)):
        tgt.arrays["q.w"][:] = 0
        tgt.arrays["q.b"][:] = bias
    n.policy.arrays["head.w"][:] = 0
    n.policy.arrays["head.b"][:] = [0.2, -0.4, -0.5, 0.1]
    L = Learner(n, SacConfig(batch_size=1), CapsConfig(), seed=3)
    b = make_batch(rng, n=1, returns=[1.5])
    eps = copy.deepcopy(L.rng).standard_normal((1, 2))[0]
    mu, ls = np.array([0.2, -0.4]), np.array([-0.5, 0.1])
    u = mu + np.exp(ls) * eps
    logp = np.sum(-0.5 * eps**2 - 0.5 * math.log(2 * math.pi) - ls - np.log(1 - np.tanh(u) ** 2))
    y = 1.5 + 0.98**4 * (0.5 - 0.3 * logp)
    assert L.critic_target(b)[0] == pytest.approx(y, abs=1e-6)


def test_done_masks_bootstrap(tiny_arch64, rng):
    n = nets.build_networks(OBS, 2, tiny_arch64, seed=2)
    L = Learner(n, SacConfig(batch_size=2), CapsConfig(), seed=3)
    b = make_batch(rng, n=2, done=[True, False], returns=[0.7, 0.7])
    y = L.critic_target(b)
    assert y[0] == 0.7 and y[1] != 0.7


def test_zero_weights_match_plain_sac(fresh, rng):
    b = make_batch(rng)
    caps0 = fresh(CapsConfig(lambda_T=0.0, lambda_S=0.0), seed=9)
    plain = fresh(None, seed=9)
    for _ in range(3):
        caps0.update(b)
        plain.update(b)
    for name, ps in caps0.nets.named().items():
        assert ps.equal(plain.nets.named()[name]), name
    assert caps0.log_alpha[0] == plain.log_alpha[0]


def test_caps_changes_policy_update(fresh, rng):
    b = make_batch(rng)
    a, c = fresh(CapsConfig(lambda_T=0.0, lambda_S=0.0), seed=9), fresh(CapsConfig(lambda_T=5.0, lambda_S=5.0), seed=9)
    a.update(b)
    c.update(b)
    assert not a.nets.policy.equal(c.nets.policy)
    assert a.nets.critic1.equal(c.nets.critic1)  # critic loss excludes the smoothness terms


def test_tau_zero_keeps_targets(fresh, rng):
    L = fresh(tau=0.0)
    t1, t2 = L.nets.target1.copy(), L.nets.target2.copy()
    L.update(make_batch(rng))
    assert L.nets.target1.equal(t1) and L.nets.target2.equal(t2)
    assert not L.nets.critic1.equal(t1)


def test_alpha_modes(fresh, rng):
    fixed = fresh(alpha_mode="fixed")
    rep = fixed.update(make_batch(rng))[0]
    assert rep.alpha_value == pytest.approx(0.3)
    auto = fresh()
    rep = auto.update(make_batch(rng))[0]
    assert rep.alpha_value != pytest.approx(0.3, abs=1e-9)


def test_report_fields_finite_and_nonnegative(fresh, rng):
    rep, td = fresh().update(make_batch(rng))
    d = rep.as_dict()
    assert set(d) == {"critic_loss", "policy_loss", "l_temporal", "l_spatial", "alpha_value", "total_policy_objective"}
    assert all(math.isfinite(v) for v in d.values())
    assert rep.l_temporal >= 0 and rep.l_spatial >= 0
    assert td.shape == (6,) and np.all(td >= 0)


def test_non_finite_loss_aborts_with_report(fresh, rng):
    L = fresh()
    b = make_batch(rng, returns=[np.inf] * 6)
    with pytest.raises(LossError) as info:
        L.update(b)
    assert info.value.where == "critic_loss" and "critic_loss" in info.value.report


def test_sampled_distance_option(fresh, rng):
    rep = fresh(CapsConfig(distance_actions="sampled")).update(make_batch(rng))[0]
    assert rep.l_temporal > 0


def test_update_deterministic(fresh, rng):
    b = make_batch(rng)
    a, c = fresh(seed=4), fresh(seed=4)
    ra, rc = a.update(b)[0], c.update(b)[0]
    assert ra == rc and a.nets.policy.equal(c.nets.policy)


def test_steering_penalty():
    assert steering_penalty_reward((0.0, 0.3), 0.003) == 0.0
    full = steering_penalty_reward((1.0, 0.0), 0.003, math.radians(25.8))
    assert full == pytest.approx(-0.0774, abs=1e-12)
    for a in (0.2, 0.7, 1.0):
        assert steering_penalty_reward((a, 0), 0.003) == steering_penalty_reward((-a, 0), 0.003)


def test_caps_config_rejects_negative():
    with pytest.raises(ValueError):
        CapsConfig(lambda_T=-1.0)
    with pytest.raises(ValueError):
        CapsConfig(lambda_S=float("inf"))
