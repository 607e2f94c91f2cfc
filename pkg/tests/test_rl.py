import numpy as np
import pytest

from cgdp.diffusion import NoiseNet, forward_corrupt, make_schedule
from cgdp.dynamics import CausalDynamics
from cgdp.envs import Environment, EnvSpec, make_env_scm
from cgdp.guidance import GuidanceConfig, GuidanceHook
from cgdp.numerics import AdamState
from cgdp.rl import (CriticPair, ReplayBuffer, TrainerConfig,
                     _guided_chain_backward, _guided_chain_forward,
                     critic_update, offline_stage, online_stage,
                     policy_update, td_target)
from cgdp.scm import CausalMasks, Transition, exact_masks, generate_dataset

from conftest import rel_err


def make_transition(rng, n=2, d=2, done=False):
    return Transition(rng.standard_normal(n), rng.uniform(-1, 1, d),
                      float(rng.standard_normal()), rng.standard_normal(n),
                      done)


def linear_dyn(n=2, d=2):
    masks = CausalMasks(np.ones((n, n)), np.ones((d, n)), np.ones(n),
                        np.ones(d))
    return CausalDynamics(masks=masks, kind="linear", sigma_s=np.eye(n),
                          sigma_r=1.0, a_s=0.3 * np.eye(n),
                          a_a=0.5 * np.eye(d, n), b_s=np.ones(n),
                          b_a=np.array([0.5, -0.5]))


class TestReplayBuffer:
    def test_fifo_keeps_most_recent(self):
        buf = ReplayBuffer(3)
        items = [make_transition(np.random.default_rng(i)) for i in range(5)]
        for tr in items:
            buf.add(tr)
        assert len(buf) == 3
        assert buf.window(3) == items[-3:]

    def test_window_before_full(self):
        buf = ReplayBuffer(10)
        items = [make_transition(np.random.default_rng(i)) for i in range(4)]
        for tr in items:
            buf.add(tr)
        assert buf.window(2) == items[-2:]
        assert buf.window(10) == items

    def test_sample_determinism(self):
        buf = ReplayBuffer(8)
        for i in range(8):
            buf.add(make_transition(np.random.default_rng(i)))
        s1 = buf.sample(4, np.random.default_rng(0))
        s2 = buf.sample(4, np.random.default_rng(0))
        assert all(a is b for a, b in zip(s1, s2))

    def test_rejects_bad_capacity(self):
        with pytest.raises(ValueError):
            ReplayBuffer(0)


class TestTdTarget:
    def test_constant_target_value(self):
        critics = CriticPair(2, 2, hidden=(4,))
        critics.q1_target.biases[-1][:] = 2.0
        critics.q2_target.biases[-1][:] = 2.0
        y = td_target(critics, 1.0, np.zeros(2), np.zeros(2), False)
        assert abs(y - (1.0 + 0.99 * 2.0)) < 1e-12

    def test_done_truncates_bootstrap(self):
        critics = CriticPair(2, 2, hidden=(4,))
        critics.q1_target.biases[-1][:] = 100.0
        y = td_target(critics, 0.7, np.zeros(2), np.zeros(2), True)
        assert y == 0.7

    def test_min_over_pair(self):
        critics = CriticPair(2, 2, hidden=(4,))
        critics.q1_target.biases[-1][:] = 3.0
        critics.q2_target.biases[-1][:] = 1.0
        y = td_target(critics, 0.0, np.zeros(2), np.zeros(2), False)
        assert abs(y - 0.99 * 1.0) < 1e-12


class TestCritics:
    def test_regression_loss_decreases(self):
        rng = np.random.default_rng(0)
        critics = CriticPair(2, 2, hidden=(16, 16), rng=rng, lr=1e-3)
        batch = [make_transition(rng, done=True) for _ in range(16)]

        def zero_sampler(states, sampler_rng):
            return np.zeros((states.shape[0], 2))

        losses = [critic_update(critics, batch, zero_sampler, rng)
                  for _ in range(300)]
        assert losses[-1] < 0.2 * losses[0]

    def test_soft_update_moves_by_rho(self):
        critics = CriticPair(2, 2, hidden=(4,), rho_target=0.01)
        for p in critics.q1.params():
            p[:] = 1.0
        before = [p.copy() for p in critics.q1_target.params()]
        critics.soft_update()
        for b, t in zip(before, critics.q1_target.params()):
            assert np.allclose(t, 0.99 * b + 0.01, rtol=1e-12)

    def test_empty_batch_rejected(self):
        critics = CriticPair(2, 2, hidden=(4,))
        with pytest.raises(ValueError):
            critic_update(critics, [], lambda s, r: s, np.random.default_rng(0))


class TestGuidedChain:
    def test_forward_matches_manual_unrolled_steps(self):
        sched = make_schedule(3)
        net = NoiseNet(2, 2, 3, hidden=(8,), rng=np.random.default_rng(0))
        s = np.random.default_rng(1).standard_normal((2, 2))
        z = np.random.default_rng(2).standard_normal((2, 2))
        a_gen, steps = _guided_chain_forward(net, sched, None, s, z)
        a = z
        for k in range(3, 0, -1):
            eps = net.forward_cache(a, s, k)[0]
            abar_k, abar_prev = sched.abar_at(k), sched.abar_at(k - 1)
            u = np.sqrt(abar_prev / abar_k)
            w = np.sqrt(1 - abar_prev) - u * np.sqrt(1 - abar_k)
            a = u * a + w * eps
        assert np.allclose(a_gen, a, rtol=1e-12)
        assert len(steps) == 3

    def test_backward_matches_finite_differences(self):
        sched = make_schedule(3)
        net = NoiseNet(2, 2, 3, hidden=(8,), rng=np.random.default_rng(3))
        dyn = linear_dyn()
        cfg = GuidanceConfig(lam=0.7, r_star=1.0)
        s = np.random.default_rng(4).standard_normal((2, 2))
        z = np.random.default_rng(5).standard_normal((2, 2))
        hook = GuidanceHook(dyn, cfg, sched, s)

        def objective():
            a_gen, _ = _guided_chain_forward(net, sched, hook, s, z)
            return float(a_gen.sum())

        _, steps = _guided_chain_forward(net, sched, hook, s, z)
        grads = _guided_chain_backward(net, hook, steps, np.ones((2, 2)))
        rng = np.random.default_rng(6)
        params = net.mlp.params()
        h = 1e-6
        for _ in range(20):
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(sz)) for sz in p.shape)
            which = [i for i, q in enumerate(params) if q is p][0]
            orig = p[idx]
            p[idx] = orig + h
            up = objective()
            p[idx] = orig - h
            down = objective()
            p[idx] = orig
            fd = (up - down) / (2 * h)
            assert rel_err(np.array([grads[which][idx]]),
                           np.array([fd])) < 1e-4


class TestPolicyUpdate:
    def test_unguided_limit_matches_plain_denoising_step(self):
        sched = make_schedule(5)
        dyn = linear_dyn()
        rng = np.random.default_rng(7)
        batch = [make_transition(rng) for _ in range(8)]
        cfg = TrainerConfig(eta=0.0, guidance=GuidanceConfig(lam=0.0),
                            k_steps=5, lr=1e-3)
        net = NoiseNet(2, 2, 5, hidden=(8,), rng=np.random.default_rng(8))
        net2 = net.copy()
        opt = AdamState(net.mlp.params(), lr=1e-3)
        opt2 = AdamState(net2.mlp.params(), lr=1e-3)
        critics = CriticPair(2, 2, hidden=(4,))

        policy_update(net, critics, dyn, batch, cfg, sched, opt,
                      np.random.default_rng(9))

        rng2 = np.random.default_rng(9)
        s = np.array([tr.s for tr in batch])
        a0 = np.array([tr.a for tr in batch])
        k = int(rng2.integers(1, 6))
        ak, eps = forward_corrupt(sched, a0, k, rng2)
        pred, cache = net2.forward_cache(ak, s, k)
        grads, _ = net2.backward(cache, (2.0 / len(batch)) * (pred - eps))
        opt2.step(net2.mlp.params(), grads)

        for a, b in zip(net.mlp.params(), net2.mlp.params()):
            assert np.array_equal(a, b)

    def test_q_term_changes_update(self):
        sched = make_schedule(5)
        dyn = linear_dyn()
        rng = np.random.default_rng(10)
        batch = [make_transition(rng) for _ in range(8)]
        nets = []
        for eta in (0.0, 3.0):
            cfg = TrainerConfig(eta=eta, guidance=GuidanceConfig(lam=0.5),
                                k_steps=5, lr=1e-3)
            net = NoiseNet(2, 2, 5, hidden=(8,),
                           rng=np.random.default_rng(11))
            opt = AdamState(net.mlp.params(), lr=1e-3)
            critics = CriticPair(2, 2, hidden=(8,),
                                 rng=np.random.default_rng(12))
            policy_update(net, critics, dyn, batch, cfg, sched, opt,
                          np.random.default_rng(13))
            nets.append(net)
        diffs = [np.max(np.abs(a - b)) for a, b in
                 zip(nets[0].mlp.params(), nets[1].mlp.params())]
        assert max(diffs) > 0

    def test_empty_batch_rejected(self):
        cfg = TrainerConfig(k_steps=5)
        net = NoiseNet(2, 2, 5, hidden=(4,))
        with pytest.raises(ValueError):
            policy_update(net, CriticPair(2, 2, hidden=(4,)), linear_dyn(),
                          [], cfg, make_schedule(5),
                          AdamState(net.mlp.params()),
                          np.random.default_rng(0))


class TestTrainerConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainerConfig(eta=-1.0)
        with pytest.raises(ValueError):
            TrainerConfig(batch_size=0)


class TestStages:
    def test_offline_stage_deterministic(self, small_instance):
        scm, _, data = small_instance
        masks = exact_masks(scm)
        cfg = TrainerConfig(offline_steps=100, k_steps=10, hidden=(16, 16))
        art1 = offline_stage(data, cfg, np.random.default_rng(0),
                             masks=masks.copy())
        art2 = offline_stage(data, cfg, np.random.default_rng(0),
                             masks=masks.copy())
        for a, b in zip(art1.net.mlp.params(), art2.net.mlp.params()):
            assert np.array_equal(a, b)
        assert np.array_equal(art1.dyn.a_s, art2.dyn.a_s)
        assert np.array_equal(art1.dyn.a_a, art2.dyn.a_a)

    def test_offline_stage_rejects_empty(self):
        with pytest.raises(ValueError):
            offline_stage([], TrainerConfig(), np.random.default_rng(0))

    def test_online_stage_zero_episodes(self):
        spec = EnvSpec(kind="lin-scm", n=3, d=2, horizon=5, seed=0)
        env = Environment(spec)
        data = generate_dataset(env.scm, 50, 5, 1.5,
                                np.random.default_rng(0))
        cfg = TrainerConfig(offline_steps=50, k_steps=10, hidden=(16,),
                            online_episodes=0, batch_size=16)
        art = offline_stage(data, cfg, np.random.default_rng(0),
                            masks=exact_masks(env.scm))
        records, final = online_stage(env, art, cfg, np.random.default_rng(1))
        assert records == []
        assert final.net is art.net

    def test_online_stage_records_and_unguided_kl(self):
        spec = EnvSpec(kind="lin-scm", n=3, d=2, horizon=5, seed=0)
        env = Environment(spec)
        data = generate_dataset(env.scm, 50, 5, 1.5,
                                np.random.default_rng(0))
        cfg = TrainerConfig(offline_steps=50, k_steps=10, hidden=(16,),
                            online_episodes=2, batch_size=8,
                            mask_refresh=0,
                            guidance=GuidanceConfig(lam=0.0))
        art = offline_stage(data, cfg, np.random.default_rng(0),
                            masks=exact_masks(env.scm))
        records, _ = online_stage(env, art, cfg, np.random.default_rng(1))
        assert len(records) == 2
        for i, rec in enumerate(records):
            assert rec["episode"] == i
            assert np.isfinite(rec["return"])
            assert rec["kl_integral"] == 0.0
            assert rec["mask_refresh_flag"] == 0

    def test_online_stage_guided_kl_positive(self):
        spec = EnvSpec(kind="lin-scm", n=3, d=2, horizon=5, seed=0)
        env = Environment(spec)
        data = generate_dataset(env.scm, 50, 5, 1.5,
                                np.random.default_rng(0))
        cfg = TrainerConfig(offline_steps=50, k_steps=10, hidden=(16,),
                            online_episodes=1, batch_size=8,
                            mask_refresh=0,
                            guidance=GuidanceConfig(lam=1.0, r_star=5.0))
        art = offline_stage(data, cfg, np.random.default_rng(0),
                            masks=exact_masks(env.scm))
        records, _ = online_stage(env, art, cfg, np.random.default_rng(1))
        assert records[0]["kl_integral"] > 0.0
