import numpy as np
import pytest

from cgdp.diffusion import (NoiseNet, ddim_sample, ddim_step, ddpm_sample,
                            forward_corrupt, load_noise_net, make_schedule,
                            noise_from_score, noise_loss, save_noise_net,
                            score_from_noise, train_noise_net)
from cgdp.numerics import AdamState
from cgdp.scm import Transition


def toy_dataset(rng, count=64, n=2, d=2, mu=None):
    mu = np.zeros(d) if mu is None else mu
    out = []
    for _ in range(count):
        s = rng.standard_normal(n)
        a = mu + 0.1 * rng.standard_normal(d)
        out.append(Transition(s, a, 0.0, s, False))
    return out


class TestSchedule:
    def test_single_step(self):
        sched = make_schedule(1, 0.5, 0.5)
        assert sched.abar_at(1) == 0.5
        assert sched.abar_at(0) == 1.0

    def test_two_step_products(self):
        sched = make_schedule(2, 0.1, 0.2)
        assert np.allclose(sched.abar, [0.9, 0.72], rtol=1e-14)

    def test_long_schedule_terminal_noise(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        assert sched.abar_at(1000) < 1e-4

    def test_monotone_decreasing(self):
        sched = make_schedule(100)
        assert np.all(np.diff(sched.abar) < 0)
        assert np.allclose(sched.alphas + sched.betas, 1.0, rtol=1e-15)

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            make_schedule(10, 0.2, 0.1)
        with pytest.raises(ValueError):
            make_schedule(0)


class TestForwardCorrupt:
    def test_k_zero_identity(self):
        sched = make_schedule(10)
        a0 = np.array([1.0, -2.0])
        ak, eps = forward_corrupt(sched, a0, 0, np.random.default_rng(0))
        assert np.array_equal(ak, a0) and np.all(eps == 0)

    def test_variance_moment_check(self):
        sched = make_schedule(50, 1e-2, 0.5)
        rng = np.random.default_rng(1)
        k = 40
        draws = np.array([forward_corrupt(sched, np.zeros(1), k, rng)[0]
                          for _ in range(10 ** 5)])
        target = 1.0 - sched.abar_at(k)
        assert abs(draws.var() - target) / target < 0.03

    def test_out_of_range(self):
        sched = make_schedule(10)
        with pytest.raises(ValueError):
            forward_corrupt(sched, np.zeros(1), 11, np.random.default_rng(0))


class TestSamplers:
    def test_ddpm_single_step_closed_form(self):
        sched = make_schedule(1, 0.36, 0.36)

        def zero_net(a, s, k):
            return np.zeros_like(a)

        zero_net.d_action = 2
        rng = np.random.default_rng(2)
        a0 = ddpm_sample(zero_net, sched, np.zeros(2), rng)
        a1 = np.random.default_rng(2).standard_normal((1, 2))[0]
        assert np.allclose(a0, a1 / np.sqrt(1.0 - 0.36), rtol=1e-14)

    def test_zero_hook_bit_identity(self):
        sched = make_schedule(20)
        net = NoiseNet(2, 2, 20, hidden=(8,), rng=np.random.default_rng(0))

        def zero_hook(a, k):
            return np.zeros_like(np.atleast_2d(a))

        s = np.random.default_rng(1).standard_normal((4, 2))
        for sampler in (ddpm_sample, ddim_sample):
            base = sampler(net, sched, s, np.random.default_rng(3))
            hooked = sampler(net, sched, s, np.random.default_rng(3),
                             hook=zero_hook)
            assert np.array_equal(base, hooked)

    def test_ddim_step_zero_noise_rescale(self):
        sched = make_schedule(2, 0.5, 0.5)  # abar = (0.5, 0.25)
        ak = np.array([[0.8, -0.2]])
        a0_hat, _ = ddim_step(None, sched, ak, None, 2,
                              eps_hat=np.zeros((1, 2)))
        assert np.allclose(a0_hat, 2.0 * ak, rtol=1e-14)

    def test_ddim_degenerate_step_reconstruction(self):
        sched = make_schedule(3, 0.1, 0.3)
        ak = np.array([[0.4, 0.6]])
        eps = np.array([[0.3, -0.1]])
        k = 2
        abar_k = sched.abar_at(k)
        a0_hat, a_prev = ddim_step(None, sched, ak, None, k, eps_hat=eps)
        recon = np.sqrt(abar_k) * a0_hat + np.sqrt(1 - abar_k) * eps
        assert np.allclose(recon, ak, rtol=1e-12)

    def test_ddpm_matches_known_gaussian(self):
        # analytic noise for actions ~ N(mu, 0.1^2 I) under the forward kernel
        mu = np.array([0.7, -0.4])
        sched = make_schedule(200)

        class AnalyticNet:
            d_action = 2

            def __call__(self, a, s, k):
                abar = sched.abar_at(k)
                var = abar * 0.01 + (1 - abar)
                score = -(a - np.sqrt(abar) * mu) / var
                return -np.sqrt(1 - abar) * score

        rng = np.random.default_rng(4)
        out = ddpm_sample(AnalyticNet(), sched, np.zeros((10 ** 4, 1)), rng)
        assert np.all(np.abs(out.mean(axis=0) - mu) < 0.05)


class TestScoreConversion:
    def test_zero_noise_zero_score(self):
        assert np.all(score_from_noise(np.zeros(3), 0.5) == 0)

    def test_example_value(self):
        out = score_from_noise(np.array([1.0, 0.0]), 0.75)
        assert np.allclose(out, [-2.0, 0.0], rtol=1e-14)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        eps = rng.standard_normal(4)
        back = noise_from_score(score_from_noise(eps, 0.3), 0.3)
        assert np.allclose(back, eps, rtol=1e-15)

    def test_rejects_bad_abar(self):
        with pytest.raises(ValueError):
            score_from_noise(np.zeros(2), 1.0)


class TestTraining:
    def test_memorizes_single_pair(self):
        rng = np.random.default_rng(6)
        data = [Transition(np.zeros(2), np.array([0.5, -0.5]), 0.0,
                           np.zeros(2), False)]
        sched = make_schedule(10)
        net = NoiseNet(2, 2, 10, hidden=(32, 32), rng=rng)
        opt = AdamState(net.mlp.params(), lr=1e-3)
        losses = train_noise_net(net, data, sched, opt, 2000, rng)
        early = np.mean(losses[:200])
        late = np.mean(losses[-200:])
        assert late < 0.2 * early
        assert late < 0.3

    def test_zero_steps_leaves_params(self):
        rng = np.random.default_rng(7)
        net = NoiseNet(2, 2, 10, hidden=(8,), rng=rng)
        before = [p.copy() for p in net.mlp.params()]
        opt = AdamState(net.mlp.params())
        train_noise_net(net, toy_dataset(rng), make_schedule(10), opt, 0, rng)
        assert all(np.array_equal(b, p)
                   for b, p in zip(before, net.mlp.params()))

    def test_heldout_loss_improves_most_seeds(self):
        sched = make_schedule(10)
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            data = toy_dataset(rng, count=128, mu=np.array([0.6, -0.6]))
            held = toy_dataset(rng, count=128, mu=np.array([0.6, -0.6]))
            net = NoiseNet(2, 2, 10, hidden=(16, 16), rng=rng)
            before = np.mean([noise_loss(net, held, sched,
                                         np.random.default_rng(100 + i))
                              for i in range(5)])
            opt = AdamState(net.mlp.params(), lr=1e-3)
            train_noise_net(net, data, sched, opt, 300, rng)
            after = np.mean([noise_loss(net, held, sched,
                                        np.random.default_rng(100 + i))
                             for i in range(5)])
            wins += int(after < before)
        assert wins >= 9

    def test_empty_dataset_rejected(self):
        net = NoiseNet(2, 2, 10, hidden=(8,))
        with pytest.raises(ValueError):
            train_noise_net(net, [], make_schedule(10),
                            AdamState(net.mlp.params()), 10,
                            np.random.default_rng(0))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        net = NoiseNet(3, 2, 15, hidden=(8, 8), rng=rng)
        p1 = tmp_path / "net.txt"
        p2 = tmp_path / "net2.txt"
        save_noise_net(net, str(p1))
        loaded = load_noise_net(str(p1))
        assert (loaded.n_state, loaded.d_action, loaded.k_steps) == (3, 2, 15)
        for a, b in zip(net.mlp.params(), loaded.mlp.params()):
            assert np.array_equal(a, b)
        save_noise_net(loaded, str(p2))
        assert p1.read_bytes() == p2.read_bytes()
