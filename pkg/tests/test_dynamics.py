import numpy as np
import pytest

from cgdp.dynamics import (CausalDynamics, apply_masks, apply_reward_masks,
                           do_intervention_joint_grad, fit_dynamics,
                           load_dynamics, reward_logpdf_grad, save_dynamics,
                           transition_logpdf_grad)
from cgdp.scm import (CausalMasks, GroundTruthScm, exact_masks,
                      generate_dataset, random_scm)

from conftest import central_fd, rel_err


def ones_masks(n, d):
    return CausalMasks(np.ones((n, n)), np.ones((d, n)), np.ones(n),
                       np.ones(d))


def simple_linear_dyn(n=2, d=2):
    return CausalDynamics(masks=ones_masks(n, d), kind="linear",
                          sigma_s=np.eye(n), sigma_r=1.0,
                          a_s=np.zeros((n, n)), a_a=np.eye(d, n),
                          b_s=np.zeros(n), b_a=np.ones(d))


class TestApplyMasks:
    def test_all_ones_identity_gate(self):
        masks = ones_masks(2, 2)
        s, a = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        gs, ga = apply_masks(masks, s, a)
        assert np.array_equal(gs, np.column_stack([s, s]))
        assert np.array_equal(ga, np.column_stack([a, a]))

    def test_all_zero_masks(self):
        masks = CausalMasks(np.zeros((2, 2)), np.zeros((2, 2)),
                            np.zeros(2), np.zeros(2))
        gs, ga = apply_masks(masks, np.ones(2), np.ones(2))
        assert np.all(gs == 0) and np.all(ga == 0)

    def test_reward_masks(self):
        masks = CausalMasks(np.ones((2, 2)), np.ones((1, 2)),
                            np.array([1.0, 0.0]), np.array([0.0]))
        gs, ga = apply_reward_masks(masks, np.array([3.0, 5.0]),
                                    np.array([7.0]))
        assert np.array_equal(gs, np.array([3.0, 0.0]))
        assert np.array_equal(ga, np.array([0.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_masks(ones_masks(2, 2), np.ones(3), np.ones(2))


class TestFitDynamics:
    def test_noiseless_exact_recovery(self):
        rng = np.random.default_rng(0)
        scm = random_scm(3, 2, 2, rng=rng)
        noiseless = GroundTruthScm(scm.f_s, scm.f_a, scm.b_s, scm.b_a,
                                   np.zeros((3, 3)), 0.0)
        data = generate_dataset(noiseless, 100, 5, 1.0, rng)
        dyn = fit_dynamics(data, exact_masks(scm), kind="linear")
        assert np.max(np.abs(dyn.a_s - scm.f_s)) < 1e-6
        assert np.max(np.abs(dyn.a_a - scm.f_a)) < 1e-6
        assert np.max(np.abs(dyn.b_s - scm.b_s)) < 1e-6
        assert np.max(np.abs(dyn.b_a - scm.b_a)) < 1e-6

    def test_noisy_consistency(self):
        rng = np.random.default_rng(1)
        scm = random_scm(3, 2, 2, rng=rng, noise_scale=np.sqrt(0.1))
        data = generate_dataset(scm, 2000, 5, 1.5, rng)
        dyn = fit_dynamics(data, exact_masks(scm), kind="linear")
        assert np.max(np.abs(dyn.a_s - scm.f_s)) < 0.05
        assert np.max(np.abs(dyn.a_a - scm.f_a)) < 0.05
        rel = np.linalg.norm(dyn.sigma_s - scm.sigma_s) / \
            np.linalg.norm(scm.sigma_s)
        assert rel < 0.15

    def test_mask_zero_coefficients_exactly_zero(self):
        rng = np.random.default_rng(2)
        scm = random_scm(3, 2, 2, rng=rng)
        data = generate_dataset(scm, 200, 5, 1.5, rng)
        masks = exact_masks(scm)
        masks.c_as[:] = 0.0
        dyn = fit_dynamics(data, masks, kind="linear")
        assert np.all(dyn.a_a == 0)

    def test_requires_enough_transitions(self):
        rng = np.random.default_rng(3)
        scm = random_scm(3, 2, 2, rng=rng)
        data = generate_dataset(scm, 2, 5, 1.0, rng)
        with pytest.raises(ValueError):
            fit_dynamics(data, exact_masks(scm), kind="linear")


class TestGradients:
    def test_transition_grad_trivial(self):
        dyn = simple_linear_dyn()
        _, grad = transition_logpdf_grad(dyn, np.zeros(2),
                                         np.array([1.0, 0.0]), np.zeros(2))
        assert np.allclose(grad, np.array([-1.0, 0.0]), atol=1e-14)

    def test_transition_grad_zero_at_mean(self):
        dyn = simple_linear_dyn()
        a = np.array([0.3, -0.4])
        s = np.ones(2)
        mean = s @ dyn.a_s + a @ dyn.a_a
        _, grad = transition_logpdf_grad(dyn, s, a, mean)
        assert np.allclose(grad, 0.0, atol=1e-14)

    def test_reward_grad_trivial(self):
        dyn = CausalDynamics(masks=ones_masks(1, 1), kind="linear",
                             sigma_s=np.eye(1), sigma_r=1.0,
                             a_s=np.zeros((1, 1)), a_a=np.zeros((1, 1)),
                             b_s=np.zeros(1), b_a=np.ones(1))
        _, grad = reward_logpdf_grad(dyn, np.zeros(1), np.array([2.0]), 0.0)
        assert np.allclose(grad, np.array([-2.0]), atol=1e-14)

    def test_reward_grad_zero_at_prediction(self):
        dyn = simple_linear_dyn()
        s_next, a = np.ones(2), np.array([0.5, -0.5])
        r = dyn.reward_mean(s_next, a)
        _, grad = reward_logpdf_grad(dyn, s_next, a, r)
        assert np.allclose(grad, 0.0, atol=1e-14)

    def test_joint_grad_reductions_and_additivity(self):
        dyn = simple_linear_dyn()
        s, a = np.ones(2), np.array([0.2, -0.7])
        s_next = np.array([0.5, 0.1])
        zero = do_intervention_joint_grad(dyn, s, a, s_next, 1.0, 0.0, 0.0)
        assert np.all(zero == 0)
        _, gt = transition_logpdf_grad(dyn, s, a, s_next)
        only_t = do_intervention_joint_grad(dyn, s, a, s_next, 1.0, 1.0, 0.0)
        assert np.array_equal(only_t, gt)
        _, gr = reward_logpdf_grad(dyn, s_next, a, 1.0)
        both = do_intervention_joint_grad(dyn, s, a, s_next, 1.0, 1.0, 1.0)
        assert np.allclose(both, gt + gr, atol=1e-14)

    def test_linear_gradients_match_finite_differences(self, small_instance):
        _, dyn, _ = small_instance
        rng = np.random.default_rng(4)
        for _ in range(30):
            s = rng.standard_normal(dyn.n)
            a = rng.uniform(-1, 1, dyn.d)
            s_next = rng.standard_normal(dyn.n)
            r = rng.standard_normal()
            _, grad = transition_logpdf_grad(dyn, s, a, s_next)
            fd = central_fd(
                lambda v: transition_logpdf_grad(dyn, s, v, s_next)[0], a)
            assert rel_err(grad, fd) < 1e-6
            _, grad = reward_logpdf_grad(dyn, s_next, a, r)
            fd = central_fd(
                lambda v: reward_logpdf_grad(dyn, s_next, v, r)[0], a)
            assert rel_err(grad, fd) < 1e-6

    def test_factorization_joint_equals_sum_of_logpdfs(self, small_instance):
        _, dyn, _ = small_instance
        rng = np.random.default_rng(5)
        s = rng.standard_normal(dyn.n)
        a = rng.uniform(-1, 1, dyn.d)
        s_next = rng.standard_normal(dyn.n)
        r = rng.standard_normal()
        lt, _ = transition_logpdf_grad(dyn, s, a, s_next)
        lr, _ = reward_logpdf_grad(dyn, s_next, a, r)
        joint = lt + lr
        assert np.isfinite(joint)


class TestMaskInvariance:
    def test_masked_out_inputs_have_no_influence(self):
        rng = np.random.default_rng(6)
        scm = random_scm(3, 2, 2, rng=rng)
        data = generate_dataset(scm, 200, 5, 1.5, rng)
        masks = exact_masks(scm)
        for kind in ("linear", "mlp"):
            dyn = fit_dynamics(data, masks, kind=kind,
                               rng=np.random.default_rng(0), mlp_steps=50)
            dead_j = [j for j in range(dyn.d) if not np.any(masks.c_as[j])]
            if not dead_j:
                continue
            s = rng.standard_normal(3)
            a = rng.uniform(-1, 1, 2)
            a2 = a.copy()
            a2[dead_j[0]] += 5.0
            base = dyn.transition_mean(s, a)
            pert = dyn.transition_mean(s, a2)
            assert np.array_equal(base, pert)

    def test_mlp_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        scm = random_scm(3, 2, 2, rng=rng)
        data = generate_dataset(scm, 100, 5, 1.5, rng)
        dyn = fit_dynamics(data, exact_masks(scm), kind="mlp",
                           rng=np.random.default_rng(0), mlp_steps=50)
        for _ in range(20):
            s = rng.standard_normal(3)
            a = rng.uniform(-1, 1, 2)
            s_next = rng.standard_normal(3)
            _, grad = transition_logpdf_grad(dyn, s, a, s_next)
            fd = central_fd(
                lambda v: transition_logpdf_grad(dyn, s, v, s_next)[0], a)
            assert rel_err(grad, fd) < 1e-4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, small_instance, tmp_path):
        _, dyn, _ = small_instance
        p1 = tmp_path / "dyn.txt"
        p2 = tmp_path / "dyn2.txt"
        save_dynamics(dyn, str(p1))
        loaded = load_dynamics(str(p1))
        assert np.array_equal(loaded.a_s, dyn.a_s)
        assert np.array_equal(loaded.a_a, dyn.a_a)
        assert np.array_equal(loaded.sigma_s, dyn.sigma_s)
        assert loaded.sigma_r == dyn.sigma_r
        assert loaded.r_star == dyn.r_star
        save_dynamics(loaded, str(p2))
        assert p1.read_bytes() == p2.read_bytes()
