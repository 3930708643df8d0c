import math

import numpy as np
import pytest

from magic import schedule as sch
from magic.rngstream import stream


def toy_sched():
    return sch.make_schedule("linear", 10, 0.05, 0.2, 10)


class TestMakeSchedule:
    def test_two_step_product(self):
        s = sch.make_schedule("linear", 2, 0.1, 0.2, 2)
        assert s.alpha_bar(2) == pytest.approx(0.9 * 0.8)

    def test_full_subsequence(self):
        s = sch.make_schedule("linear", 5, 0.1, 0.2, 5)
        assert s.sample_steps == (5, 4, 3, 2, 1)

    def test_default_terminal_alpha(self):
        s = sch.default_schedule()
        # independent recomputation of the cumulative product
        betas = np.linspace(1e-4, 0.02, 1000)
        assert s.alpha_bar(1000) == pytest.approx(float(np.prod(1 - betas)))
        assert s.alpha_bar(1000) < 1e-2

    def test_alpha_strictly_decreasing(self):
        s = sch.default_schedule()
        assert np.all(np.diff(s.alphas_cum) < 0)

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            sch.make_schedule("linear", 10, 0.3, 0.2, 5)
        with pytest.raises(ValueError):
            sch.make_schedule("linear", 10, 0.0, 0.2, 5)
        with pytest.raises(ValueError):
            sch.make_schedule("linear", 10, 0.1, 0.2, 11)
        with pytest.raises(ValueError):
            sch.make_schedule("cosine", 10, 0.1, 0.2, 5)

    def test_step_pairs_end_at_zero(self):
        s = toy_sched()
        pairs = s.step_pairs()
        assert pairs[0] == (10, 9)
        assert pairs[-1] == (1, 0)


class TestForwardNoise:
    def test_zero_eps_closed_form(self):
        s = sch.make_schedule("linear", 1, 0.19, 0.19, 1)  # alpha_1 = 0.81
        x0 = np.full((1, 1, 4, 4), 2.0)
        out = sch.forward_noise(x0, 1, np.zeros_like(x0), s)
        assert np.allclose(out, 0.9 * x0)

    def test_zero_x0(self):
        s = toy_sched()
        eps = np.ones((1, 1, 4, 4))
        out = sch.forward_noise(np.zeros_like(eps), 5, eps, s)
        assert np.allclose(out, math.sqrt(1 - s.alpha_bar(5)))

    def test_out_of_range_t_rejected(self):
        s = toy_sched()
        x = np.zeros((1, 1, 2, 2))
        with pytest.raises(ValueError):
            sch.forward_noise(x, 0, x, s)
        with pytest.raises(ValueError):
            sch.forward_noise(x, 11, x, s)

    def test_marginal_moments_monte_carlo(self):
        s = sch.default_schedule()
        t = 400
        x0 = np.array(0.7)
        rng = stream(7, "mc")
        n = 10_000
        draws = np.array([sch.forward_noise(x0, t, rng.standard_normal(), s) for _ in range(n)])
        a = s.alpha_bar(t)
        se_mean = math.sqrt(1 - a) / math.sqrt(n)
        assert abs(draws.mean() - math.sqrt(a) * 0.7) < 3 * se_mean
        se_var = (1 - a) * math.sqrt(2 / (n - 1))
        assert abs(draws.var(ddof=1) - (1 - a)) < 3 * se_var


class TestSigma:
    def fake(self, alphas):
        return sch.NoiseSchedule(len(alphas), np.zeros(len(alphas)), np.array(alphas), tuple(range(len(alphas), 0, -1)))

    def test_eta_zero(self):
        s = toy_sched()
        for t, tp in s.step_pairs():
            assert sch.sigma_t(s, t, tp, 0.0) == 0.0

    def test_equal_alphas(self):
        s = self.fake([0.5, 0.5])
        assert sch.sigma_t(s, 2, 1, 1.0) == 0.0

    def test_spot_value_high_precision(self):
        s = self.fake([0.8, 0.5])
        expected = math.sqrt((1 - 0.8) / (1 - 0.5)) * math.sqrt(1 - 0.5 / 0.8)
        got = sch.sigma_t(s, 2, 1, 1.0)
        assert got == pytest.approx(expected, rel=1e-12)
        assert got == pytest.approx(0.38730, abs=5e-6)

    def test_bad_predecessor_rejected(self):
        s = self.fake([0.8, 0.5])
        with pytest.raises(ValueError):
            sch.sigma_t(s, 1, 2, 1.0)


class TestDDIMStep:
    def test_deterministic_at_eta_zero(self):
        s = toy_sched()
        rng = stream(0, "d")
        z = stream(1, "z").standard_normal((1, 1, 4, 4))
        e = stream(2, "e").standard_normal((1, 1, 4, 4))
        a = sch.ddim_step(z, e, 10, 9, 0.0, rng, s)
        b = sch.ddim_step(z, e, 10, 9, 0.0, rng, s)
        assert np.array_equal(a, b)

    def test_exact_inversion_to_x0(self):
        s = toy_sched()
        x0 = stream(3, "x").standard_normal((1, 1, 4, 4))
        eps = stream(4, "n").standard_normal((1, 1, 4, 4))
        z1 = sch.forward_noise(x0, 1, eps, s)
        rec = sch.ddim_step(z1, eps, 1, 0, 0.0, stream(5, "r"), s)
        assert np.allclose(rec, x0, atol=1e-12)

    def test_eta_one_matches_ddpm_posterior_mean(self):
        s = toy_sched()
        t, tp = 5, 4
        z = stream(6, "z").standard_normal((1, 1, 4, 4))
        eps = stream(7, "e").standard_normal((1, 1, 4, 4))
        out = sch.ddim_step(z, eps, t, tp, 1.0, stream(8, "n"), s)
        noise = stream(8, "n").standard_normal(z.shape)
        mean = out - sch.sigma_t(s, t, tp, 1.0) * noise
        # independent oracle: DDPM ancestral posterior mean in terms of
        # (x0_hat, z_t) with per-step alpha = a_t / a_prev
        a_t, a_prev = s.alpha_bar(t), s.alpha_bar(tp)
        alpha_step = a_t / a_prev
        beta_step = 1 - alpha_step
        x0_hat = (z - math.sqrt(1 - a_t) * eps) / math.sqrt(a_t)
        ddpm_mean = (
            math.sqrt(a_prev) * beta_step / (1 - a_t) * x0_hat
            + math.sqrt(alpha_step) * (1 - a_prev) / (1 - a_t) * z
        )
        assert np.allclose(mean, ddpm_mean, atol=1e-10)

    def test_shape_mismatch_rejected(self):
        s = toy_sched()
        with pytest.raises(ValueError):
            sch.ddim_step(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), 5, 4, 0.0, None, s)


class TestRenoise:
    def test_equal_alphas_identity(self):
        fake = sch.NoiseSchedule(2, np.zeros(2), np.array([0.5, 0.5]), (2, 1))
        z = np.ones((1, 1, 2, 2))
        assert np.array_equal(sch.renoise(z, 2, 1, stream(0, "x"), fake), z)

    def test_variance_from_zero(self):
        s = toy_sched()
        t, tp = 6, 5
        rng = stream(11, "v")
        n = 10_000
        draws = np.array([sch.renoise(np.zeros((1,)), t, tp, rng, s)[0] for _ in range(n)])
        target = 1 - s.alpha_bar(t) / s.alpha_bar(tp)
        se = target * math.sqrt(2 / (n - 1))
        assert abs(draws.var(ddof=1) - target) < 3 * se

    def test_composition_preserves_marginal(self):
        s = toy_sched()
        t, tp = 8, 7
        rng = stream(12, "c")
        n = 10_000
        vals = np.empty(n)
        for i in range(n):
            ztp = sch.forward_noise(np.zeros((1,)), tp, rng.standard_normal((1,)), s)
            vals[i] = sch.renoise(ztp, t, tp, rng, s)[0]
        target = 1 - s.alpha_bar(t)
        se = target * math.sqrt(2 / (n - 1))
        assert abs(vals.var(ddof=1) - target) < 3 * se

    def test_ordering_violation_rejected(self):
        s = toy_sched()
        with pytest.raises(ValueError):
            sch.renoise(np.zeros((1,)), 4, 5, stream(0, "x"), s)
