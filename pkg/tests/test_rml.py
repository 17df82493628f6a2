"""Tests for gradient plumbing, the adaptive optimiser, and online fitting."""

import logging

import numpy as np
import pytest

from pathsmooth import rml
from pathsmooth.bridge import AugmentedTransition, log_pathspace_density
from pathsmooth.errors import ConfigError, NumericalDivergenceError
from pathsmooth.jump_augment import (
    construct_one_logdensity,
    construct_one_sample,
    construct_two_logdensity,
    construct_two_sample,
)
from pathsmooth.oracle import ou_transition_moments
from pathsmooth.rml import GradSpec, adam_init, adam_update
from pathsmooth.sde_core import (
    NoisePath,
    SdeModel,
    feller_ok,
    make_heston_model,
    make_ou_model,
    make_periodic_model,
    make_rates_model,
)
from pathsmooth.smoother import PairBatch
from pathsmooth import smoother as sm

T = 1.0
OU_THETA = np.array([0.5, 0.2, 0.4])


def _cont_aug(rng, m, dim, xprime):
    z = NoisePath(rng.normal(size=(m, dim)) * np.sqrt(T / m), horizon=T)
    return AugmentedTransition(
        variant="continuous", x_prime=np.asarray(xprime, dtype=float), z=z
    )


def _hand_fd(fn, theta, scale=1e-4):
    """Independent central differences of a scalar function of theta."""
    h = scale * np.maximum(1.0, np.abs(theta))
    out = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h[i]
        tm = theta.copy()
        tm[i] -= h[i]
        out[i] = (fn(tp) - fn(tm)) / (2.0 * h[i])
    return out


def _theta_free_model():
    """Coefficients and observation density that never read theta."""
    base = make_ou_model(obs_sd=0.1)
    return SdeModel(
        name="fixedcoef",
        dim_x=1,
        dim_w=1,
        dim_theta=2,
        drift=lambda th, x: 0.2 * np.ones_like(x),
        diffusion=lambda th, x: 0.9 * np.ones(x.shape[:-1] + (1, 1)),
        diffusion_diag=lambda th, x: 0.9 * np.ones_like(x),
        constant_diffusion=True,
        obs_logdensity=base.obs_logdensity,
        obs_loglik_vec=base.obs_loglik_vec,
        obs0_loglik_vec=base.obs0_loglik_vec,
        param_domain=("unconstrained", "unconstrained"),
        init_state=lambda th, y0: np.zeros(1),
    )


def _rate_reading_jump_model():
    """Jump diffusion whose Poisson rate is the fourth parameter."""
    base = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
    return SdeModel(
        name="jumpy4",
        dim_x=1,
        dim_w=1,
        dim_theta=4,
        drift=lambda th, x: th[0] * (th[1] - x),
        diffusion=lambda th, x: th[2] * np.ones(x.shape[:-1] + (1, 1)),
        diffusion_diag=lambda th, x: th[2] * np.ones_like(x),
        constant_diffusion=True,
        obs_logdensity=base.obs_logdensity,
        obs_loglik_vec=base.obs_loglik_vec,
        obs0_loglik_vec=base.obs0_loglik_vec,
        param_domain=("positive", "unconstrained", "positive", "positive"),
        init_state=lambda th, y0: np.zeros(1),
        jump_intensity=lambda th, t: th[3] + 0.0 * np.asarray(t, dtype=float),
        jump_size_logdensity=base.jump_size_logdensity,
        jump_size_sampler=base.jump_size_sampler,
        jump_theta_free=False,
    )


def _heston_guided_loglik(model, theta, x0, aug, y, y_prev):
    """Transition plus observation log density, rebuilt with an explicit loop."""
    z = aug.z.increments
    m = z.shape[0]
    delta = T / m
    dens = log_pathspace_density(model, theta, x0, aug, T)
    cur = np.asarray(x0, dtype=float)
    integral = 0.0
    for j in range(m):
        integral += cur[1] * delta
        if j < m - 1:
            guide = (aug.x_prime - cur) / (T - j * delta)
            sig = model.diffusion_diag(theta, cur)
            cur = cur + guide * delta + sig * z[j]
        else:
            cur = aug.x_prime
    integral = max(integral, model.vol_floor)
    mean = y_prev + theta[3] * T - 0.5 * integral
    return dens - 0.5 * (
        np.log(2.0 * np.pi * integral) + (y - mean) ** 2 / integral
    )


class TestAdam:
    def test_first_step_shrinks_to_sign(self):
        state = adam_init(3)
        c = np.array([0.3, -2.0, 0.0])
        state, step = adam_update(state, c)
        expected = -0.001 * c / (np.abs(c) + 1e-8)
        np.testing.assert_allclose(step, expected, rtol=0.0, atol=1e-12)
        assert step[2] == 0.0
        assert state.count == 1

    def test_two_steps_by_hand(self):
        c = np.array([0.7])
        state = adam_init(1, beta1=0.9, beta2=0.999, alpha=0.01, eps=1e-8)
        state, s1 = adam_update(state, c)
        state, s2 = adam_update(state, c)
        m2 = 0.9 * (0.1 * 0.7) + 0.1 * 0.7
        v2 = 0.999 * (0.001 * 0.49) + 0.001 * 0.49
        mhat = m2 / (1.0 - 0.9**2)
        vhat = v2 / (1.0 - 0.999**2)
        np.testing.assert_allclose(
            s2, [-0.01 * mhat / (np.sqrt(vhat) + 1e-8)], rtol=0.0, atol=1e-12
        )
        np.testing.assert_allclose(state.m, [m2], atol=1e-15)
        np.testing.assert_allclose(state.v, [v2], atol=1e-15)

    def test_zero_gradient_leaves_zero_step(self):
        state = adam_init(2)
        state, step = adam_update(state, np.zeros(2))
        np.testing.assert_array_equal(step, np.zeros(2))
        np.testing.assert_array_equal(state.m, np.zeros(2))

    def test_replay_is_bit_exact(self):
        rng = np.random.default_rng(17)
        cs = rng.normal(size=(12, 4))

        def run():
            st = adam_init(4, alpha=0.05)
            steps = []
            for c in cs:
                st, s = adam_update(st, c)
                steps.append(s)
            return st, np.array(steps)

        st_a, steps_a = run()
        st_b, steps_b = run()
        np.testing.assert_array_equal(steps_a, steps_b)
        np.testing.assert_array_equal(st_a.m, st_b.m)
        np.testing.assert_array_equal(st_a.v, st_b.v)
        assert st_a.count == st_b.count == 12

    def test_rejects_mismatched_shapes_and_bad_rates(self):
        state = adam_init(2)
        with pytest.raises(ConfigError):
            adam_update(state, np.zeros(3))
        with pytest.raises(ConfigError):
            adam_init(2, beta1=1.0)
        with pytest.raises(ConfigError):
            adam_init(2, alpha=0.0)


class TestSchedule:
    def test_decay_values(self):
        assert rml.gamma_schedule(0.5, 1) == 0.5
        np.testing.assert_allclose(
            rml.gamma_schedule(0.5, 32), 0.5 * 32.0**-0.6, rtol=1e-12
        )
        with pytest.raises(ConfigError):
            rml.gamma_schedule(0.5, 0)


class TestTransforms:
    DOMAINS = ("positive", "unconstrained", ("wrap", 0.0, 2.0 * np.pi))

    def test_round_trip(self):
        theta = np.array([0.37, -1.2, 5.9])
        phi = rml.transform_to_opt(theta, self.DOMAINS)
        np.testing.assert_allclose(phi, [np.log(0.37), -1.2, 5.9], atol=1e-15)
        np.testing.assert_allclose(
            rml.transform_from_opt(phi, self.DOMAINS), theta, atol=1e-14
        )

    def test_wrap_pulls_back_into_the_window(self):
        phi = np.array([0.0, 0.0, 7.0])
        theta = rml.transform_from_opt(phi, self.DOMAINS)
        np.testing.assert_allclose(theta[2], 7.0 - 2.0 * np.pi, atol=1e-12)
        theta = rml.transform_from_opt(np.array([0.0, 0.0, -1.0]), self.DOMAINS)
        np.testing.assert_allclose(theta[2], 2.0 * np.pi - 1.0, atol=1e-12)

    def test_chain_factor_is_theta_on_log_coordinates(self):
        theta = np.array([0.37, -1.2, 5.9])
        np.testing.assert_allclose(
            rml.transform_chain(theta, self.DOMAINS), [0.37, 1.0, 1.0]
        )

    def test_nonpositive_coordinate_rejected(self):
        with pytest.raises(ConfigError, match="coordinate 0"):
            rml.transform_to_opt(np.array([-0.1, 0.0, 0.0]), self.DOMAINS)


class TestGradSpec:
    def test_step_rule(self):
        spec = GradSpec()
        np.testing.assert_allclose(
            spec.steps(np.array([0.5, 3.0, -2.0])),
            [1e-4, 3e-4, 2e-4],
            rtol=1e-12,
        )

    def test_rejects_unknown_mode_and_bad_scale(self):
        with pytest.raises(ConfigError):
            GradSpec(mode="symbolic")
        with pytest.raises(ConfigError):
            GradSpec(fd_scale=0.0)

    def test_default_route_per_model(self):
        assert rml.default_grad(make_ou_model()).mode == "analytic"
        assert rml.default_grad(make_ou_model(), "construct_two").mode == (
            "finite_difference"
        )
        assert rml.default_grad(make_heston_model()).mode == "finite_difference"
        assert rml.default_grad(_theta_free_model()).mode == "finite_difference"


class TestScoreIncrement:
    def test_analytic_matches_hand_differences_of_the_scalar_density(self):
        model = make_ou_model(obs_sd=0.1)
        rng = np.random.default_rng(7)
        aug = _cont_aug(rng, 30, 1, [0.45])
        x = np.array([0.1])
        an = rml.score_increment(
            model, OU_THETA, 3, x, aug, None, GradSpec(mode="analytic")
        )
        hand = _hand_fd(
            lambda tv: log_pathspace_density(model, tv, x, aug, T),
            OU_THETA.copy(),
        )
        rel = np.abs(an - hand) / np.maximum(1.0, np.abs(hand))
        assert rel.max() < 1e-6

    def test_finite_differences_track_the_analytic_score(self):
        model = make_ou_model(obs_sd=0.1)
        rng = np.random.default_rng(7)
        aug = _cont_aug(rng, 30, 1, [0.45])
        x = np.array([0.1])
        an = rml.score_increment(
            model, OU_THETA, 3, x, aug, None, GradSpec(mode="analytic")
        )
        fd = rml.score_increment(model, OU_THETA, 3, x, aug, None, GradSpec())
        rel = np.abs(fd - an) / np.maximum(1.0, np.abs(an))
        assert rel.max() < 1e-6

    @pytest.mark.parametrize(
        "name",
        ["ou", "periodic", "heston", "rates_m1", "rates_m2", "rates_m3",
         "ou_jump_c1", "ou_jump_c2"],
    )
    def test_halving_the_step_barely_moves_the_estimate(self, name):
        rng = np.random.default_rng(7)
        y = y_prev = None
        if name == "ou":
            model, theta = make_ou_model(obs_sd=0.1), OU_THETA
            x, aug = np.array([0.1]), _cont_aug(rng, 24, 1, [0.45])
        elif name == "periodic":
            model = make_periodic_model()
            theta = np.array([np.pi / 4, 0.9])
            x, aug = np.array([0.3]), _cont_aug(rng, 24, 1, [1.1])
        elif name == "heston":
            model = make_heston_model()
            theta = np.array([0.1, 1.0, 0.2, 0.45])
            x = np.array([0.0, 1.0])
            aug = _cont_aug(rng, 16, 2, [0.05, 0.9])
            y, y_prev = 0.03, 0.0
        elif name.startswith("rates"):
            fam = int(name[-1])
            model = make_rates_model(fam)
            theta = np.array(
                {1: [0.05, -0.1, 0.2],
                 2: [0.05, -0.1, 0.1, 0.2],
                 3: [0.05, -0.1, 0.1, 0.02, 0.2]}[fam]
            )
            x, aug = np.array([0.8]), _cont_aug(rng, 24, 1, [0.9])
        else:
            model = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
            theta = np.array([0.3, 0.0, 0.2])
            x = np.array([0.1])
            sampler = (
                construct_one_sample if name.endswith("c1") else construct_two_sample
            )
            aug = sampler(model, theta, x, T, 20, np.random.default_rng(13))
        d_h = rml.score_increment(
            model, theta, 2, x, aug, y, GradSpec(), y_prev=y_prev
        )
        d_half = rml.score_increment(
            model, theta, 2, x, aug, y, GradSpec(fd_scale=0.5e-4), y_prev=y_prev
        )
        assert np.all(np.isfinite(d_h)) and np.all(np.isfinite(d_half))
        rel = np.abs(d_h - d_half) / np.maximum(1.0, np.abs(d_half))
        assert rel.max() < 1e-5

    def test_theta_free_model_scores_exactly_zero(self):
        model = _theta_free_model()
        rng = np.random.default_rng(3)
        aug = _cont_aug(rng, 12, 1, [0.2])
        out = rml.score_increment(
            model, np.array([5.0, -2.0]), 2, np.array([0.0]), aug, None, GradSpec()
        )
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_nonfinite_gradient_names_the_coordinate(self):
        base = make_ou_model(obs_sd=0.1)
        model = SdeModel(
            name="cliff",
            dim_x=1,
            dim_w=1,
            dim_theta=2,
            drift=lambda th, x: np.where(th[0] > 0.35, th[0], np.nan) * x,
            diffusion=lambda th, x: np.ones(x.shape[:-1] + (1, 1)),
            diffusion_diag=lambda th, x: np.ones_like(x),
            constant_diffusion=True,
            obs_logdensity=base.obs_logdensity,
            obs_loglik_vec=base.obs_loglik_vec,
            obs0_loglik_vec=base.obs0_loglik_vec,
            param_domain=("unconstrained", "unconstrained"),
        )
        rng = np.random.default_rng(3)
        aug = _cont_aug(rng, 8, 1, [0.2])
        theta = np.array([0.35 + 5e-5, 0.0])
        with pytest.raises(NumericalDivergenceError, match="coordinate 0"):
            rml.score_increment(model, theta, 2, np.array([0.1]), aug, None, GradSpec())

    def test_jump_adapted_matches_hand_differences(self):
        model = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
        theta = np.array([0.3, 0.0, 0.2])
        x = np.array([0.1])
        aug = construct_two_sample(model, theta, x, T, 20, np.random.default_rng(13))
        assert aug.jumps.kappa > 0
        fd = rml.score_increment(model, theta, 2, x, aug, None, GradSpec())
        hand = _hand_fd(
            lambda tv: construct_two_logdensity(model, tv, x, aug, T), theta.copy()
        )
        np.testing.assert_allclose(fd, hand, atol=1e-9)

    def test_jumps_first_matches_hand_differences(self):
        model = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
        theta = np.array([0.3, 0.0, 0.2])
        x = np.array([0.1])
        aug = construct_one_sample(model, theta, x, T, 20, np.random.default_rng(13))
        assert aug.jumps.kappa > 0
        fd = rml.score_increment(model, theta, 2, x, aug, None, GradSpec())
        hand = _hand_fd(
            lambda tv: construct_one_logdensity(model, tv, x, aug, T), theta.copy()
        )
        np.testing.assert_allclose(fd, hand, atol=1e-9)
        # extrapolating the hand differences removes their own h^2 error,
        # leaving a sharp target for the closed-form per-segment route
        half = _hand_fd(
            lambda tv: construct_one_logdensity(model, tv, x, aug, T),
            theta.copy(),
            scale=0.5e-4,
        )
        rich = (4.0 * half - hand) / 3.0
        an = rml.score_increment(
            model, theta, 2, x, aug, None, GradSpec(mode="analytic")
        )
        rel = np.abs(an - rich) / np.maximum(1.0, np.abs(rich))
        assert rel.max() < 1e-9

    def test_theta_reading_jump_rate_gets_the_poisson_score(self):
        model = _rate_reading_jump_model()
        theta = np.array([0.5, 0.2, 0.4, 0.7])
        x = np.array([0.1])
        aug = construct_two_sample(model, theta, x, T, 20, np.random.default_rng(21))
        assert aug.jumps.kappa > 0
        fd = rml.score_increment(model, theta, 2, x, aug, None, GradSpec())
        # the record factor is exp(T - rate T) rate^kappa here, so its
        # rate-derivative is kappa / rate - T
        expected = aug.jumps.kappa / theta[3] - T
        np.testing.assert_allclose(fd[3], expected, atol=1e-6)

    def test_integrated_volatility_feeds_the_observation_score(self):
        model = make_heston_model()
        theta = np.array([0.1, 1.0, 0.2, 0.45])
        x = np.array([0.0, 1.0])
        aug = _cont_aug(np.random.default_rng(5), 16, 2, [0.05, 0.9])
        y, y_prev = 0.03, 0.0
        fd = rml.score_increment(
            model, theta, 2, x, aug, y, GradSpec(), y_prev=y_prev
        )
        hand = _hand_fd(
            lambda tv: _heston_guided_loglik(model, tv, x, aug, y, y_prev),
            theta.copy(),
        )
        np.testing.assert_allclose(fd, hand, atol=1e-8)

    def test_first_step_rederives_the_initial_state(self):
        model = make_heston_model()
        theta = np.array([0.1, 1.0, 0.2, 0.45])
        aug = _cont_aug(np.random.default_rng(5), 16, 2, [0.05, 0.9])
        y, y0 = 0.03, 0.0
        x_frozen = model.init_state(theta, y0)
        k1 = rml.score_increment(
            model, theta, 1, x_frozen, aug, y, GradSpec(), y_prev=y0, y0=y0
        )
        k2 = rml.score_increment(
            model, theta, 2, x_frozen, aug, y, GradSpec(), y_prev=y0
        )
        hand = _hand_fd(
            lambda tv: _heston_guided_loglik(
                model, tv, model.init_state(tv, y0), aug, y, y0
            ),
            theta.copy(),
        )
        np.testing.assert_allclose(k1, hand, atol=1e-8)
        # the long-run-variance coordinate sets the starting state, so its
        # score changes materially once the start is allowed to move
        assert abs(k1[1] - k2[1]) > 1.0

    def test_analytic_mode_guards(self):
        heston = make_heston_model()
        aug = _cont_aug(np.random.default_rng(5), 8, 2, [0.05, 0.9])
        with pytest.raises(ConfigError, match="theta-free observation"):
            rml.score_increment(
                heston,
                np.array([0.1, 1.0, 0.2, 0.45]),
                2,
                np.array([0.0, 1.0]),
                aug,
                0.03,
                GradSpec(mode="analytic"),
                y_prev=0.0,
            )
        jm = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
        theta = np.array([0.3, 0.0, 0.2])
        aug2 = construct_two_sample(
            jm, theta, np.array([0.1]), T, 12, np.random.default_rng(13)
        )
        with pytest.raises(ConfigError, match="jump-adapted"):
            rml.score_increment(
                jm, theta, 2, np.array([0.1]), aug2, None, GradSpec(mode="analytic")
            )

    def test_horizon_mismatch_rejected(self):
        model = make_ou_model(obs_sd=0.1)
        aug = _cont_aug(np.random.default_rng(3), 8, 1, [0.2])
        with pytest.raises(ConfigError, match="horizon"):
            rml.score_increment(
                model, OU_THETA, 2, np.array([0.0]), aug, None, GradSpec(),
                horizon=2.0,
            )


class TestScoreFunctional:
    def test_initial_observation_score_matches_closed_form(self):
        base = make_ou_model(obs_sd=0.1)
        model = SdeModel(
            name="sigma_obs",
            dim_x=1,
            dim_w=1,
            dim_theta=2,
            drift=lambda th, x: -x,
            diffusion=lambda th, x: np.ones(x.shape[:-1] + (1, 1)),
            diffusion_diag=lambda th, x: np.ones_like(x),
            constant_diffusion=True,
            obs_logdensity=base.obs_logdensity,
            obs_loglik_vec=lambda th, y, yp, xe, st, d: -0.5 * (
                np.log(2 * np.pi * th[1] ** 2) + (y - xe[..., 0]) ** 2 / th[1] ** 2
            ),
            obs0_loglik_vec=lambda th, y0, x0: -0.5 * (
                np.log(2 * np.pi * th[1] ** 2) + (y0 - x0[..., 0]) ** 2 / th[1] ** 2
            ),
            param_domain=("unconstrained", "positive"),
            obs_theta_free=False,
        )
        theta = np.array([0.4, 0.7])
        y0 = 0.3
        x0 = np.array([[0.0], [0.2], [-0.5], [0.9]])
        func = rml.score_functional(model, observations=[y0], grad=GradSpec())
        got = func.s0(theta, x0)
        resid = y0 - x0[:, 0]
        expected = np.stack(
            [np.zeros(4), resid**2 / 0.7**3 - 1.0 / 0.7], axis=1
        )
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_theta_free_initial_score_is_exactly_zero(self):
        model = make_ou_model(obs_sd=0.1)
        func = rml.score_functional(model, observations=[0.3], grad=GradSpec())
        got = func.s0(OU_THETA, np.array([[0.0], [0.4]]))
        np.testing.assert_array_equal(got, np.zeros((2, 3)))
        bare = rml.score_functional(model, grad=GradSpec())
        np.testing.assert_array_equal(
            bare.s0(OU_THETA, np.array([[0.0]])), np.zeros((1, 3))
        )

    def test_per_root_rows_match_single_increments(self):
        model = make_ou_model(obs_sd=0.1)
        rng = np.random.default_rng(11)
        aug = _cont_aug(rng, 10, 1, [0.3])
        x_prev = rng.normal(size=(5, 1)) * 0.3
        func = rml.score_functional(model, grad=GradSpec())
        rows = func.s_k(OU_THETA, 2, x_prev, aug)
        for j in range(5):
            one = rml.score_increment(
                model, OU_THETA, 2, x_prev[j], aug, None, GradSpec()
            )
            np.testing.assert_allclose(rows[j], one, atol=1e-12)

    def _continuous_batch(self, rng, n_new):
        augs = tuple(
            _cont_aug(rng, 10, 1, [0.2 + 0.1 * i]) for i in range(n_new)
        )
        return (
            PairBatch(
                variant="continuous",
                horizon=T,
                x_prime=np.stack([a.x_prime for a in augs]),
                z=np.stack([a.z.increments for a in augs]),
                jump_incr=None,
                augs=augs,
            ),
            augs,
        )

    def test_pairwise_block_matches_per_pair_loop(self):
        model = make_ou_model(obs_sd=0.1)
        rng = np.random.default_rng(7)
        batch, augs = self._continuous_batch(rng, 3)
        x_prev = rng.normal(size=(4, 1)) * 0.3
        func = rml.score_functional(model, grad=GradSpec())
        block = func.s_k_pairs(OU_THETA, 2, x_prev, batch)
        assert block.shape == (3, 4, 3)
        for i in range(3):
            for j in range(4):
                one = rml.score_increment(
                    model, OU_THETA, 2, x_prev[j], augs[i], None, GradSpec()
                )
                np.testing.assert_allclose(block[i, j], one, atol=1e-13)

    def test_pairwise_analytic_route_agrees(self):
        model = make_ou_model(obs_sd=0.1)
        rng = np.random.default_rng(7)
        batch, _ = self._continuous_batch(rng, 3)
        x_prev = rng.normal(size=(4, 1)) * 0.3
        fd = rml.score_functional(model, grad=GradSpec())
        an = rml.score_functional(model, grad=GradSpec(mode="analytic"))
        np.testing.assert_allclose(
            an.s_k_pairs(OU_THETA, 2, x_prev, batch),
            fd.s_k_pairs(OU_THETA, 2, x_prev, batch),
            atol=1e-5,
        )

    @pytest.mark.parametrize("variant", ["construct_one", "construct_two"])
    def test_jump_pairs_match_per_pair_loop(self, variant):
        from pathsmooth.sde_core import jump_increments

        model = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
        theta = np.array([0.3, 0.0, 0.2])
        rng = np.random.default_rng(29)
        sampler = (
            construct_one_sample if variant == "construct_one" else construct_two_sample
        )
        augs = tuple(
            sampler(model, theta, np.array([0.1 * i]), T, 12, rng) for i in range(3)
        )
        if variant == "construct_two":
            batch = PairBatch(
                variant=variant,
                horizon=T,
                x_prime=np.stack([a.x_prime for a in augs]),
                z=np.stack([a.z.increments for a in augs]),
                jump_incr=np.stack(
                    [jump_increments(a.jumps, T, 12, 1) for a in augs]
                ),
                augs=augs,
            )
        else:
            batch = PairBatch(
                variant=variant,
                horizon=T,
                x_prime=np.stack([a.x_prime for a in augs]),
                z=None,
                jump_incr=None,
                augs=augs,
            )
        x_prev = np.array([[0.05], [-0.2]])
        func = rml.score_functional(model, grad=GradSpec())
        block = func.s_k_pairs(theta, 2, x_prev, batch)
        for i in range(3):
            for j in range(2):
                one = rml.score_increment(
                    model, theta, 2, x_prev[j], augs[i], None, GradSpec()
                )
                np.testing.assert_allclose(block[i, j], one, atol=1e-12)

    def test_discrete_batches_are_rejected(self):
        func = rml.score_functional(make_ou_model(), grad=GradSpec())
        with pytest.raises(ConfigError, match="discrete"):
            func.s_k_pairs(OU_THETA, 1, np.zeros((2, 1)), np.zeros((3, 1)))

    def test_observation_bookkeeping_errors(self):
        heston = make_heston_model()
        with pytest.raises(ConfigError, match="observation sequence"):
            rml.score_functional(heston, observations=None, grad=GradSpec())
        func = rml.score_functional(heston, observations=[0.0], grad=GradSpec())
        aug = _cont_aug(np.random.default_rng(5), 8, 2, [0.05, 0.9])
        with pytest.raises(ConfigError, match="step 1"):
            func.s_k(
                np.array([0.1, 1.0, 0.2, 0.45]), 1, np.zeros((2, 2)), aug
            )

    def test_rides_inside_the_smoother(self):
        model = make_heston_model()
        theta = np.array([0.1, 0.5, 0.25, 0.45])
        obs = [0.0]
        func = rml.score_functional(model, observations=obs, grad=GradSpec())
        rng = np.random.default_rng(23)
        x_init = model.init_state(theta, obs[0])
        state = sm.init(
            model,
            theta,
            lambda r, n: np.broadcast_to(x_init, (n, 2)).copy(),
            obs[0],
            func,
            10,
            rng,
        )
        np.testing.assert_array_equal(state.s_hat, np.zeros(4))
        for y in (0.15, 0.3):
            obs.append(y)
            state = sm.step(state, model, theta, y, "continuous", 6, rng)
        assert state.s_hat.shape == (4,)
        assert np.all(np.isfinite(state.s_hat))
        assert np.isfinite(state.loglik)


class TestOnlineGradientAscent:
    @staticmethod
    def _ou_stream(n_obs, seed=99, truth=(0.2, 0.0, 0.2), obs_sd=0.1):
        rng = np.random.default_rng(seed)
        truth = np.asarray(truth, dtype=float)
        x = 0.0
        ys = []
        for _ in range(n_obs):
            mean, var = ou_transition_moments(truth, x, 1.0)
            x = float(mean + np.sqrt(var) * rng.normal())
            ys.append(x + obs_sd * rng.normal())
        return np.array(ys)

    def test_every_coordinate_moves_toward_the_truth(self):
        ys = self._ou_stream(400)
        res = rml.online_gradient_ascent(
            make_ou_model(obs_sd=0.1),
            ys,
            np.array([1.0, 1.0, 1.0]),
            n_particles=50,
            m_steps=8,
            rng=np.random.default_rng(3),
            grad=GradSpec(mode="analytic"),
        )
        assert res.thetas.shape == (401, 3)
        np.testing.assert_array_equal(res.thetas[0], [1.0, 1.0, 1.0])
        final = res.thetas[-1]
        truth = np.array([0.2, 0.0, 0.2])
        assert np.all(np.abs(final - truth) < np.abs(res.thetas[0] - truth))
        assert final[0] < 0.85 and final[1] < 0.75 and final[2] < 0.92
        assert np.isfinite(res.loglik)

    def test_masked_coordinates_never_move(self):
        ys = self._ou_stream(60)
        res = rml.online_gradient_ascent(
            make_ou_model(obs_sd=0.1),
            ys,
            np.array([1.0, 1.0, 1.0]),
            n_particles=30,
            m_steps=8,
            rng=np.random.default_rng(3),
            grad=GradSpec(mode="analytic"),
            free_mask=[True, False, True],
        )
        np.testing.assert_array_equal(np.unique(res.thetas[:, 1]), [1.0])
        assert res.thetas[-1, 0] != 1.0

    def test_decaying_schedule_is_a_separate_route(self):
        ys = self._ou_stream(30)
        kwargs = dict(
            n_particles=20,
            m_steps=8,
            rng=np.random.default_rng(3),
            grad=GradSpec(mode="analytic"),
        )
        res = rml.online_gradient_ascent(
            make_ou_model(obs_sd=0.1), ys, np.array([1.0, 1.0, 1.0]),
            optimizer="sgd", gamma0=0.05, **kwargs
        )
        assert np.all(np.isfinite(res.thetas))
        with pytest.raises(ConfigError, match="not a modifier"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1), ys, np.array([1.0, 1.0, 1.0]),
                gamma0=0.05, **kwargs
            )
        with pytest.raises(ConfigError, match="gamma0"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1), ys, np.array([1.0, 1.0, 1.0]),
                optimizer="sgd", **kwargs
            )
        with pytest.raises(ConfigError, match="optimizer"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1), ys, np.array([1.0, 1.0, 1.0]),
                optimizer="nesterov", **kwargs
            )

    def test_guard_aborts_with_diagnostics(self):
        ys = self._ou_stream(5)
        with pytest.raises(NumericalDivergenceError, match="observation 1"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1),
                ys,
                np.array([1.0, 1.0, 1.0]),
                n_particles=20,
                m_steps=8,
                rng=np.random.default_rng(3),
                grad=GradSpec(mode="analytic"),
                guard=0.01,
            )

    def test_feller_violations_are_projected_and_logged(self, caplog):
        model = make_heston_model()
        theta0 = np.array([0.1, 0.5, 0.35, 0.45])
        assert not feller_ok(theta0)
        with caplog.at_level(logging.WARNING, logger="pathsmooth.rml"):
            res = rml.online_gradient_ascent(
                model,
                [0.15, 0.3],
                theta0,
                n_particles=12,
                m_steps=6,
                rng=np.random.default_rng(11),
                y0=0.0,
            )
        assert res.feller_projections >= 1
        assert feller_ok(res.thetas[-1])
        assert any("projected" in rec.message for rec in caplog.records)

    @pytest.mark.parametrize("selector", ["construct_one", "construct_two"])
    def test_jump_augmentations_drive_the_fit(self, selector):
        model = make_ou_model(lam=0.5, zeta=0.5, obs_sd=0.1)
        res = rml.online_gradient_ascent(
            model,
            [0.2, -0.1, 0.3, 0.1],
            np.array([0.4, 0.1, 0.3]),
            n_particles=12,
            m_steps=6,
            rng=np.random.default_rng(5),
            selector=selector,
        )
        assert res.thetas.shape == (5, 3)
        assert np.all(np.isfinite(res.thetas))
        assert res.thetas[-1][0] > 0.0 and res.thetas[-1][2] > 0.0

    def test_bad_starting_points_are_rejected(self):
        ys = self._ou_stream(3)
        with pytest.raises(ConfigError, match="shape"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1), ys, np.array([1.0, 1.0]),
                n_particles=10, m_steps=6, rng=np.random.default_rng(0),
            )
        with pytest.raises(ConfigError, match="positive"):
            rml.online_gradient_ascent(
                make_ou_model(obs_sd=0.1), ys, np.array([-1.0, 0.0, 0.5]),
                n_particles=10, m_steps=6, rng=np.random.default_rng(0),
            )
