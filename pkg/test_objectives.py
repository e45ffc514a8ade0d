#!/usr/bin/env python3
"""Tests for training objectives, KL terms and the variational bound."""

import numpy as np
import pytest

from lrdm.lrdm_autodiff import Tensor, gradient_relative_error, no_grad, numerical_gradient
from lrdm.lrdm_models import DenoiserNet, ReprEncoder
from lrdm.lrdm_objectives import (ObjectiveService, RegularizationConfig, gaussian_log_density, kl_gaussians,
                                  kl_standard_normal, kl_standard_normal_values)
from lrdm.lrdm_process import DiffusionProcess
from lrdm.lrdm_schedule import build_linear


def _repr_nets(T=10, timestep_conditional=False, seed=0):
    net = DenoiserNet(2, T, hidden=[8], embed_dim=4, repr_dim=2, seed=seed)
    enc = ReprEncoder(2, repr_dim=2, hidden=[8, 8], T=T, embed_dim=4,
                      timestep_conditional=timestep_conditional, seed=seed + 1)
    return net, enc


class TiedTimestepEncoder(ReprEncoder):
    """Timestep-conditional encoder that ignores t."""

    def __init__(self, base: ReprEncoder):
        self.__dict__.update(base.__dict__)
        self.timestep_conditional = True
        self._base = base

    def encode(self, z0, t=None, class_id=None):
        return self._base.encode(z0, None, class_id)


def test_kl_standard_normal_values():
    assert kl_standard_normal(np.zeros((1, 3)), np.zeros((1, 3))).item() == 0.0
    assert kl_standard_normal(np.array([1.0]), np.array([0.0])).item() == pytest.approx(0.5)
    assert kl_standard_normal_values(np.array([[1.0]]), np.array([[0.0]]))[0] == pytest.approx(0.5)


def test_kl_standard_normal_matches_monte_carlo():
    mu, logvar = np.array([0.7, -0.3]), np.array([-0.5, 0.4])
    rng = np.random.default_rng(0)
    n = 1000000
    std = np.exp(0.5 * logvar)
    r = mu + std * rng.standard_normal((n, 2))
    samples = gaussian_log_density(r, mu, np.exp(logvar)) - gaussian_log_density(r, 0.0, 1.0)
    exact = kl_standard_normal(mu, logvar).item()
    assert abs(samples.mean() - exact) < 4 * samples.std() / np.sqrt(n)
    assert kl_gaussians(mu, np.exp(logvar), 0.0, 1.0) == pytest.approx(exact, rel=1e-12)


def test_regularization_weight_validated():
    with pytest.raises(ValueError):
        RegularizationConfig(-1.0)
    with pytest.raises(ValueError):
        RegularizationConfig(float("nan"))


def test_dm_loss_oracle_is_zero(toy_schedule, oracles):
    objectives = ObjectiveService(toy_schedule)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((16, 2))
    for p in ("image", "noise", "mean"):
        loss = objectives.dm_loss(oracles.oracle(toy_schedule, x0, p), x0, p, "vlb", rng)
        assert loss.total == pytest.approx(0.0, abs=1e-18)


def test_dm_loss_zero_predictor_noise_simple(toy_schedule, oracles):
    objectives = ObjectiveService(toy_schedule)
    rng = np.random.default_rng(1)
    n, d = 20000, 3
    x0 = rng.standard_normal((n, d))
    loss = objectives.dm_loss(oracles.zero(), x0, "noise", "simple", rng)
    # ||eps||^2 ~ chi-square(d): mean d, variance 2d
    assert abs(loss.total - d) < 4 * np.sqrt(2 * d / n)
    assert np.all(loss.weight_applied == 1.0)


def test_image_vlb_equals_noise_vlb_after_conversion(toy_schedule):
    objectives = ObjectiveService(toy_schedule)
    proc = DiffusionProcess(toy_schedule)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((8, 2))
    t = rng.integers(1, 4, size=8)
    eps = rng.standard_normal((8, 2))
    x0_hat = x0 + 0.3 * rng.standard_normal((8, 2))

    class ImageNet:
        repr_dim = 0
        num_classes = 0

        def __call__(self, x_t, t, **kwargs):
            return x0_hat

    class NoiseNet(ImageNet):
        def __call__(self, x_t, t, **kwargs):
            return proc.x0_to_eps(x_t, x0_hat, t)

    image = objectives.dm_loss(ImageNet(), x0, "image", "vlb", t=t, eps=eps)
    noise = objectives.dm_loss(NoiseNet(), x0, "noise", "vlb", t=t, eps=eps)
    assert image.total == pytest.approx(noise.total, rel=1e-10)


def test_dm_loss_rejects_representation_net(toy_schedule):
    net = DenoiserNet(2, 3, hidden=[4], embed_dim=4, repr_dim=2)
    with pytest.raises(ValueError):
        ObjectiveService(toy_schedule).dm_loss(net, np.zeros((2, 2)), "noise", "simple", np.random.default_rng(0))


@pytest.mark.parametrize("weighting", ["vlb", "simple"])
@pytest.mark.parametrize("parameterization", ["noise", "image", "mean"])
def test_dm_loss_gradients_match_finite_differences(toy_schedule, parameterization, weighting):
    net = DenoiserNet(2, 3, hidden=[4], embed_dim=4, seed=5)
    objectives = ObjectiveService(toy_schedule)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 2))
    t = np.array([1, 2, 3, 2])
    eps = rng.standard_normal((4, 2))

    def value():
        with no_grad():
            return objectives.dm_loss(net, x0, parameterization, weighting, t=t, eps=eps, train_mode=False).total

    net.zero_grad()
    objectives.dm_loss(net, x0, parameterization, weighting, t=t, eps=eps, train_mode=False).loss.backward()
    for name, p in net.named_parameters():
        assert gradient_relative_error(p.grad, numerical_gradient(value, p)) < 1e-4, name


def _representation_loss(objectives, mode, net, enc, x0, t, eps, noise):
    if mode == "lvae":
        return objectives.lvae_loss(net, enc, x0, 0.1, eps=eps, noise=noise, train_mode=False)
    loss_fn = objectives.lrdm_loss if mode == "lrdm" else objectives.t_lrdm_loss
    return loss_fn(net, enc, x0, 0.1, t=t, eps=eps, noise=noise, train_mode=False)


@pytest.mark.parametrize("mode", ["lrdm", "t_lrdm", "lvae"])
def test_representation_loss_gradients_reach_encoder(toy_schedule, mode):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3, timestep_conditional=(mode == "t_lrdm"), seed=7)
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((4, 2))
    t = np.array([1, 3, 2, 3])
    eps = rng.standard_normal((4, 2))
    noise = rng.standard_normal((4, 2))

    def value():
        with no_grad():
            return _representation_loss(objectives, mode, net, enc, x0, t, eps, noise).total

    for module in (net, enc):
        module.zero_grad()
    _representation_loss(objectives, mode, net, enc, x0, t, eps, noise).loss.backward()
    assert any(np.any(p.grad != 0.0) for _, p in enc.named_parameters())
    for module in (net, enc):
        for name, p in module.named_parameters():
            assert gradient_relative_error(p.grad, numerical_gradient(value, p)) < 1e-4, name


def test_lrdm_breakdown_arithmetic_and_zero_lambda_oracle(toy_schedule, oracles):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3)
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal((6, 2))
    out = objectives.lrdm_loss(net, enc, x0, 0.25, rng)
    assert out.total == pytest.approx(out.diffusion_term + 0.25 * out.kl_term, rel=1e-12)
    assert out.kl_per_dim == pytest.approx(out.kl_term / 2)

    class ConditionalOracle:
        repr_dim = 2
        num_classes = 0

        def __call__(self, x_t, t, cond=None, **kwargs):
            return Tensor(x0) + cond * 0.0

    zero = objectives.lrdm_loss(ConditionalOracle(), enc, x0, 0.0, rng)
    assert zero.total == 0.0


def test_t_lrdm_with_tied_encoder_equals_lrdm(toy_schedule):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3)
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((5, 2))
    t = rng.integers(1, 4, size=5)
    eps, noise = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    a = objectives.lrdm_loss(net, enc, x0, 0.3, t=t, eps=eps, noise=noise, train_mode=False)
    b = objectives.t_lrdm_loss(net, TiedTimestepEncoder(enc), x0, 0.3, t=t, eps=eps, noise=noise, train_mode=False)
    assert a.total == pytest.approx(b.total, abs=1e-12)


def test_objectives_check_encoder_kind(toy_schedule):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3)
    _, enc_t = _repr_nets(T=3, timestep_conditional=True)
    x0 = np.zeros((2, 2))
    with pytest.raises(ValueError):
        objectives.t_lrdm_loss(net, enc, x0, 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        objectives.lrdm_loss(net, enc_t, x0, 0.1, np.random.default_rng(0))


def test_lvae_is_lrdm_at_final_timestep(toy_schedule):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3)
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((5, 2))
    eps, noise = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    lvae = objectives.lvae_loss(net, enc, x0, 0.5, eps=eps, noise=noise, train_mode=False)
    lrdm = objectives.lrdm_loss(net, enc, x0, 0.5, t=3, eps=eps, noise=noise, train_mode=False)
    assert np.all(lvae.t == 3)
    assert lvae.total == pytest.approx(lrdm.total, abs=1e-15)


def test_lvae_matches_hand_written_vae(toy_schedule):
    objectives = ObjectiveService(toy_schedule)
    net, enc = _repr_nets(T=3, seed=11)
    rng = np.random.default_rng(8)
    x0 = rng.standard_normal((4, 2))
    eps, noise = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    out = objectives.lvae_loss(net, enc, x0, 1.0, eps=eps, noise=noise, train_mode=False)

    with no_grad():
        mu, logvar = enc.encode(x0)
        mu, logvar = mu.values, logvar.values
        r = mu + np.exp(0.5 * logvar) * noise
        x_T = np.sqrt(toy_schedule.alpha_bar[3]) * x0 + np.sqrt(1 - toy_schedule.alpha_bar[3]) * eps
        recon = net(x_T, 3, cond=r).values
    expected = np.mean(np.sum((recon - x0) ** 2, axis=1)) + np.mean(
        0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1 - logvar, axis=1))
    assert out.total == pytest.approx(expected, rel=1e-10)


def test_vlb_terms_oracle_posterior_mean(toy_schedule, oracles):
    x0 = np.random.default_rng(9).standard_normal((3, 2))
    rng = np.random.default_rng(10)
    beta_tilde = build_linear(3, 0.1, 0.3, reverse_variance="beta_tilde")
    terms = ObjectiveService(beta_tilde).vlb_terms(oracles.oracle(beta_tilde, np.repeat(x0, 2, axis=0), "mean"), x0, rng, 2, "mean")
    for t, value in terms.terms[1:]:
        assert value == pytest.approx(0.0, abs=1e-12), t

    s = toy_schedule
    terms = ObjectiveService(s).vlb_terms(oracles.oracle(s, np.repeat(x0, 2, axis=0), "mean"), x0, rng, 2, "mean")
    for t, value in terms.terms[1:]:
        ratio = s.beta_tilde[t] / s.beta[t]
        assert value == pytest.approx(0.5 * (ratio - 1 - np.log(ratio)) * 2, rel=1e-10), t


def test_vlb_prior_term_small_at_default_schedule(default_schedule):
    x0 = np.array([[0.6, -0.8]])
    proc = DiffusionProcess(default_schedule)
    mean, var = proc.q_mean_var(x0, default_schedule.T)
    assert kl_gaussians(mean, var, 0.0, 1.0)[0] / 2 < 1e-3


class LinearMeanPredictor:
    """Reverse mean c_xt(t) * x_t + b_t, so every bound term has a closed form."""

    repr_dim = 0
    num_classes = 0

    def __init__(self, schedule, offsets):
        process = DiffusionProcess(schedule)
        self.coef = np.zeros(schedule.T + 1)
        for t in range(2, schedule.T + 1):
            self.coef[t] = process._posterior_coefs(t, np.zeros(1))[1]
        self.offsets = np.asarray(offsets, dtype=np.float64)

    def __call__(self, x_t, t, cond=None, class_id=None, train_mode=False, rng=None):
        x_t = np.asarray(x_t.values if hasattr(x_t, "values") else x_t, dtype=np.float64)
        return self.coef[t] * x_t + self.offsets[t]


def _linear_bound_terms(s, x0, offsets):
    d = x0.shape[-1]
    terms = [0.5 * d * np.log(2 * np.pi * s.sigma2[1]) + 0.5 * np.sum((x0 - offsets[1]) ** 2) / s.sigma2[1]]
    for t in range(2, s.T + 1):
        c0 = np.sqrt(s.alpha_bar[t - 1]) * s.beta[t] / (1.0 - s.alpha_bar[t])
        ratio = s.beta_tilde[t] / s.sigma2[t]
        terms.append(0.5 * d * (ratio - 1 - np.log(ratio))
                     + 0.5 * np.sum((c0 * x0 - offsets[t]) ** 2) / s.sigma2[t])
    ab = s.alpha_bar[s.T]
    prior = 0.5 * np.sum(ab * x0 ** 2 + (1 - ab) - 1 - np.log(1 - ab))
    return terms, prior


def test_vlb_terms_exact_for_linear_gaussian_reverse(toy_schedule):
    x0 = np.array([[0.4, -0.7]])
    offsets = [0.0, 0.3, -0.2, 0.1]
    net = LinearMeanPredictor(toy_schedule, offsets)
    terms = ObjectiveService(toy_schedule).vlb_terms(net, x0, np.random.default_rng(11), n_mc=3, parameterization="mean")
    expected, prior = _linear_bound_terms(toy_schedule, x0, np.asarray(offsets))
    assert [t for t, _ in terms.terms] == [1, 2, 3]
    for (t, value), want in zip(terms.terms, expected):
        assert value == pytest.approx(want, rel=1e-10), t
    assert terms.prior_term == pytest.approx(prior, rel=1e-10)
    assert terms.total == pytest.approx(sum(expected) + prior, rel=1e-10)


def test_single_sample_estimator_is_unbiased_for_linear_gaussian_reverse(toy_schedule):
    x0 = np.array([[0.4, -0.7]])
    offsets = [0.0, 0.3, -0.2, 0.1]
    net = LinearMeanPredictor(toy_schedule, offsets)
    expected, prior = _linear_bound_terms(toy_schedule, x0, np.asarray(offsets))
    n = 20000
    estimates = ObjectiveService(toy_schedule).vlb_single_sample(
        net, np.repeat(x0, n, axis=0), np.random.default_rng(12), "mean")
    se = estimates.std() / np.sqrt(n)
    assert abs(estimates.mean() - (sum(expected) + prior)) < 4 * se


def test_vlb_terms_match_single_sample_estimator(toy_schedule):
    net = DenoiserNet(1, 3, hidden=[4], embed_dim=4, seed=2)
    objectives = ObjectiveService(toy_schedule)
    x0 = np.array([[0.4]])
    terms = objectives.vlb_terms(net, x0, np.random.default_rng(11), n_mc=4000, parameterization="noise")
    n = 10000
    estimates = objectives.vlb_single_sample(net, np.repeat(x0, n, axis=0), np.random.default_rng(12), "noise")
    se = estimates.std() / np.sqrt(n)
    assert abs(estimates.mean() - terms.total) < 4 * se
    assert len(terms.terms) == 3
