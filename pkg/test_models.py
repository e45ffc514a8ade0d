#!/usr/bin/env python3
"""Tests for the denoiser, encoder and first-stage networks."""

import numpy as np
import pytest

from lrdm.lrdm_autodiff import Tensor, gradient_relative_error, no_grad, numerical_gradient
from lrdm.lrdm_models import (DenoiserNet, FirstStage, ReprEncoder, dropout, one_hot, reparameterize,
                              timestep_embedding)


def test_timestep_embedding_properties():
    emb0 = timestep_embedding(0, 32, 1000)
    assert np.all(emb0[:16] == 0.0)
    assert np.all(emb0[16:] == 1.0)
    emb = timestep_embedding(np.arange(1, 1001), 32, 1000)
    assert emb.shape == (1000, 32)
    assert np.all(np.abs(emb) <= 1.0)
    sq = np.sum(emb ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 0.0


def test_timestep_embedding_rejects_bad_arguments():
    with pytest.raises(ValueError):
        timestep_embedding(1, 7, 10)
    with pytest.raises(ValueError):
        timestep_embedding(11, 8, 10)


def test_one_hot_range_check():
    assert np.array_equal(one_hot([0, 2], 3), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        one_hot([3], 3)


def test_zero_output_denoiser():
    net = DenoiserNet(2, 10, hidden=[8], embed_dim=4, zero_output=True)
    out = net(np.random.default_rng(0).standard_normal((5, 2)), 3)
    assert np.array_equal(out.values, np.zeros((5, 2)))


def test_denoiser_is_deterministic_outside_train_mode():
    net = DenoiserNet(2, 10, hidden=[8, 8], embed_dim=4, dropout=0.5)
    x = np.ones((3, 2))
    assert np.array_equal(net(x, 4).values, net(x, 4).values)
    trained = net(x, 4, train_mode=True, rng=np.random.default_rng(0)).values
    assert not np.array_equal(trained, net(x, 4).values)


def test_denoiser_conditioning_contract():
    net = DenoiserNet(2, 10, hidden=[8], embed_dim=4, repr_dim=3, num_classes=2)
    x = np.zeros((4, 2))
    out = net(x, np.array([1, 2, 3, 4]), cond=np.zeros((4, 3)), class_id=1)
    assert out.shape == (4, 2)
    with pytest.raises(ValueError):
        net(x, 1, class_id=0)
    with pytest.raises(ValueError):
        net(x, 1, cond=np.zeros((4, 3)))
    with pytest.raises(ValueError):
        net(x, 1, cond=np.zeros((4, 2)), class_id=0)
    with pytest.raises(ValueError):
        net(np.zeros((4, 3)), 1, cond=np.zeros((4, 3)), class_id=0)
    with pytest.raises(ValueError):
        DenoiserNet(2, 10, dropout=1.0)


def test_denoiser_gradients_match_finite_differences():
    net = DenoiserNet(2, 10, hidden=[4], embed_dim=4, repr_dim=2, num_classes=2, seed=3)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2))
    r = rng.standard_normal((3, 2))

    def value():
        with no_grad():
            return net(x, np.array([1, 5, 9]), cond=r, class_id=np.array([0, 1, 1])).mean().item()

    net.zero_grad()
    net(x, np.array([1, 5, 9]), cond=r, class_id=np.array([0, 1, 1])).mean().backward()
    for name, p in net.named_parameters():
        assert gradient_relative_error(p.grad, numerical_gradient(value, p)) < 1e-4, name


def test_encoder_deterministic_and_gradients():
    enc = ReprEncoder(2, repr_dim=3, hidden=[6, 5], T=10, embed_dim=4, timestep_conditional=True, seed=2)
    z = np.random.default_rng(2).standard_normal((4, 2))
    mu1, lv1 = enc.encode(z, 3)
    mu2, lv2 = enc.encode(z, 3)
    assert np.array_equal(mu1.values, mu2.values) and np.array_equal(lv1.values, lv2.values)
    assert not np.allclose(enc.encode(z, 1)[0].values, enc.encode(z, 9)[0].values)

    def value():
        with no_grad():
            mu, lv = enc.encode(z, 3)
            return (mu.square().sum() + lv.exp().sum()).item()

    enc.zero_grad()
    mu, lv = enc.encode(z, 3)
    (mu.square().sum() + lv.exp().sum()).backward()
    for name, p in enc.named_parameters():
        assert gradient_relative_error(p.grad, numerical_gradient(value, p)) < 1e-4, name


def test_encoder_conditioning_contract():
    enc = ReprEncoder(2, repr_dim=2, hidden=[4, 4], T=10, embed_dim=4)
    with pytest.raises(ValueError):
        enc.encode(np.zeros((1, 2)), 3)
    t_enc = ReprEncoder(2, repr_dim=2, hidden=[4, 4], T=10, embed_dim=4, timestep_conditional=True)
    with pytest.raises(ValueError):
        t_enc.encode(np.zeros((1, 2)))
    c_enc = ReprEncoder(2, repr_dim=2, hidden=[4, 4], T=10, embed_dim=4, num_classes=3)
    assert c_enc.class_conditional
    assert c_enc.posterior_mode(np.zeros((2, 2)), None, [0, 2]).shape == (2, 2)
    with pytest.raises(ValueError):
        c_enc.encode(np.zeros((1, 2)))


def test_zero_head_encoder_gives_standard_normal_posterior():
    enc = ReprEncoder(2, repr_dim=3, hidden=[4, 4], T=10, zero_heads=True)
    mu, lv = enc.encode(np.ones((2, 2)))
    assert np.array_equal(mu.values, np.zeros((2, 3)))
    assert np.array_equal(lv.values, np.zeros((2, 3)))


def test_reparameterize():
    mu = Tensor(np.array([[0.5, -1.0]]))
    lv = Tensor(np.zeros((1, 2)))
    assert np.array_equal(reparameterize(mu, lv, np.zeros((1, 2))).values, mu.values)
    noise = np.array([[0.3, 0.4]])
    assert np.allclose(reparameterize(mu, lv, noise).values, mu.values + noise)

    n = 100000
    logvar = np.log(0.25)
    draws = reparameterize(Tensor(np.zeros((n, 1))), Tensor(np.full((n, 1), logvar)),
                           np.random.default_rng(0).standard_normal((n, 1))).values
    assert abs(draws.var() - 0.25) < 4 * 0.25 * np.sqrt(2.0 / n)
    with pytest.raises(ValueError):
        reparameterize(mu, lv, np.zeros(3))


def test_dropout_scaling():
    x = Tensor(np.ones((1000, 10)))
    assert dropout(x, 0.5, None, False) is x
    out = dropout(x, 0.5, np.random.default_rng(0), True).values
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        dropout(x, 0.5, None, True)


def test_passthrough_first_stage_is_identity():
    fs = FirstStage(2, 2, passthrough=True)
    x = np.random.default_rng(0).standard_normal((5, 2))
    assert np.array_equal(fs.encode(x), x)
    assert np.array_equal(fs.decode(x), x)
    assert fs.named_parameters() == []
    with pytest.raises(ValueError):
        FirstStage(2, 3, passthrough=True)


def test_first_stage_scale_applies_both_ways():
    fs = FirstStage(2, 3, hidden=[4])
    x = np.random.default_rng(1).standard_normal((4, 2))
    raw = fs.encode(x, rescale=False)
    fs.scale = 2.0
    assert np.allclose(fs.encode(x), raw / 2.0)
    assert np.allclose(fs.decode(fs.encode(x)), fs.decode_tensor(raw).values)


def test_state_dict_round_trip_and_copy():
    net = DenoiserNet(2, 10, hidden=[4], embed_dim=4, seed=0)
    other = DenoiserNet(2, 10, hidden=[4], embed_dim=4, seed=1)
    other.load_state_dict(net.state_dict())
    x = np.ones((2, 2))
    assert np.array_equal(net(x, 2).values, other(x, 2).values)
    snapshot = net.copy()
    net.named_parameters()[0][1].values[...] = 0.0
    assert not np.array_equal(snapshot.state_dict()["mlp.layers.0.weight"], net.state_dict()["mlp.layers.0.weight"])
    with pytest.raises(ValueError):
        other.load_state_dict({})
