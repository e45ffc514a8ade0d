#!/usr/bin/env python3
"""Tests for ancestral and DDIM sampling."""

import numpy as np
import pytest

from lrdm.lrdm_models import DenoiserNet
from lrdm.lrdm_process import DiffusionProcess
from lrdm.lrdm_samplers import SampleTrace, SamplerConfig, SamplerService, uniform_steps
from lrdm.lrdm_schedule import Schedule, build_linear


def test_uniform_steps():
    assert uniform_steps(100, 4) == [25, 50, 75, 100]
    assert uniform_steps(10, 10) == list(range(1, 11))
    with pytest.raises(ValueError):
        uniform_steps(10, 11)


def test_sampler_config_validation():
    assert SamplerConfig().resolved_steps(3) == [1, 2, 3]
    assert SamplerConfig("ddim", [2, 5]).resolved_steps(5) == [2, 5]
    with pytest.raises(ValueError):
        SamplerConfig("ddim", [3, 2, 5]).resolved_steps(5)
    with pytest.raises(ValueError):
        SamplerConfig("ddim", [1, 3]).resolved_steps(5)
    with pytest.raises(ValueError):
        SamplerConfig("ancestral", [1, 5]).resolved_steps(5)
    with pytest.raises(ValueError):
        SamplerConfig("euler")


def test_trace_rejects_non_decreasing_t():
    trace = SampleTrace()
    trace.add(2, np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        trace.add(2, np.zeros((1, 1)), np.zeros((1, 1)))


def test_ancestral_oracle_step_is_posterior_mean(toy_schedule, oracles):
    sampler = SamplerService(toy_schedule)
    proc = DiffusionProcess(toy_schedule)
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((4, 2))
    x_t = proc.q_sample(x0, 3, rng.standard_normal((4, 2))).x_t
    mean, _ = proc.q_posterior(x_t, x0, 3)
    step = sampler.ancestral_step(oracles.oracle(toy_schedule, x0, "image"), x_t, 3, "image", np.zeros((4, 2)))
    assert np.allclose(step, mean, atol=1e-14)


def test_ancestral_parameterizations_agree(toy_schedule, oracles):
    sampler = SamplerService(toy_schedule)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((3, 2))
    x_t = rng.standard_normal((3, 2))
    z = rng.standard_normal((3, 2))
    steps = [sampler.ancestral_step(oracles.oracle(toy_schedule, x0, p), x_t, 2, p, z)
             for p in ("image", "noise", "mean")]
    assert np.allclose(steps[0], steps[1], atol=1e-12)
    assert np.allclose(steps[0], steps[2], atol=1e-12)


def test_ancestral_step_variance_is_sigma2(toy_schedule, oracles):
    sampler = SamplerService(toy_schedule)
    n = 100000
    x_t = np.zeros((n, 1))
    z = np.random.default_rng(2).standard_normal((n, 1))
    out = sampler.ancestral_step(oracles.zero(), x_t, 2, "image", z)
    beta = toy_schedule.beta[2]
    assert abs(out.var() - beta) < 4 * beta * np.sqrt(2.0 / n)
    assert np.array_equal(sampler.ancestral_step(oracles.zero(), x_t[:5], 1, "image", z[:5]), np.zeros((5, 1)))


def test_ddim_oracle_preserves_decomposition(toy_schedule, oracles):
    sampler = SamplerService(toy_schedule)
    proc = DiffusionProcess(toy_schedule)
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4, 2))
    eps = rng.standard_normal((4, 2))
    x_t = proc.q_sample(x0, 3, eps).x_t
    net = oracles.oracle(toy_schedule, x0, "noise")
    for t_prev in (0, 1, 2):
        out = sampler.ddim_step(net, x_t, 3, t_prev, "noise")
        expected = x0 if t_prev == 0 else proc.q_sample(x0, t_prev, eps).x_t
        assert np.allclose(out, expected, atol=1e-12)
    assert np.allclose(sampler.ddim_step(net, x_t, 3, 3, "noise"), x_t, atol=1e-12)
    assert np.array_equal(sampler.ddim_step(net, x_t, 3, 1, "noise"), sampler.ddim_step(net, x_t, 3, 1, "noise"))
    with pytest.raises(ValueError):
        sampler.ddim_step(net, x_t, 2, 3, "noise")


def test_ddim_inversion_round_trip_with_oracle(default_schedule, oracles):
    sampler = SamplerService(default_schedule)
    x0 = np.random.default_rng(4).standard_normal((6, 2))
    net = oracles.oracle(default_schedule, x0, "image")
    steps = uniform_steps(100, 20)
    x_T = sampler.ddim_invert(net, x0, steps, "image")
    assert np.array_equal(x_T, sampler.ddim_invert(net, x0, steps, "image"))
    trace = sampler.sample_loop(net, SamplerConfig("ddim", steps), 6, 2, "image", x_T=x_T)
    assert np.max(np.abs(trace.final - x0)) < 1e-8


def test_single_step_schedule_returns_prediction(oracles):
    s = Schedule.from_betas([0.5])
    sampler = SamplerService(s)
    x0 = np.array([[0.25, -0.5]])
    trace = sampler.sample_loop(oracles.oracle(s, x0, "image"), SamplerConfig(), 1, 2, "image",
                                rng=np.random.default_rng(0))
    assert np.allclose(trace.final, x0)


def test_trace_records_every_step(toy_schedule, oracles):
    sampler = SamplerService(toy_schedule)
    x0 = np.zeros((2, 2))
    trace = sampler.sample_loop(oracles.oracle(toy_schedule, x0, "image"), SamplerConfig(), 2, 2, "image",
                                record=True, rng=np.random.default_rng(0))
    assert len(trace) == 3
    rows = trace.to_rows()
    assert len(rows) == 6
    assert [row[2] for row in rows[::2]] == [2, 1, 0]
    assert SampleTrace.header(2) == ["step_index", "chain", "t", "x_t_0", "x_t_1", "x0_hat_0", "x0_hat_1"]


def test_fixed_representation_is_held(toy_schedule):
    sampler = SamplerService(toy_schedule)
    net = DenoiserNet(2, 3, hidden=[4], embed_dim=4, repr_dim=2)
    cond = np.array([0.5, -0.5])
    trace = sampler.sample_loop(net, SamplerConfig(), 3, 2, "image", cond=cond, rng=np.random.default_rng(0))
    assert trace.final.shape == (3, 2)
    with pytest.raises(ValueError):
        sampler.sample_loop(net, SamplerConfig(), 3, 2, "image", cond=np.zeros(3))
    with pytest.raises(ValueError):
        sampler.sample_loop(net, SamplerConfig(), 3, 2, "image", cond=cond, cond_fn=lambda t: cond)


def test_sharded_sampling_independent_of_jobs():
    s = build_linear(10)
    sampler = SamplerService(s)
    net = DenoiserNet(2, 10, hidden=[8], embed_dim=4, repr_dim=2, seed=1)
    cfg = SamplerConfig("ddim", [5, 10], seed=7)
    serial = sampler.sample_sharded(net, cfg, 50, 2, "image", prior="once", jobs=1, shard_size=16)
    threaded = sampler.sample_sharded(net, cfg, 50, 2, "image", prior="once", jobs=4, shard_size=16)
    assert serial.shape == (50, 2)
    assert np.array_equal(serial, threaded)
    per_step = sampler.sample_sharded(net, cfg, 20, 2, "image", prior="per_step", jobs=2, shard_size=8)
    assert per_step.shape == (20, 2)
    with pytest.raises(ValueError):
        sampler.sample_sharded(net, cfg, 5, 2, "image", prior="always")
