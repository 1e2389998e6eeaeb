import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esdd import tensor as tn
from esdd.dsu import DsuConfig, dsu_perturb, dsu_perturb_detailed, instance_stats

ALWAYS = DsuConfig(p=1.0)


def two_pass_stats(x, eps):
    B, T, C = x.shape
    mu = np.zeros((B, C))
    sd = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            col = [x[b, t, c] for t in range(T)]
            m = sum(col) / T
            mu[b, c] = m
            sd[b, c] = math.sqrt(sum((v - m) ** 2 for v in col) / T + eps)
    return mu, sd


class TestInstanceStats:
    def test_constant_channel(self):
        mu, sd = instance_stats(np.full((1, 6, 2), 3.0), 1e-6)
        np.testing.assert_allclose(mu.data, 3.0)
        np.testing.assert_allclose(sd.data, 1e-3)

    def test_two_point(self):
        x = np.array([[[0.0], [1.0]]])
        mu, sd = instance_stats(x, 1e-6)
        np.testing.assert_allclose(mu.data, [[0.5]])
        np.testing.assert_allclose(sd.data, [[math.sqrt(0.25 + 1e-6)]])

    def test_matches_two_pass_oracle(self):
        x = np.random.default_rng(0).normal(size=(4, 7, 5))
        mu, sd = instance_stats(x, 1e-6)
        ref_mu, ref_sd = two_pass_stats(x, 1e-6)
        np.testing.assert_allclose(mu.data, ref_mu, atol=1e-6)
        np.testing.assert_allclose(sd.data, ref_sd, atol=1e-6)


class TestIdentityCases:
    x = np.random.default_rng(1).normal(size=(4, 9, 3)) * 2 + 1

    def test_p_zero_returns_input(self):
        out = dsu_perturb(self.x, DsuConfig(p=0.0), np.random.default_rng(0))
        assert out.data.tobytes() == self.x.tobytes()

    def test_eval_mode(self):
        out = dsu_perturb(self.x, ALWAYS, np.random.default_rng(0), mode="eval")
        assert out.data.tobytes() == self.x.tobytes()

    def test_single_instance(self):
        out = dsu_perturb(self.x[:1], ALWAYS, np.random.default_rng(0))
        np.testing.assert_allclose(out.data, self.x[:1], atol=1e-5)

    def test_zero_noise(self):
        zeros = np.zeros((4, 3))
        res = dsu_perturb_detailed(self.x, ALWAYS, np.random.default_rng(0), noise=(zeros, zeros))
        assert res.applied
        np.testing.assert_allclose(res.output.data, self.x, atol=1e-5)

    def test_identical_statistics_batch(self):
        base = np.random.default_rng(2).normal(size=(1, 9, 3))
        # Time-permuted copies share mean and std exactly.
        x = np.concatenate([base, base[:, ::-1], base[:, [4, 0, 8, 1, 7, 2, 6, 3, 5]], base], axis=0)
        res = dsu_perturb_detailed(x, ALWAYS, np.random.default_rng(0))
        assert res.applied
        np.testing.assert_allclose(res.stats.Sigma_mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(res.output.data, x, atol=1e-5)


def test_gate_probability():
    x = np.random.default_rng(3).normal(size=(3, 5, 2))
    rng = np.random.default_rng(4)
    applied = [dsu_perturb_detailed(x, DsuConfig(p=0.3), rng).applied for _ in range(4000)]
    assert abs(np.mean(applied) - 0.3) < 0.03


def test_output_stats_match_sampled_targets():
    x = np.random.default_rng(5).normal(size=(8, 50, 16)) * np.random.default_rng(6).uniform(0.5, 2, size=(8, 1, 16))
    res = dsu_perturb_detailed(x, ALWAYS, np.random.default_rng(7))
    mu, sd = instance_stats(res.output, 1e-6)
    np.testing.assert_allclose(mu.data, res.mu_tilde, atol=1e-4)
    np.testing.assert_allclose(sd.data, np.abs(res.sigma_tilde), atol=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_normalised_content_preserved(B, T, C, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, T, C)) * rng.uniform(0.5, 2, size=(B, 1, C))
    res = dsu_perturb_detailed(x, ALWAYS, rng)
    out = res.output.data
    # Plain population statistics: the eps floor would otherwise dominate
    # whenever a sampled sigma lands near zero.
    before = (x - x.mean(axis=1, keepdims=True)) / x.std(axis=1, keepdims=True)
    after = (out - out.mean(axis=1, keepdims=True)) / out.std(axis=1, keepdims=True)
    # A negative sampled sigma flips the channel sign.
    sign = np.sign(res.sigma_tilde)[:, None]
    np.testing.assert_allclose(after * sign, before, atol=1e-4)


def test_expectation_preserved():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 2)) * 1.5 + 0.5
    n = 3000
    outs = np.stack([dsu_perturb(x, ALWAYS, rng).data for _ in range(n)])
    se = outs.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(outs.mean(axis=0) - x) <= 3 * se)


def test_gradient_through_input():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4, 2))
    noise = (rng.normal(size=(3, 2)), rng.normal(size=(3, 2)))
    probe = rng.uniform(0.5, 1.5, size=x.shape)

    def f(t):
        out = dsu_perturb(t[0], ALWAYS, None, noise=noise)
        return tn.sum(tn.mul(out, probe))

    # Sigma_* are constants in the tape, so freeze them for the numeric side too.
    res = dsu_perturb_detailed(x, ALWAYS, None, noise=noise)
    frozen = (noise[0] * res.stats.Sigma_mu, noise[1] * res.stats.Sigma_sigma)

    def f_frozen(t):
        mu, sd = instance_stats(t[0], 1e-6)
        T = x.shape[1]
        normed = tn.div(tn.sub(t[0], tn.expand(mu, 1, T)), tn.expand(sd, 1, T))
        out = tn.add(tn.mul(normed, tn.expand(tn.add(sd, frozen[1]), 1, T)), tn.expand(tn.add(mu, frozen[0]), 1, T))
        return tn.sum(tn.mul(out, probe))

    leaf = tn.Tensor(x, requires_grad=True)
    g_tape = tn.backward(f([leaf]))[leaf]
    leaf2 = tn.Tensor(x, requires_grad=True)
    g_ref = tn.backward(f_frozen([leaf2]))[leaf2]
    np.testing.assert_allclose(g_tape, g_ref, rtol=1e-12, atol=1e-12)
    assert tn.grad_check(f_frozen, [x]).max_rel_error < 1e-5


def test_rejects_bad_probability():
    with pytest.raises(ValueError):
        DsuConfig(p=1.5)
