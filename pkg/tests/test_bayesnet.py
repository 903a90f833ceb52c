from dataclasses import replace

import numpy as np
import pytest

from ukt import diffengine as de
from ukt.bayesnet import (
    FrozenNoise,
    GaussianNoise,
    IterateState,
    NetConfig,
    VariationalConv,
    bayes_conv,
    data_gradient,
    init_network,
    sample_block,
    snapshot_posterior,
    softplus_inv,
    unrolled_forward,
    variance_from_head,
    with_collapsed_posterior,
    with_head_scale,
)
from ukt.diffengine import Tensor
from ukt.losses import encoder_kl

CFG = NetConfig(c1=4, c2=8, groups=2, K=3, grad_scale=1e-2)


@pytest.fixture
def params():
    return init_network(CFG, np.random.default_rng(0))


@pytest.fixture
def problem(small_fan):
    rng = np.random.default_rng(5)
    x_true = rng.random((2, 16, 16))
    y = small_fan.forward(x_true) + rng.normal(0, 0.1, (2, 12, 32))
    return y, rng.random((2, 16, 16))


class TestInit:
    def test_deterministic(self):
        a = init_network(CFG, np.random.default_rng(3))
        b = init_network(CFG, np.random.default_rng(3))
        for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def test_initial_sigma(self, params):
        for layer in params.encoder:
            for _, rho in layer.pairs():
                sigma = np.logaddexp(0.0, rho.data.astype(np.float64))
                assert np.abs(sigma - 1e-3).max() < 1e-9

    def test_he_variance(self):
        big = init_network(NetConfig(c1=32, c2=64, groups=4), np.random.default_rng(1))
        w = big.encoder[3].w_mean.data
        assert abs(w.var() / (2 / (64 * 9)) - 1) < 0.05

    def test_softplus_inverse(self):
        for s in (1e-12, 1e-3, 0.5, 3.0):
            assert np.logaddexp(0, softplus_inv(s)) == pytest.approx(s, rel=1e-9)

    @pytest.mark.parametrize("kwargs", [{"c1": 0}, {"groups": 3}, {"K": 0}, {"c2": 6, "groups": 4}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            NetConfig(**kwargs)

    def test_parameter_count_independent_of_k(self):
        counts = {init_network(NetConfig(c1=4, c2=8, groups=2, K=k), np.random.default_rng(0)).parameter_count()
                  for k in (1, 3, 5)}
        assert len(counts) == 1

    def test_mismatched_pair(self):
        with pytest.raises(ValueError):
            VariationalConv(Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros((2, 2, 3, 3))),
                            Tensor(np.zeros(2)), Tensor(np.zeros(2)))


class TestBlock:
    def test_zero_heads_project_input(self, params, small_fan, problem):
        y, x0 = problem
        x0 = x0 - 0.5  # some negative pixels
        zero = with_head_scale(params, 0.0)
        out, traj = unrolled_forward(zero, y, small_fan, x0, mode="sample",
                                     noise=GaussianNoise(np.random.default_rng(0)), steps=1)
        np.testing.assert_array_equal(out.mu.data[:, 0], np.maximum(x0, 0).astype(np.float32))

    def test_mean_mode_deterministic(self, params, small_fan, problem):
        y, x0 = problem
        a, _ = unrolled_forward(params, y, small_fan, x0, mode="mean")
        b, _ = unrolled_forward(params, y, small_fan, x0, mode="mean")
        assert a.mu.data.tobytes() == b.mu.data.tobytes()
        assert a.sigma_raw.data.tobytes() == b.sigma_raw.data.tobytes()

    def test_sample_mode_varies(self, params, small_fan, problem):
        y, x0 = problem
        noise = GaussianNoise(np.random.default_rng(0))
        a, _ = unrolled_forward(params, y, small_fan, x0, mode="sample", noise=noise)
        b, _ = unrolled_forward(params, y, small_fan, x0, mode="sample", noise=noise)
        assert not np.array_equal(a.mu.data, b.mu.data)

    def test_zero_sigma_equals_mean(self, params, small_fan, problem):
        y, x0 = problem
        collapsed = with_collapsed_posterior(params, 0.0)
        s, _ = unrolled_forward(collapsed, y, small_fan, x0, mode="sample",
                                noise=GaussianNoise(np.random.default_rng(0)))
        m, _ = unrolled_forward(collapsed, y, small_fan, x0, mode="mean")
        np.testing.assert_array_equal(s.mu.data, m.mu.data)

    def test_tiny_sigma_close_to_mean(self, small_fan, problem):
        # without the sqrt stabiliser the sampler collapses onto the mean
        y, x0 = problem
        net = init_network(replace(CFG, act_var_eps=0.0), np.random.default_rng(0))
        collapsed = with_collapsed_posterior(net, 1e-12)
        s, _ = unrolled_forward(collapsed, y, small_fan, x0, mode="sample",
                                noise=GaussianNoise(np.random.default_rng(0)))
        m, _ = unrolled_forward(collapsed, y, small_fan, x0, mode="mean")
        assert np.abs(s.mu.data - m.mu.data).max() < 1e-4

    def test_tiny_sigma_default_eps_floor(self, params, small_fan, problem):
        # the 1e-8 stabiliser leaves activation noise of std 1e-4; the spread
        # of the final means stays far below 1e-4 in variance
        y, x0 = problem
        collapsed = with_collapsed_posterior(params, 1e-12)
        noise = GaussianNoise(np.random.default_rng(0))
        mus = np.stack([unrolled_forward(collapsed, y, small_fan, x0, mode="sample", noise=noise)[0].mu.data
                        for _ in range(10)])
        assert mus.var(axis=0).max() < 1e-4

    def test_k1_is_single_block(self, params, small_fan, problem):
        y, x0 = problem
        op32 = small_fan.astype(np.float32)
        out, _ = unrolled_forward(params, y, small_fan, x0, mode="mean", steps=1)
        x = Tensor(x0.astype(np.float32)[:, None])
        grad_d = Tensor(op32.adjoint(op32.forward(x.data)) - op32.adjoint(y.astype(np.float32)[:, None]))
        ref = sample_block(params, IterateState(x, Tensor(np.zeros_like(x.data)), grad_d), "mean")
        np.testing.assert_array_equal(out.mu.data, ref.mu.data)
        np.testing.assert_array_equal(out.sigma_raw.data, ref.sigma_raw.data)

    def test_consistent_data_gives_zero_gradient(self, params, small_fan, problem):
        _, x0 = problem
        op32 = small_fan.astype(np.float32)
        y = op32.forward(x0.astype(np.float32))
        grad_d = data_gradient(Tensor(x0.astype(np.float32)[:, None]), y[:, None], op32)
        assert not grad_d.data.any()
        zero = with_head_scale(params, 0.0)
        out, _ = unrolled_forward(zero, y, small_fan, x0, mode="mean")
        np.testing.assert_array_equal(out.mu.data[:, 0], np.maximum(x0, 0).astype(np.float32))

    def test_trajectory(self, params, small_fan, problem):
        y, x0 = problem
        out, traj = unrolled_forward(params, y, small_fan, x0 - 0.3, mode="sample",
                                     noise=GaussianNoise(np.random.default_rng(1)))
        assert len(traj) == CFG.K
        assert all((s.x.data >= 0).all() for s in traj)
        assert traj[-1].x is out.mu

    def test_batch_equals_singletons(self, params, small_fan, problem):
        y, x0 = problem
        noise = FrozenNoise(11)
        both, _ = unrolled_forward(params, y, small_fan, x0, mode="sample", noise=noise)
        for i in range(2):
            noise.reset()
            one, _ = unrolled_forward(params, y[i], small_fan, x0[i], mode="sample", noise=noise)
            np.testing.assert_allclose(one.mu.data[0], both.mu.data[i], rtol=1e-5, atol=1e-6)
            noise.reset()

    def test_shape_errors(self, params, small_fan, problem):
        y, x0 = problem
        with pytest.raises(ValueError):
            unrolled_forward(params, y, small_fan, x0[:, :15], mode="mean")
        with pytest.raises(ValueError):
            unrolled_forward(params, y[:, :5], small_fan, x0, mode="mean")
        with pytest.raises(ValueError):
            unrolled_forward(params, y[:1], small_fan, x0, mode="mean")
        with pytest.raises(ValueError):
            unrolled_forward(params, y, small_fan, x0, mode="sample")


class TestLocalReparametrisation:
    def test_activation_moments(self):
        rng = np.random.default_rng(2)
        ci, co, n = 2, 2, 100_000
        w_mean, b_mean = rng.normal(0, 0.5, (co, ci, 3, 3)), rng.normal(0, 0.1, co)
        w_sig, b_sig = rng.uniform(0.1, 0.4, (co, ci, 3, 3)), rng.uniform(0.05, 0.2, co)
        inv = np.vectorize(softplus_inv)
        layer = VariationalConv(Tensor(w_mean), Tensor(inv(w_sig)), Tensor(b_mean), Tensor(inv(b_sig)))
        h = rng.standard_normal((1, ci, 4, 4))
        # closed-form moments by explicit loops over the padded input
        hp = np.pad(h[0], ((0, 0), (1, 1), (1, 1)))
        m_ref = np.zeros((co, 4, 4))
        v_ref = np.zeros((co, 4, 4))
        for o in range(co):
            for i in range(4):
                for j in range(4):
                    patch = hp[:, i:i + 3, j:j + 3]
                    m_ref[o, i, j] = np.sum(patch * w_mean[o]) + b_mean[o]
                    v_ref[o, i, j] = np.sum(patch**2 * w_sig[o] ** 2) + b_sig[o] ** 2
        v_ref += 1e-8
        draws = bayes_conv(layer, Tensor(np.repeat(h, n, axis=0)), "sample",
                           GaussianNoise(np.random.default_rng(3))).data
        se_mean = np.sqrt(v_ref / n)
        se_var = v_ref * np.sqrt(2.0 / (n - 1))
        assert (np.abs(draws.mean(0) - m_ref) < 3 * se_mean).all()
        assert (np.abs(draws.var(0, ddof=1) - v_ref) < 3 * se_var).all()


class TestVarianceHead:
    def test_zero(self):
        np.testing.assert_allclose(variance_from_head(np.zeros(3)), np.log(2) + 1e-6)

    def test_floor(self):
        v = variance_from_head(np.array([-40.0]))
        assert v[0] > 0 and abs(v[0] - 1e-6) < 1e-15

    def test_monotone(self):
        v = variance_from_head(np.linspace(-50, 50, 2001))
        assert (np.diff(v) >= 0).all() and (v > 0).all()

    def test_tensor_matches_array(self):
        s = np.linspace(-5, 5, 11)
        np.testing.assert_allclose(variance_from_head(Tensor(s)).data, variance_from_head(s))


class TestSnapshot:
    def test_isolated_from_training(self, params):
        snap = snapshot_posterior(params)
        before = [m.copy() for m in snap.means]
        params.encoder[0].w_mean.data += 1.0
        assert all(np.array_equal(a, b) for a, b in zip(before, snap.means))
        assert not np.array_equal(params.encoder[0].w_mean.data, snap.means[0])

    def test_immutable(self, params):
        snap = snapshot_posterior(params)
        with pytest.raises(ValueError):
            snap.means[0][0] = 1.0

    def test_kl_to_snapshot_is_zero(self, params):
        assert float(encoder_kl(params, snapshot_posterior(params)).data) == 0.0

    def test_copy_is_deep(self, params):
        clone = params.copy()
        clone.up.w.data += 1
        assert not np.array_equal(clone.up.w.data, params.up.w.data)


class TestGradients:
    def test_block_gradient_matches_fd(self, small_fan, problem):
        y, x0 = problem
        params = init_network(NetConfig(c1=2, c2=4, groups=2, K=2, grad_scale=1e-2),
                              np.random.default_rng(0), dtype=np.float64)
        noise = FrozenNoise(4)
        r = np.random.default_rng(9).standard_normal((2, 1, 16, 16))

        def loss(*_):
            noise.reset()
            # offset keeps every iterate clear of the positivity kink
            out, _ = unrolled_forward(params, y, small_fan, x0 + 1.0, mode="sample", noise=noise)
            return de.sum(de.add(de.mul(out.mu, r), de.square(out.sigma_raw)))

        for probe in (params.encoder[0].w_mean, params.encoder[3].w_rho, params.up.w, params.heads["sigma"][2].w):
            assert de.compare(loss, [probe]) < 1e-4
