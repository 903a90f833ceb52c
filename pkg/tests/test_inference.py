import numpy as np
import pytest
from skimage.metrics import structural_similarity

from ukt.bayesnet import NetConfig, init_network, unrolled_forward, with_collapsed_posterior
from ukt.inference import decompose, normalize_minmax, psnr, reconstruct, ssim
from ukt.selftest import collapsed_epistemic_max, stub_moment_errors
from ukt.training import Checkpoint, GeometryMismatch

NET = NetConfig(c1=4, c2=8, groups=2, K=2, grad_scale=1e-2)


@pytest.fixture(scope="module")
def params():
    return init_network(NET, np.random.default_rng(0))


@pytest.fixture
def sino(small_fan):
    x = np.random.default_rng(2).random((16, 16))
    return small_fan.forward(x)


class TestDecompose:
    def test_identity_exact(self, params, small_fan, sino):
        res = reconstruct(params, sino, small_fan, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(res.total, res.aleatoric + res.epistemic)
        assert (res.epistemic >= 0).all() and (res.aleatoric > 0).all()
        assert res.samples_used == 5 and res.per_sample_means is None

    def test_single_sample(self, params, small_fan, sino):
        res = reconstruct(params, sino, small_fan, 1, np.random.default_rng(0))
        assert not res.epistemic.any()

    def test_collapsed_posterior(self, params, small_fan, sino):
        collapsed = with_collapsed_posterior(params, 0.0)
        res = reconstruct(collapsed, sino, small_fan, 6, np.random.default_rng(0), keep_samples=True)
        x0 = res.per_sample_means  # all draws coincide
        assert (x0 == x0[0]).all()
        assert np.abs(res.epistemic).max() < 1e-20
        from ukt.training import initial_estimate

        out, _ = unrolled_forward(collapsed, sino, small_fan, initial_estimate(small_fan, sino), mode="mean")
        np.testing.assert_allclose(res.mean, out.mu.data[0, 0], rtol=1e-6, atol=1e-7)

    def test_scales_at_1e12_single_precision(self):
        epi, exact = collapsed_epistemic_max()
        assert exact and epi < 1e-4

    def test_stub_moments(self):
        z = stub_moment_errors()
        assert z["aleatoric"] < 3 and z["epistemic"] < 3

    def test_two_draws_by_hand(self):
        res = decompose(np.array([[1.0, 2.0], [3.0, 2.0]]), np.array([[0.5, 1.0], [1.5, 1.0]]))
        np.testing.assert_array_equal(res.mean, [2.0, 2.0])
        np.testing.assert_array_equal(res.epistemic, [1.0, 0.0])
        np.testing.assert_array_equal(res.aleatoric, [1.0, 1.0])

    def test_deterministic(self, params, small_fan, sino):
        a = reconstruct(params, sino, small_fan, 4, np.random.default_rng(9))
        b = reconstruct(params, sino, small_fan, 4, np.random.default_rng(9))
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.total, b.total)

    def test_invalid_T(self, params, small_fan, sino):
        with pytest.raises(ValueError):
            reconstruct(params, sino, small_fan, 0)

    def test_geometry_mismatch(self, params, small_fan, small_parallel, sino):
        ck = Checkpoint(params, small_fan.hash)
        with pytest.raises(GeometryMismatch) as info:
            reconstruct(ck, small_parallel.forward(np.ones((16, 16))), small_parallel, 2)
        assert f"{small_fan.hash:#x}" in str(info.value) and f"{small_parallel.hash:#x}" in str(info.value)

    def test_normalize(self):
        np.testing.assert_array_equal(normalize_minmax(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
        assert not normalize_minmax(np.full(3, 7.0)).any()


class TestPSNR:
    def test_identical_capped(self, rng):
        x = rng.random((8, 8))
        assert psnr(x, x, 1.0) == 99.0

    def test_hand_value(self):
        ref = np.zeros((10, 10))
        assert psnr(ref + 0.1, ref, 1.0) == pytest.approx(20.0, abs=1e-12)

    def test_shift_invariant(self, rng):
        x, r = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(x + 3.5, r + 3.5, 1.0) == pytest.approx(psnr(x, r, 1.0), abs=1e-9)

    def test_decreases_with_noise(self, rng):
        ref = rng.random((32, 32))
        z = rng.standard_normal((32, 32))
        vals = [psnr(ref + a * z, ref, 1.0) for a in (0.01, 0.02, 0.05, 0.1, 0.5)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


class TestSSIM:
    def test_identical(self, rng):
        x = rng.random((16, 16))
        assert ssim(x, x, 1.0) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("shape", [(11, 11), (32, 32), (20, 37)])
    def test_matches_reference_implementation(self, rng, shape):
        a = rng.random(shape)
        b = a + 0.2 * rng.standard_normal(shape)
        ref = structural_similarity(b, a, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert ssim(b, a, 1.0) == pytest.approx(ref, abs=1e-12)

    def test_heavy_noise(self):
        from ukt.operators import ImageGrid
        from ukt.phantoms import sample_ellipse_phantom

        rng = np.random.default_rng(0)
        ref = sample_ellipse_phantom(rng, ImageGrid(64, 64))
        dr = ref.max() - ref.min()
        # measured 0.038 at this seed
        assert ssim(ref + rng.uniform(-dr, dr, ref.shape), ref, dr) < 0.5

    def test_symmetric(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert abs(ssim(a, b, 1.0) - ssim(b, a, 1.0)) <= 1e-12

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 12)), np.zeros((10, 12)), 1.0)
