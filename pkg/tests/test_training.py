import numpy as np
import pytest

from ukt.bayesnet import NetConfig, init_network
from ukt.formats import ChecksumError, FormatError, VersionError
from ukt.losses import HyperParams
from ukt.phantoms import NoiseModel, generate_dataset, read_dataset
from ukt.training import (
    CHECKPOINT_VERSION,
    Checkpoint,
    GeometryMismatch,
    OptimState,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    cosine_lr,
    encode_checkpoint,
    load_checkpoint,
    parse_log,
    save_checkpoint,
    train_supervised,
    ukt_adapt,
)

NET = NetConfig(c1=4, c2=8, groups=2, K=2, grad_scale=1e-2)
TC = TrainConfig(epochs=1, batch_size=4, seed=3, hyper=HyperParams(beta=1e-3), ukt_steps=5, ukt_lr=1e-3)


@pytest.fixture(scope="module")
def data(small_fan, tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    noise = NoiseModel()
    generate_dataset("supervised-ellipses", 8, small_fan, noise, 11, d / "train.bdgd")
    generate_dataset("unsupervised-ood", 3, small_fan, noise, 12, d / "ood.bdgd")
    return d


@pytest.fixture(scope="module")
def phase1(data, small_fan):
    return train_supervised(data / "train.bdgd", TC, small_fan, init_network(NET, np.random.default_rng(0)))


def _arrays(params):
    return {k: t.data.copy() for k, t in params.named_tensors()}


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
        before = [a.copy() for a in p]
        state = OptimState.zeros_like(p, 0.1)
        adam_step(p, [np.zeros((3, 2)), None], state)
        assert state.step == 1
        for a, b in zip(p, before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_by_hand(self, rng):
        p0 = rng.standard_normal(6)
        g = rng.standard_normal(6)
        p = [p0.copy()]
        adam_step(p, [g], OptimState.zeros_like(p), lr=1e-2)
        # m_hat = g and v_hat = g^2 at t = 1
        np.testing.assert_allclose(p[0], p0 - 1e-2 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        np.testing.assert_allclose(np.abs(p[0] - p0), 1e-2, rtol=1e-6)

    def test_second_step_by_hand(self):
        p, g1, g2 = [np.array([1.0])], np.array([2.0]), np.array([-1.0])
        state = OptimState.zeros_like(p)
        adam_step(p, [g1], state, 0.1)
        adam_step(p, [g2], state, 0.1)
        m = 0.9 * 0.1 * 2.0 + 0.1 * -1.0
        v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        np.testing.assert_allclose(p[0], 1.0 - 0.1 * 2 / (2 + 1e-8) - step2, rtol=1e-14)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            p = [rng.standard_normal((4, 4)).astype(np.float32)]
            state = OptimState.zeros_like(p)
            for _ in range(10):
                adam_step(p, [rng.standard_normal((4, 4)).astype(np.float32)], state, 1e-3)
            return p[0]

        assert run().tobytes() == run().tobytes()

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(4)], OptimState.zeros_like(p))
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(3), np.zeros(3)], OptimState.zeros_like(p))

    def test_collapsed_entries_stay(self):
        p = [np.array([-np.inf, 0.5])]
        adam_step(p, [np.array([0.0, 1.0])], OptimState.zeros_like(p), 0.1)
        assert p[0][0] == -np.inf and p[0][1] < 0.5


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, rel=1e-12)
        assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0, 0.1) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step", [-1, 101])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            cosine_lr(step, 100, 1e-3, 1e-5)


class TestClip:
    def test_scales_to_max_norm(self):
        grads, norm = clip_grad_norm([np.full(4, 10.0), np.full(1, 20.0)], 10.0)
        assert norm == pytest.approx(np.sqrt(800.0))
        total = np.sqrt(sum(np.sum(g**2) for g in grads))
        assert total == pytest.approx(10.0)

    def test_small_gradients_untouched(self):
        g = [np.array([0.3, 0.4])]
        out, norm = clip_grad_norm(g, 10.0)
        assert out is g and norm == pytest.approx(0.5)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr_min": 1e-2}, {"phase": "x"}, {"ukt_steps": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestCheckpoint:
    def test_save_load_save_identical(self, phase1, tmp_path):
        save_checkpoint(phase1, tmp_path / "a.bdck")
        save_checkpoint(load_checkpoint(tmp_path / "a.bdck"), tmp_path / "b.bdck")
        assert (tmp_path / "a.bdck").read_bytes() == (tmp_path / "b.bdck").read_bytes()

    def test_round_trip_contents(self, phase1, tmp_path):
        save_checkpoint(phase1, tmp_path / "a.bdck")
        back = load_checkpoint(tmp_path / "a.bdck")
        assert _same(_arrays(back.params), _arrays(phase1.params))
        assert back.params.config == phase1.params.config
        assert back.rng_state == phase1.rng_state and back.step == phase1.step
        assert back.optim.step == phase1.optim.step
        for a, b in zip(back.optim.v, phase1.optim.v):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(back.prior.sigmas, phase1.prior.sigmas):
            np.testing.assert_array_equal(a, b)

    def test_truncated(self, phase1, tmp_path):
        buf = encode_checkpoint(phase1)
        (tmp_path / "t.bdck").write_bytes(buf[: len(buf) // 2])
        with pytest.raises(ChecksumError):
            load_checkpoint(tmp_path / "t.bdck")

    def test_bit_flip(self, phase1, tmp_path):
        buf = bytearray(encode_checkpoint(phase1))
        buf[len(buf) // 3] ^= 0x01
        (tmp_path / "f.bdck").write_bytes(bytes(buf))
        with pytest.raises(ChecksumError):
            load_checkpoint(tmp_path / "f.bdck")

    def test_future_version(self, phase1, tmp_path):
        buf = bytearray(encode_checkpoint(phase1))
        buf[4:8] = (CHECKPOINT_VERSION + 1).to_bytes(4, "little")
        (tmp_path / "v.bdck").write_bytes(bytes(buf))
        with pytest.raises(VersionError) as info:
            load_checkpoint(tmp_path / "v.bdck")
        assert str(CHECKPOINT_VERSION + 1) in str(info.value) and str(CHECKPOINT_VERSION) in str(info.value)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.bdck").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.bdck")


class TestSupervised:
    def test_reproducible(self, data, small_fan, phase1):
        again = train_supervised(data / "train.bdgd", TC, small_fan, init_network(NET, np.random.default_rng(0)))
        assert _same(_arrays(again.params), _arrays(phase1.params))
        assert encode_checkpoint(again) == encode_checkpoint(phase1)

    def test_log_one_line_per_step(self, data, small_fan, tmp_path):
        ck = train_supervised(data / "train.bdgd", TC, small_fan, init_network(NET, np.random.default_rng(0)),
                              log_path=tmp_path / "log.txt")
        rows = parse_log(tmp_path / "log.txt")
        assert [r["step"] for r in rows] == [0, 1]
        assert set(rows[0]) == {"step", "lr", "fidelity_or_nll", "trace", "tv", "kl", "total"}
        assert ck.log_offset == (tmp_path / "log.txt").stat().st_size
        assert rows[0]["lr"] == TC.lr_max

    def test_snapshot_matches_final_encoder(self, phase1):
        for (_, m, r), mean, sigma in zip(
                [(n, L.w_mean, L.w_rho) for n, L in enumerate(phase1.params.encoder)],
                phase1.prior.means[0::2], phase1.prior.sigmas[0::2]):
            np.testing.assert_array_equal(mean, m.data)
            np.testing.assert_array_equal(sigma, np.logaddexp(0, r.data))

    def test_resume_zero_steps(self, data, small_fan, phase1):
        again = train_supervised(data / "train.bdgd", TC, small_fan, None, resume=phase1)
        assert again.step == phase1.step
        assert _same(_arrays(again.params), _arrays(phase1.params))

    def test_split_run_equals_full(self, data, small_fan):
        cfg = TrainConfig(epochs=2, batch_size=4, seed=1, hyper=HyperParams(beta=1e-3))
        net = init_network(NET, np.random.default_rng(4))
        full = train_supervised(data / "train.bdgd", cfg, small_fan, net)
        half = train_supervised(data / "train.bdgd", cfg, small_fan, net, max_steps=3)
        rest = train_supervised(data / "train.bdgd", cfg, small_fan, None, resume=load_roundtrip(half))
        assert rest.step == full.step == 4
        assert _same(_arrays(rest.params), _arrays(full.params))

    def test_input_params_untouched(self, data, small_fan):
        net = init_network(NET, np.random.default_rng(0))
        before = _arrays(net)
        train_supervised(data / "train.bdgd", TC, small_fan, net)
        assert _same(_arrays(net), before)

    def test_needs_ground_truth(self, data, small_fan):
        with pytest.raises(ValueError, match="ground truth"):
            train_supervised(data / "ood.bdgd", TC, small_fan, init_network(NET, np.random.default_rng(0)))

    def test_geometry_mismatch(self, data, small_parallel):
        with pytest.raises(GeometryMismatch):
            train_supervised(data / "train.bdgd", TC, small_parallel, init_network(NET, np.random.default_rng(0)))


def load_roundtrip(ckpt: Checkpoint) -> Checkpoint:
    from ukt.training import decode_checkpoint

    return decode_checkpoint(encode_checkpoint(ckpt))


class TestAdapt:
    def test_zero_steps_identity(self, data, small_fan, phase1):
        cfg = TrainConfig(seed=0, hyper=HyperParams(), ukt_steps=0)
        res = ukt_adapt(phase1, data / "ood.bdgd", cfg, small_fan)
        assert len(res.checkpoints) == 3
        for c in res.checkpoints:
            assert _same(_arrays(c.params), _arrays(phase1.params))

    def test_kl_zero_then_nonnegative(self, data, small_fan, phase1, tmp_path):
        res = ukt_adapt(phase1, data / "ood.bdgd", TC, small_fan, log_path=tmp_path / "a.log")
        for rows in res.logs:
            assert rows[0]["kl"] == 0.0
            assert all(r["kl"] >= 0 for r in rows)
            assert len(rows) == TC.ukt_steps + 1
        assert len(parse_log(tmp_path / "a.log")) == 3 * (TC.ukt_steps + 1)

    def test_writes_one_checkpoint_per_measurement(self, data, small_fan, phase1, tmp_path):
        ukt_adapt(phase1, data / "ood.bdgd", TC, small_fan, out_dir=tmp_path)
        files = sorted(p.name for p in tmp_path.glob("adapted_*.bdck"))
        assert files == ["adapted_0000.bdck", "adapted_0001.bdck", "adapted_0002.bdck"]
        back = load_checkpoint(tmp_path / "adapted_0001.bdck")
        assert back.prior is not None

    def test_batch_mode(self, data, small_fan, phase1):
        res = ukt_adapt(phase1, data / "ood.bdgd", TC, small_fan, batch_mode=True)
        assert len(res.checkpoints) == 1 and len(res.logs[0]) == TC.ukt_steps + 1

    def test_ground_truth_never_used(self, data, small_fan, phase1):
        from dataclasses import replace

        _, recs = read_dataset(data / "train.bdgd")
        poisoned = [replace(r, ground_truth=np.full_like(r.ground_truth, np.nan)) for r in recs[:2]]
        clean = [replace(r, ground_truth=None) for r in recs[:2]]
        a = ukt_adapt(phase1, poisoned, TC, small_fan)
        b = ukt_adapt(phase1, clean, TC, small_fan)
        for x, y in zip(a.checkpoints, b.checkpoints):
            assert _same(_arrays(x.params), _arrays(y.params))

    def test_prior_untouched(self, data, small_fan, phase1):
        before = [m.copy() for m in phase1.prior.means]
        ref = _arrays(phase1.params)
        ukt_adapt(phase1, data / "ood.bdgd", TC, small_fan)
        for a, b in zip(before, phase1.prior.means):
            np.testing.assert_array_equal(a, b)
        assert _same(_arrays(phase1.params), ref)

    def test_fidelity_decreases(self, data, small_fan, phase1):
        cfg = TrainConfig(seed=0, hyper=HyperParams(beta=1e-3), ukt_steps=20, ukt_lr=1e-3)
        res = ukt_adapt(phase1, data / "ood.bdgd", cfg, small_fan)
        for rows in res.logs:
            assert rows[-1]["fidelity_or_nll"] < rows[0]["fidelity_or_nll"]

    def test_missing_snapshot(self, data, small_fan, phase1):
        from dataclasses import replace

        with pytest.raises(ValueError, match="prior"):
            ukt_adapt(replace(phase1, prior=None), data / "ood.bdgd", TC, small_fan)

    def test_empty(self, small_fan, phase1):
        with pytest.raises(ValueError):
            ukt_adapt(phase1, [], TC, small_fan)
