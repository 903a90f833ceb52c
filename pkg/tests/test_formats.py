import struct

import numpy as np
import pytest

from ukt.formats import (
    METRIC_COLUMNS,
    ChecksumError,
    VersionError,
    decode_tensor,
    encode_tensor,
    metrics_csv_append,
    read_image_pgm,
    read_metrics_csv,
    read_tensor,
    write_image_pgm,
    write_tensor,
)


class TestTensorFrame:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip(self, tmp_path, dtype):
        a = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(dtype)
        write_tensor(tmp_path / "a.tnsr", a)
        b = read_tensor(tmp_path / "a.tnsr")
        assert b.dtype == dtype and b.tobytes() == a.tobytes()

    def test_layout(self):
        buf = encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert buf[:4] == b"TNSR"
        version, code, rank = struct.unpack_from("<IBI", buf, 4)
        assert (version, code, rank) == (1, 1, 2)
        assert struct.unpack_from("<2Q", buf, 13) == (2, 3)
        assert len(buf) == 13 + 16 + 48 + 4

    def test_scalar_and_empty(self):
        for a in (np.float64(3.5), np.zeros((0, 4), np.float32)):
            b, _ = decode_tensor(encode_tensor(a))
            assert b.shape == np.shape(a)

    def test_corruption_detected(self):
        buf = bytearray(encode_tensor(np.ones(10)))
        buf[40] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode_tensor(bytes(buf))

    def test_truncation_detected(self):
        buf = encode_tensor(np.ones(10))
        with pytest.raises(ChecksumError):
            decode_tensor(buf[:-6])

    def test_version(self):
        buf = bytearray(encode_tensor(np.ones(2)))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(VersionError):
            decode_tensor(bytes(buf))

    def test_rejects_int(self):
        with pytest.raises(ValueError):
            encode_tensor(np.arange(3))


class TestPGM:
    def test_low_is_zero(self, tmp_path):
        write_image_pgm(np.full((4, 5), -1.0), tmp_path / "a.pgm", (-1.0, 2.0))
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5\n5 4\n65535\n")
        assert set(raw[-40:]) == {0}

    def test_high_is_max(self, tmp_path):
        write_image_pgm(np.full((4, 5), 2.0), tmp_path / "a.pgm", (-1.0, 2.0))
        payload = np.frombuffer((tmp_path / "a.pgm").read_bytes()[-40:], ">u2")
        assert (payload == 65535).all()

    def test_roundtrip_quantization(self, tmp_path):
        img = np.random.default_rng(1).uniform(0.2, 1.7, (9, 7))
        write_image_pgm(img, tmp_path / "a.pgm", (0.2, 1.7))
        back = read_image_pgm(tmp_path / "a.pgm", (0.2, 1.7))
        assert np.abs(back - img).max() <= (1.7 - 0.2) / 65535

    def test_clamps(self, tmp_path):
        write_image_pgm(np.array([[-5.0, 5.0]]), tmp_path / "a.pgm", (0.0, 1.0))
        np.testing.assert_array_equal(read_image_pgm(tmp_path / "a.pgm", (0, 1)), [[0.0, 1.0]])

    def test_bad_window(self, tmp_path):
        with pytest.raises(ValueError):
            write_image_pgm(np.zeros((2, 2)), tmp_path / "a.pgm", (1.0, 1.0))


def _row(i):
    return dict(sample_id=i, method="fbp", psnr_db=30.5 + i, ssim=0.9, wall_ms=-1, seed=7, config_hash="ab")


class TestMetricsCSV:
    def test_first_append_writes_header(self, tmp_path):
        path = tmp_path / "m.csv"
        metrics_csv_append(path, _row(0))
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert len(lines) == 2

    def test_constant_columns(self, tmp_path):
        path = tmp_path / "m.csv"
        for i in range(5):
            metrics_csv_append(path, _row(i))
        lines = path.read_text().splitlines()
        assert len(lines) == 6
        assert {line.count(",") for line in lines} == {len(METRIC_COLUMNS) - 1}
        assert read_metrics_csv(path)[3]["psnr_db"] == "33.500000"

    def test_crash_leaves_complete_rows(self, tmp_path, monkeypatch):
        path = tmp_path / "m.csv"
        metrics_csv_append(path, _row(0))
        before = path.read_bytes()

        def boom(*a, **k):
            raise OSError("simulated crash before rename")

        monkeypatch.setattr("ukt.formats.os.replace", boom)
        with pytest.raises(OSError):
            metrics_csv_append(path, _row(1))
        assert path.read_bytes() == before
        assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]

    def test_missing_column(self, tmp_path):
        row = _row(0)
        del row["ssim"]
        with pytest.raises(ValueError):
            metrics_csv_append(tmp_path / "m.csv", row)
