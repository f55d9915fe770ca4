import gzip
import struct

import numpy as np
import pytest

from deepmem import tasks as tk


class TestCopy:
    def test_layout(self):
        cfg = tk.CopyConfig(3, 5, 8)
        x, y = tk.copy_batch(cfg, np.random.default_rng(0), 50)
        assert x.shape == y.shape == (50, 11)
        blank, trig = cfg.vocab.blank, cfg.vocab.trigger
        assert np.all(x[:, :3] < 8)
        assert np.all(x[:, 3:8] == blank)
        assert np.all(x[:, 8] == trig)
        assert np.all(x[:, 9:] == blank)
        assert np.all(y[:, :8] == blank)
        np.testing.assert_array_equal(y[:, 8:], x[:, :3])

    def test_zero_delay(self):
        cfg = tk.CopyConfig(2, 0, 4)
        s = tk.gen_copy(cfg, np.random.default_rng(1))
        assert len(s.input) == 4 and s.input[2] == cfg.vocab.trigger
        assert '"target"' in s.to_json()

    def test_render(self):
        v = tk.Vocabulary(3)
        assert v.render([0, 2, 3, 4]) == "AC_:"
        assert v.size == 5

    def test_validation(self):
        for args in [(0, 1, 4), (2, -1, 4), (2, 1, 1)]:
            with pytest.raises(ValueError):
                tk.CopyConfig(*args)

    def test_data_accuracy(self):
        cfg = tk.CopyConfig(2, 1, 4)
        _, y = tk.copy_batch(cfg, np.random.default_rng(2), 10)
        assert tk.data_accuracy(y, y, 2, 1) == 1.0
        wrong = y.copy()
        wrong[:5, -1] = (wrong[:5, -1] + 1) % 4
        assert tk.data_accuracy(wrong, y, 2, 1) == pytest.approx(0.75)
        # errors before the trigger do not count
        wrong = y.copy()
        wrong[:, 0] = 0
        assert tk.data_accuracy(wrong, y, 2, 1) == 1.0
        with pytest.raises(ValueError):
            tk.data_accuracy(y[:, :-1], y[:, :-1], 2, 1)

    def test_bits(self):
        assert tk.bits_memorized(30, 32) == 150
        assert tk.bits_memorized(10, 8) == 30
        with pytest.raises(ValueError):
            tk.bits_memorized(3, 1)


class TestSimilarity:
    def test_class_structure(self):
        cfg = tk.SimConfig(20, 4, 8)
        x, labels = tk.sim_batch(cfg, np.random.default_rng(0), 500)
        blank = cfg.vocab.blank
        for row, lab in zip(x, labels):
            assert tk.aligned_matches(row, blank) == {0: 0, 1: 2, 2: 4}[lab]
            assert tk.sim_class(row, 4, blank) == lab
            assert np.sum(row != blank) == 8

    def test_start_positions(self):
        cfg = tk.SimConfig(20, 4, 8)
        x, _ = tk.sim_batch(cfg, np.random.default_rng(1), 2000)
        starts = np.argmax(x[:, :10] != cfg.vocab.blank, axis=1)
        assert starts.min() == 0 and starts.max() == 10 - 4 - 1
        # the substring never crosses into the second half
        assert np.all(x[:, 10 - 1][starts < 5] == cfg.vocab.blank)

    def test_class_balance(self):
        _, labels = tk.sim_batch(tk.SimConfig(20, 4, 8), np.random.default_rng(2), 3000)
        freq = np.bincount(labels, minlength=3) / 3000
        assert np.all(np.abs(freq - 1 / 3) < 0.05)

    def test_zero_similar_never_matches(self):
        x, labels = tk.sim_batch(tk.SimConfig(12, 2, 2), np.random.default_rng(3), 400)
        for row in x[labels == 0]:
            assert tk.aligned_matches(row, 2) == 0

    def test_validation(self):
        for args in [(21, 4, 8), (20, 3, 8), (8, 4, 8), (20, 4, 1)]:
            with pytest.raises(ValueError):
                tk.SimConfig(*args)

    def test_sample_json(self):
        s = tk.gen_sim(tk.SimConfig(8, 2, 3), np.random.default_rng(0))
        assert '"class"' in s.to_json()

    def test_sim_class_rejects_other_counts(self):
        with pytest.raises(ValueError):
            tk.sim_class([0, 1, 0, 0, 1, 1], 3, 5)


def _write_raw(path, magic, dims, payload):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


class TestIdx:
    @pytest.mark.parametrize("compress", [False, True])
    def test_roundtrip_test_set_size(self, tmp_path, compress):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(10000, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=10000, dtype=np.uint8)
        ip, lp = tmp_path / "img", tmp_path / "lab"
        tk.write_idx(ip, images, compress)
        tk.write_idx(lp, labels, compress)
        np.testing.assert_array_equal(tk.read_idx(ip, tk.IMAGE_MAGIC), images)
        X, y = tk.load_mnist_idx(ip, lp)
        assert X.shape == (10000, 784) and X.max() <= 1.0
        np.testing.assert_allclose(X[3], images[3].reshape(-1) / 255.0)
        np.testing.assert_array_equal(y, labels)

    def test_header_layout(self, tmp_path):
        p = tmp_path / "lab"
        tk.write_idx(p, np.array([3, 1], dtype=np.uint8))
        assert p.read_bytes() == b"\x00\x00\x08\x01\x00\x00\x00\x02\x03\x01"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x"
        _write_raw(p, 0x0801, (2,), b"\x00\x01")
        with pytest.raises(tk.IdxFormatError):
            tk.read_idx(p, tk.IMAGE_MAGIC)

    def test_truncated(self, tmp_path):
        p = tmp_path / "x"
        _write_raw(p, 0x0803, (2, 2, 2), b"\x00" * 7)
        with pytest.raises(tk.IdxFormatError):
            tk.read_idx(p, tk.IMAGE_MAGIC)
        p.write_bytes(b"\x00\x00")
        with pytest.raises(tk.IdxFormatError):
            tk.read_idx(p, tk.IMAGE_MAGIC)

    def test_gzip_detected(self, tmp_path):
        p = tmp_path / "x.gz"
        p.write_bytes(gzip.compress(struct.pack(">II", 0x0801, 1) + b"\x07"))
        assert tk.read_idx(p, tk.LABEL_MAGIC).tolist() == [7]

    def test_count_mismatch(self, tmp_path):
        tk.write_idx(tmp_path / "i", np.zeros((2, 2, 2), np.uint8))
        tk.write_idx(tmp_path / "l", np.zeros(3, np.uint8))
        with pytest.raises(tk.IdxFormatError):
            tk.load_mnist_idx(tmp_path / "i", tmp_path / "l")


class TestPermutation:
    def test_seed_zero_is_raster_order(self):
        np.testing.assert_array_equal(tk.pixel_permutation(0), np.arange(784))

    def test_fixed_seed(self):
        a, b = tk.pixel_permutation(7), tk.pixel_permutation(7)
        np.testing.assert_array_equal(a, b)
        assert sorted(a.tolist()) == list(range(784))
        assert not np.array_equal(a, tk.pixel_permutation(8))

    def test_permute_pixels(self):
        imgs = np.arange(2 * 784).reshape(2, 784)
        out = tk.permute_pixels(imgs, 3)
        perm = tk.pixel_permutation(3)
        np.testing.assert_array_equal(out[1], imgs[1][perm])

    def test_validation_split(self):
        X = np.arange(100).reshape(50, 2)
        y = np.arange(50)
        (Xt, yt), (Xv, yv) = tk.validation_split(X, y, 10, seed=1)
        assert len(yt) == 40 and len(yv) == 10
        assert set(yt.tolist()).isdisjoint(yv.tolist())
        np.testing.assert_array_equal(Xv[:, 0] // 2, yv)
        with pytest.raises(ValueError):
            tk.validation_split(X, y, 50)


class TestDataDir:
    def test_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv(tk.DATA_DIR_ENV, str(tmp_path))
        assert tk.default_data_dir("elsewhere") == tmp_path
        monkeypatch.delenv(tk.DATA_DIR_ENV)
        assert str(tk.default_data_dir("elsewhere")) == "elsewhere"

    def test_missing(self, tmp_path):
        with pytest.raises(tk.DataMissing):
            tk.find_mnist(tmp_path)

    def test_splits_from_files(self, tmp_path):
        rng = np.random.default_rng(0)
        for key, (name, _) in tk.MNIST_FILES.items():
            n = 60 if key.startswith("train") else 20
            arr = (rng.integers(0, 256, size=(n, 28, 28)) if key.endswith("images")
                   else rng.integers(0, 10, size=n)).astype(np.uint8)
            tk.write_idx(tmp_path / name, arr, compress=True)
        train, val, test = tk.permuted_mnist_splits(tmp_path, 1, val_size=10, train_subset=30, test_subset=5)
        assert train[0].shape == (30, 784, 1) and val[0].shape == (10, 784, 1) and test[0].shape == (5, 784, 1)
