import io

import numpy as np
import pytest
from PIL import Image

from bovw.dataset import (GrayImage, load_image, make_split, sample_features,
                          scan_dataset)
from bovw.descriptors import KIND_SIFT, DescriptorSet
from bovw.errors import DatasetError, DecodeError, ParameterError


def _write_png(path, arr):
    Image.fromarray(arr, mode="L").save(path)


class TestScanDataset:
    def test_two_class_counts(self, tmp_path):
        for name in ("beach", "buses"):
            d = tmp_path / name
            d.mkdir()
            for i in range(5):
                _write_png(d / f"{i}.png", np.full((20, 20), 100, dtype=np.uint8))
        manifest = scan_dataset(tmp_path)
        assert manifest.classes == ["beach", "buses"]
        assert len(manifest.entries) == 10
        assert manifest.class_counts() == [5, 5]

    def test_corel_like_structure(self, tmp_path):
        # 10 classes x 100 images, mirroring the standard benchmark layout
        for c in range(10):
            d = tmp_path / f"class{c:02d}"
            d.mkdir()
            for i in range(100):
                (d / f"{i:03d}.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(16))
        manifest = scan_dataset(tmp_path)
        assert len(manifest.classes) == 10
        assert len(manifest.entries) == 1000
        assert all(n == 100 for n in manifest.class_counts())

    def test_lexicographic_and_sorted(self, tmp_path):
        for name in ("zebra", "apple"):
            d = tmp_path / name
            d.mkdir()
            for fname in ("b.png", "a.png"):
                _write_png(d / fname, np.zeros((8, 8), dtype=np.uint8))
        manifest = scan_dataset(tmp_path)
        assert manifest.classes == ["apple", "zebra"]
        assert [e[0] for e in manifest.entries[:2]] == ["apple/a.png", "apple/b.png"]

    def test_empty_subdir_excluded_with_warning(self, tmp_path, caplog):
        good = tmp_path / "good"
        good.mkdir()
        _write_png(good / "x.png", np.zeros((8, 8), dtype=np.uint8))
        (tmp_path / "empty").mkdir()
        with caplog.at_level("WARNING"):
            manifest = scan_dataset(tmp_path)
        assert manifest.classes == ["good"]
        assert any("empty" in r.message for r in caplog.records)

    def test_no_classes_error(self, tmp_path):
        with pytest.raises(DatasetError, match="no classes found"):
            scan_dataset(tmp_path)

    def test_unreadable_file_skipped(self, tmp_path, caplog):
        d = tmp_path / "c"
        d.mkdir()
        _write_png(d / "ok.png", np.zeros((8, 8), dtype=np.uint8))
        (d / "broken.png").write_bytes(b"not an image at all")
        with caplog.at_level("WARNING"):
            manifest = scan_dataset(tmp_path)
        assert len(manifest.entries) == 1
        assert any("broken" in r.message for r in caplog.records)


class TestLoadImage:
    def test_constant_pgm(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n6 4\n255\n" + bytes([128] * 24))
        img = load_image(p)
        assert img.width == 6 and img.height == 4
        assert np.allclose(img.pixels, 128 / 255)

    def test_pure_red_luminance(self, tmp_path):
        p = tmp_path / "red.png"
        arr = np.zeros((5, 5, 3), dtype=np.uint8)
        arr[..., 0] = 255
        Image.fromarray(arr, mode="RGB").save(p)
        img = load_image(p)
        assert np.allclose(img.pixels, 0.299, atol=1e-9)

    def test_truncated_jpeg_raises(self, tmp_path):
        buf = io.BytesIO()
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(buf, format="JPEG")
        p = tmp_path / "t.jpg"
        p.write_bytes(buf.getvalue()[:40])
        with pytest.raises(DecodeError, match="t.jpg"):
            load_image(p)

    def test_luminance_bounds(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "rand.png"
        Image.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8).astype(np.uint8),
                        mode="RGB").save(p)
        img = load_image(p)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_grayimage_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            GrayImage(np.full((4, 4), 2.0))


def _manifest(sizes):
    from bovw.dataset import DatasetManifest
    entries = []
    classes = []
    for ci, n in enumerate(sizes):
        classes.append(f"c{ci}")
        entries.extend((f"c{ci}/{i}.png", ci) for i in range(n))
    return DatasetManifest(classes, entries)


class TestMakeSplit:
    def test_70_30_counts(self):
        manifest = _manifest([100] * 10)
        plan = make_split(manifest, 0.7, seed=1)
        assert len(plan.train) == 700 and len(plan.test) == 300

    def test_rounding_of_ten(self):
        plan = make_split(_manifest([10, 10]), 0.7, seed=0)
        assert len(plan.train) == 14 and len(plan.test) == 6

    def test_half_up_rounding(self):
        # 0.7 * 5 = 3.5 rounds up to 4 on the train side
        plan = make_split(_manifest([5, 5]), 0.7, seed=0)
        assert len(plan.train) == 8 and len(plan.test) == 2

    def test_deterministic(self):
        manifest = _manifest([30, 30, 30])
        a = make_split(manifest, 0.7, seed=42)
        b = make_split(manifest, 0.7, seed=42)
        assert a == b

    def test_seeds_differ(self):
        manifest = _manifest([30, 30])
        assert make_split(manifest, 0.7, 1) != make_split(manifest, 0.7, 2)

    def test_stratified_partition(self):
        sizes = [13, 27, 8]
        manifest = _manifest(sizes)
        plan = make_split(manifest, 0.7, seed=3)
        assert sorted(plan.train + plan.test) == list(range(sum(sizes)))
        labels = [ci for _, ci in manifest.entries]
        for ci, n in enumerate(sizes):
            n_train = sum(1 for i in plan.train if labels[i] == ci)
            assert n_train == int(np.floor(0.7 * n + 0.5))

    def test_small_class_error(self):
        with pytest.raises(DatasetError, match="at least 2"):
            make_split(_manifest([1, 10]), 0.7, seed=0)

    def test_fraction_validation(self):
        with pytest.raises(ParameterError):
            make_split(_manifest([10, 10]), 1.0, seed=0)


def _random_set(n, seed, image_ids=None):
    rng = np.random.default_rng(seed)
    return DescriptorSet(KIND_SIFT, rng.random((n, 128), dtype=np.float32).astype(np.float32),
                         image_ids=image_ids)


class TestSampleFeatures:
    def test_quarter_of_forty(self):
        out = sample_features(_random_set(40, 0), 0.25, seed=1)
        assert len(out) == 10

    def test_ceil_keeps_one(self):
        out = sample_features(_random_set(1, 0), 0.25, seed=1)
        assert len(out) == 1

    def test_deterministic(self):
        dset = _random_set(100, 5)
        a = sample_features(dset, 0.75, seed=7)
        b = sample_features(dset, 0.75, seed=7)
        assert np.array_equal(a.data, b.data)

    def test_per_image_counts(self):
        ids = np.repeat([0, 1, 2], [10, 7, 3])
        out = sample_features(_random_set(20, 2, ids), 0.5, seed=0)
        counts = np.bincount(out.image_ids, minlength=3)
        assert counts.tolist() == [5, 4, 2]  # ceil(0.5 * n) per image

    def test_fraction_validation(self):
        with pytest.raises(ParameterError):
            sample_features(_random_set(10, 0), 1.5, seed=0)
        with pytest.raises(ParameterError):
            sample_features(_random_set(10, 0), 0.0, seed=0)
