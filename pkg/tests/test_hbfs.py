"""Feature-set container round-trips and failure modes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchbank.errors import FileFormatError
from patchbank.features import (DEPTH, IGNORE_ID, SEGMENTATION, FeatureGrid,
                                FeatureSet, PixelLabels)
from patchbank.hbfs import (feature_set_to_bytes, parse_feature_set,
                            read_feature_set, write_feature_set)
from patchbank.synthetic import generate_synthetic_scene_set


def random_set(seed: int, task: str, num_images: int, epochs: int) -> FeatureSet:
    rng = np.random.default_rng(seed)
    eps = []
    h, w, d = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 6))
    num_classes = int(rng.integers(1, 5))
    for _ in range(epochs):
        images = []
        for i in range(num_images):
            feats = rng.standard_normal((h * w, d)).astype(np.float32)
            if task == SEGMENTATION:
                cls = rng.integers(0, num_classes + 1, size=(16 * h, 16 * w))
                cls = np.where(cls == num_classes, IGNORE_ID, cls).astype(np.uint16)
                labels = PixelLabels(SEGMENTATION, classes=cls)
            else:
                depth = rng.standard_normal((16 * h, 16 * w)).astype(np.float32)
                valid = rng.random((16 * h, 16 * w)) < 0.8
                labels = PixelLabels(DEPTH, depth=depth, valid=valid)
            images.append((FeatureGrid(i, h, w, feats), labels))
        eps.append(images)
    return FeatureSet(task, num_classes if task == SEGMENTATION else 0, eps)


def assert_sets_equal(a: FeatureSet, b: FeatureSet):
    assert a.task == b.task and a.num_classes == b.num_classes
    assert len(a.epochs) == len(b.epochs)
    for ea, eb in zip(a.epochs, b.epochs):
        assert len(ea) == len(eb)
        for (ga, la), (gb, lb) in zip(ea, eb):
            assert (ga.image_id, ga.height, ga.width) == (gb.image_id, gb.height, gb.width)
            assert ga.features.dtype == gb.features.dtype == np.float32
            assert np.array_equal(ga.features, gb.features)
            if a.task == SEGMENTATION:
                assert np.array_equal(la.classes, lb.classes)
            else:
                assert np.array_equal(la.depth, lb.depth)
                assert np.array_equal(la.valid, lb.valid)


class TestRoundTrip:
    def test_empty_set(self, tmp_path):
        fset = FeatureSet(SEGMENTATION, 3, [[]])
        path = tmp_path / "empty.hbfs"
        write_feature_set(fset, path)
        back = read_feature_set(path)
        assert back.task == SEGMENTATION and back.num_classes == 3
        assert len(back.epochs) == 1 and back.epochs[0] == []

    def test_single_image_bit_exact(self, tmp_path):
        fset = random_set(11, SEGMENTATION, 1, 1)
        path = tmp_path / "one.hbfs"
        write_feature_set(fset, path)
        assert_sets_equal(fset, read_feature_set(path))

    def test_write_is_deterministic(self, tmp_path):
        fset = generate_synthetic_scene_set(3, 2, 2, 8, 3, 0.1, seed=4, epochs=2)
        p1, p2 = tmp_path / "a.hbfs", tmp_path / "b.hbfs"
        write_feature_set(fset, p1)
        write_feature_set(fset, p2)
        assert p1.read_bytes() == p2.read_bytes()

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([SEGMENTATION, DEPTH]),
           st.integers(0, 3), st.integers(1, 3))
    def test_random_sets(self, seed, task, num_images, epochs):
        fset = random_set(seed, task, num_images, epochs)
        assert_sets_equal(fset, parse_feature_set(feature_set_to_bytes(fset)))


class TestParseErrors:
    def _bytes(self) -> bytearray:
        return bytearray(feature_set_to_bytes(random_set(3, SEGMENTATION, 1, 1)))

    def test_bad_magic(self):
        buf = self._bytes()
        buf[:4] = b"XXXX"
        with pytest.raises(FileFormatError, match="magic") as err:
            parse_feature_set(bytes(buf))
        assert err.value.offset == 0

    def test_version_mismatch(self):
        buf = self._bytes()
        buf[8] = 99
        with pytest.raises(FileFormatError, match="version"):
            parse_feature_set(bytes(buf))

    def test_truncated_payload_names_offset(self):
        buf = self._bytes()
        with pytest.raises(FileFormatError, match="truncated") as err:
            parse_feature_set(bytes(buf[:len(buf) // 2]))
        assert err.value.offset > 0

    def test_trailing_garbage(self):
        buf = self._bytes() + b"JUNK"
        with pytest.raises(FileFormatError, match="trailing"):
            parse_feature_set(bytes(buf))

    def test_no_partial_result(self, tmp_path):
        path = tmp_path / "corrupt.hbfs"
        path.write_bytes(b"HBFSXXXX" + b"\0" * 64)
        with pytest.raises(FileFormatError):
            read_feature_set(path)
