"""Exporter tests, including the cross-package HBFS round-trip.

The retrieval engine (patchbank) appears here only as a consumer of the
HBFS files this package writes; that file format is the entire interface
between the two.
"""

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from hbfs_exporter import (AugmentParams, ExportConfig, augment_pair,
                           export_features, load_encoder)
from hbfs_exporter.hbfswriter import IGNORE_ID

STRIPE_COLORS = np.array([[220, 40, 40], [40, 220, 40], [40, 40, 220],
                          [220, 220, 40]], dtype=np.uint8)


def make_toy_dataset(root: Path, num_images: int = 4, size: int = 64,
                     num_classes: int = 4) -> None:
    """Stripe scenes: 16-px color bands, annotation = band class id."""
    (root / "images").mkdir(parents=True)
    (root / "annotations").mkdir(parents=True)
    rng = np.random.default_rng(99)
    for i in range(num_images):
        classes = rng.integers(0, num_classes, size // 16)
        label = np.repeat(classes, 16).astype(np.uint8)[:, None].repeat(size, 1)
        image = STRIPE_COLORS[label]
        noise = rng.integers(-12, 13, image.shape)
        image = np.clip(image.astype(int) + noise, 0, 255).astype(np.uint8)
        Image.fromarray(image).save(root / "images" / f"img{i:02d}.png")
        Image.fromarray(label).save(root / "annotations" / f"img{i:02d}.png")


@pytest.fixture
def toy_dataset(tmp_path):
    root = tmp_path / "toyset"
    make_toy_dataset(root)
    return root


class TestEncoder:
    def test_identifier_parsing(self):
        enc = load_encoder("linear16-d32-s5")
        assert enc.dim == 32
        with pytest.raises(ValueError, match="unknown encoder"):
            load_encoder("resnet50")

    def test_deterministic(self):
        a = load_encoder("linear16-d16")
        b = load_encoder("linear16-d16")
        assert np.array_equal(a.weight, b.weight)

    def test_npz_checkpoint(self, tmp_path):
        weight = np.random.default_rng(0).standard_normal((768, 8))
        path = tmp_path / "enc.npz"
        np.savez(path, weight=weight, bias=np.ones(8))
        enc = load_encoder(str(path))
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        np.testing.assert_allclose(enc.encode(image)[0], np.ones(8), atol=1e-6)

    def test_patch_raster_order(self):
        enc = load_encoder("linear16-d8")
        img = np.zeros((32, 32, 3), dtype=np.uint8)
        img[:16, 16:] = 255  # patch (0, 1) differs
        feats = enc.encode(img)
        assert feats.shape == (4, 8)
        assert not np.allclose(feats[0], feats[1])
        np.testing.assert_array_equal(feats[0], feats[2])
        np.testing.assert_array_equal(feats[0], feats[3])


class TestAugment:
    def test_identity_when_disabled(self):
        params = AugmentParams(crop_probability=0.0, brightness_probability=0,
                               contrast_probability=0, saturation_probability=0,
                               hue_probability=0)
        rng = np.random.default_rng(1)
        image = np.random.default_rng(0).integers(0, 255, (32, 32, 3)).astype(np.uint8)
        labels = np.random.default_rng(0).integers(0, 4, (32, 32)).astype(np.uint16)
        out_img, out_lab = augment_pair(image, labels, params, rng)
        np.testing.assert_array_equal(out_img, image)
        np.testing.assert_array_equal(out_lab, labels)

    def test_shapes_preserved(self):
        params = AugmentParams()
        image = np.random.default_rng(2).integers(0, 255, (64, 64, 3)).astype(np.uint8)
        labels = np.random.default_rng(2).integers(0, 4, (64, 64)).astype(np.uint16)
        for seed in range(8):
            img, lab = augment_pair(image, labels, params, np.random.default_rng(seed))
            assert img.shape == (64, 64, 3) and lab.shape == (64, 64)

    def test_labels_track_geometry(self):
        # Oracle: color the pixels by class, push the colored image through
        # the same geometric transform, and compare with the transformed
        # labels pixel by pixel (photometrics disabled).
        params = AugmentParams(brightness_probability=0, contrast_probability=0,
                               saturation_probability=0, hue_probability=0)
        size = 64
        classes = np.repeat(np.arange(4), size // 4)
        labels = classes.astype(np.uint16)[:, None].repeat(size, 1)
        colored = STRIPE_COLORS[labels]
        for seed in range(10):
            img_t, lab_t = augment_pair(colored, labels, params,
                                        np.random.default_rng(seed))
            img_as_lab = np.full(lab_t.shape, IGNORE_ID, dtype=np.uint16)
            for cls, color in enumerate(STRIPE_COLORS):
                img_as_lab[np.all(img_t == color, axis=2)] = cls
            inside = lab_t != IGNORE_ID
            # Bilinear blends colors only at stripe boundaries; nearest-label
            # pixels must agree exactly wherever the color is unambiguous.
            unambiguous = img_as_lab != IGNORE_ID
            agree = (img_as_lab == lab_t) | ~unambiguous
            assert np.all(agree[inside])
            # Padded-in regions carry IGNORE labels and black pixels.
            assert np.all(np.all(img_t[~inside] == 0, axis=1))

    def test_downscale_pads_with_ignore(self):
        params = AugmentParams(min_scale=0.5, max_scale=0.5,
                               brightness_probability=0, contrast_probability=0,
                               saturation_probability=0, hue_probability=0)
        image = np.full((64, 64, 3), 200, dtype=np.uint8)
        labels = np.zeros((64, 64), dtype=np.uint16)
        _, lab = augment_pair(image, labels, params, np.random.default_rng(0))
        assert np.count_nonzero(lab == IGNORE_ID) == 64 * 64 - 32 * 32


class TestExport:
    def test_round_trip_parses_in_engine(self, toy_dataset, tmp_path):
        out = tmp_path / "toy.hbfs"
        cfg = ExportConfig(dataset=toy_dataset, output=out,
                           encoder="linear16-d32", epochs=1)
        export_features(cfg)

        from patchbank import read_feature_set
        fset = read_feature_set(out)
        assert fset.task == "segmentation"
        assert fset.num_classes == 4
        assert fset.num_images == 4
        grid, labels = fset.epochs[0][0]
        assert grid.dim == 32 and grid.height == 4 and grid.width == 4
        assert labels.classes.shape == (64, 64)

    def test_self_prompt_evaluation_is_perfect(self, toy_dataset, tmp_path):
        # The full secondary acceptance: export, build a bank from the file,
        # decode the same file, and score 1.0 against its own labels.
        out = tmp_path / "toy.hbfs"
        export_features(ExportConfig(dataset=toy_dataset, output=out,
                                     encoder="linear16-d32", epochs=1))

        from patchbank import (DecodeConfig, SamplerConfig, build_bank,
                               build_exact, mean_iou, predict_image,
                               read_feature_set)
        fset = read_feature_set(out)
        bank = build_bank(fset, SamplerConfig(capacity=10 ** 4, downsample=False))
        index = build_exact(bank)
        preds = [predict_image(g, index, bank, DecodeConfig(k=1)).class_map
                 for g, _ in fset.epochs[0]]
        report = mean_iou(preds, [lab.classes for _, lab in fset.epochs[0]],
                          fset.num_classes)
        assert report.miou == 1.0
        print("\nACCEPTANCE exporter-round-trip: PASS (self-prompt mIoU=1.0)")

    def test_epoch_one_unaugmented_and_identity_epochs(self, toy_dataset, tmp_path):
        # Crop pinned to scale 1.0 and zero jitter: epoch 2 equals epoch 1.
        frozen = AugmentParams(min_scale=1.0, max_scale=1.0,
                               brightness_probability=0, contrast_probability=0,
                               saturation_probability=0, hue_probability=0)
        out = tmp_path / "frozen.hbfs"
        export_features(ExportConfig(dataset=toy_dataset, output=out,
                                     encoder="linear16-d16", epochs=2,
                                     augment=frozen))
        from patchbank import read_feature_set
        fset = read_feature_set(out)
        assert len(fset.epochs) == 2
        for (g1, l1), (g2, l2) in zip(fset.epochs[0], fset.epochs[1]):
            np.testing.assert_array_equal(g1.features, g2.features)
            np.testing.assert_array_equal(l1.classes, l2.classes)

    def test_augmented_epochs_differ_but_validate(self, toy_dataset, tmp_path):
        out = tmp_path / "aug.hbfs"
        export_features(ExportConfig(dataset=toy_dataset, output=out,
                                     encoder="linear16-d16", epochs=3, seed=5))
        from patchbank import read_feature_set
        fset = read_feature_set(out)  # reader enforces HBFS invariants
        assert len(fset.epochs) == 3
        g1 = fset.epochs[0][0][0].features
        g2 = fset.epochs[1][0][0].features
        assert not np.array_equal(g1, g2)

    def test_deterministic_bytes(self, toy_dataset, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{tag}.hbfs"
            export_features(ExportConfig(dataset=toy_dataset, output=out,
                                         encoder="linear16-d16", epochs=2, seed=3))
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_inputs_resized_to_configured_size(self, tmp_path):
        root = tmp_path / "big"
        make_toy_dataset(root, size=128)
        out = tmp_path / "resized.hbfs"
        export_features(ExportConfig(dataset=root, output=out,
                                     encoder="linear16-d16", image_size=64))
        from patchbank import read_feature_set
        fset = read_feature_set(out)
        grid, labels = fset.epochs[0][0]
        assert (grid.height, grid.width) == (4, 4)
        assert labels.classes.shape == (64, 64)

    def test_missing_annotation_reported(self, tmp_path):
        root = tmp_path / "broken"
        make_toy_dataset(root)
        (root / "annotations" / "img00.png").unlink()
        with pytest.raises(FileNotFoundError, match="img00"):
            export_features(ExportConfig(dataset=root, output=tmp_path / "x.hbfs"))

    def test_out_of_range_class_reported(self, toy_dataset, tmp_path):
        with pytest.raises(ValueError, match="class id"):
            export_features(ExportConfig(dataset=toy_dataset,
                                         output=tmp_path / "x.hbfs",
                                         num_classes=2))

    def test_image_size_must_be_divisible(self, toy_dataset, tmp_path):
        with pytest.raises(ValueError, match="divisible"):
            ExportConfig(dataset=toy_dataset, output=tmp_path / "x.hbfs",
                         image_size=60)
