"""Augmentation tests: involutions, identities, blur properties, determinism."""

import numpy as np
import pytest

from maskpipe.augment import (
    ALL_TRANSFORMS,
    AugmentationPlan,
    affine,
    apply_plan,
    color,
    gaussian_blur,
    plan_from_config,
    plan_to_config,
)
from maskpipe.errors import ValidationError
from maskpipe.geometry import BBox


@pytest.fixture
def img():
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(40, 60, 3), dtype=np.uint8)


class TestAffine:
    def test_neutral_is_bit_exact_identity(self, img):
        out, boxes = affine(img, [BBox(0.1, 0.1, 0.4, 0.5)])
        assert np.array_equal(out, img)
        assert boxes == [BBox(0.1, 0.1, 0.4, 0.5)]

    def test_flip_mirrors_boxes(self, img):
        out, boxes = affine(img, [BBox(0.1, 0.2, 0.4, 0.5)], flip=True)
        assert np.array_equal(out, img[:, ::-1])
        assert boxes == [BBox(1.0 - 0.4, 0.2, 1.0 - 0.1, 0.5)]

    def test_double_flip_bit_exact(self, img):
        once, _ = affine(img, None, flip=True)
        twice, _ = affine(once, None, flip=True)
        assert np.array_equal(twice, img)

    def test_rotation_roundtrip_close(self):
        # smooth ramp survives two bilinear passes nearly exactly
        ys, xs = np.mgrid[0:40, 0:60]
        smooth = np.stack([xs * 3, ys * 4, xs + ys], axis=-1).astype(np.uint8)
        rotated, _ = affine(smooth, None, rotation_deg=30.0)
        back, _ = affine(rotated, None, rotation_deg=-30.0)
        inner = (slice(12, 28), slice(20, 40))
        assert np.mean(np.abs(back[inner].astype(int) - smooth[inner].astype(int))) < 3

    def test_scale_grows_boxes(self, img):
        _, boxes = affine(img, [BBox(0.4, 0.4, 0.6, 0.6)], scale=1.5)
        (b,) = boxes
        assert b.width == pytest.approx(0.3, abs=0.02)

    def test_translation_moves_boxes(self, img):
        _, boxes = affine(img, [BBox(0.4, 0.4, 0.6, 0.6)], translation=(0.1, -0.05))
        (b,) = boxes
        assert b.center()[0] == pytest.approx(0.6, abs=0.01)
        assert b.center()[1] == pytest.approx(0.45, abs=0.01)

    def test_offscreen_boxes_dropped(self, img):
        _, boxes = affine(img, [BBox(0.0, 0.0, 0.05, 0.05)], translation=(-0.5, -0.5))
        assert boxes == []

    def test_box_validity_preserved(self, img):
        rng = np.random.default_rng(5)
        for _ in range(25):
            x1, y1 = rng.uniform(0, 0.8, 2)
            box = BBox(x1, y1, x1 + rng.uniform(0.05, 0.2), y1 + rng.uniform(0.05, 0.2))
            _, boxes = affine(
                img,
                [box],
                rotation_deg=rng.uniform(-45, 45),
                translation=tuple(rng.uniform(-0.2, 0.2, 2)),
                scale=rng.uniform(0.5, 1.5),
                flip=bool(rng.integers(2)),
            )
            for b in boxes:
                assert b.is_valid()

    def test_bad_scale_rejected(self, img):
        with pytest.raises(ValidationError):
            affine(img, None, scale=0.0)


class TestColor:
    def test_neutral_identity(self, img):
        assert np.array_equal(color(img), img)

    def test_double_invert_bit_exact(self, img):
        assert np.array_equal(color(color(img, invert=True), invert=True), img)

    def test_brightness_saturates(self):
        gray = np.full((8, 8, 3), 128, dtype=np.uint8)
        assert np.all(color(gray, brightness=2.0) == 255)
        half = np.full((8, 8, 3), 100, dtype=np.uint8)
        assert np.all(color(half, brightness=2.0) == 200)

    def test_hue_rotation_full_circle(self, img):
        out = color(img, hue_deg=360.0)
        assert np.mean(np.abs(out.astype(int) - img.astype(int))) < 1.5

    def test_saturation_zero_limit_grays_out(self):
        vivid = np.zeros((4, 4, 3), dtype=np.uint8)
        vivid[..., 0] = 200
        out = color(vivid, saturation=1e-9)
        assert np.all(np.abs(out.astype(int).max(axis=-1) - out.astype(int).min(axis=-1)) <= 1)

    def test_input_unmodified(self, img):
        copy = img.copy()
        color(img, hue_deg=90.0, brightness=1.3, invert=True)
        assert np.array_equal(img, copy)


class TestGaussianBlur:
    def test_sigma_zero_identity(self, img):
        assert np.array_equal(gaussian_blur(img, 0.0), img)

    def test_constant_image_unchanged(self):
        const = np.full((16, 16, 3), 77, dtype=np.uint8)
        assert np.array_equal(gaussian_blur(const, 1.5), const)

    def test_mean_preserved(self, img):
        for sigma in (0.5, 1.0, 2.0):
            out = gaussian_blur(img, sigma)
            assert abs(float(out.mean()) - float(img.mean())) < 0.5

    def test_smooths_variance(self, img):
        out = gaussian_blur(img, 2.0)
        assert out.std() < img.std()

    def test_single_row_image(self):
        strip = np.arange(30, dtype=np.uint8).reshape(1, 10, 3)
        out = gaussian_blur(strip, 1.0)
        assert out.shape == strip.shape


class TestApplyPlan:
    def test_reproducible_under_seed_index(self, img):
        plan = AugmentationPlan(seed=11)
        a, _ = apply_plan(img, plan, 5)
        b, _ = apply_plan(img, plan, 5)
        assert np.array_equal(a, b)

    def test_different_indices_differ(self, img):
        plan = AugmentationPlan(seed=11)
        a, _ = apply_plan(img, plan, 0)
        b, _ = apply_plan(img, plan, 1)
        assert not np.array_equal(a, b)

    def test_all_disabled_is_identity(self, img):
        plan = AugmentationPlan(seed=11, enabled=frozenset())
        out, boxes = apply_plan(img, plan, 3, boxes=[BBox(0.1, 0.1, 0.3, 0.3)])
        assert np.array_equal(out, img)
        assert boxes == [BBox(0.1, 0.1, 0.3, 0.3)]

    def test_rotation_draws_uncorrelated_across_indices(self):
        from maskpipe.augment import _draw_params

        plan = AugmentationPlan(seed=123)
        rotations = np.array(
            [_draw_params(plan, i)["rotation_deg"] for i in range(1000)]
        )
        lagged = np.corrcoef(rotations[:-1], rotations[1:])[0, 1]
        assert abs(lagged) < 0.1
        # spread covers the configured range
        assert rotations.min() < -12 and rotations.max() > 12

    def test_unknown_transform_rejected(self):
        with pytest.raises(ValidationError):
            AugmentationPlan(enabled=frozenset({"mosaic"}))


class TestPlanConfig:
    def test_round_trip(self):
        plan = AugmentationPlan(
            seed=42,
            enabled=frozenset({"rotation", "flip", "blur"}),
            rotation_deg=(-5.0, 5.0),
            blur_sigma=(0.0, 1.25),
            flip_p=0.25,
        )
        assert plan_from_config(plan_to_config(plan)) == plan

    def test_default_round_trip(self):
        assert plan_from_config(plan_to_config(AugmentationPlan())) == AugmentationPlan()

    def test_config_lists_all_transforms(self):
        text = plan_to_config(AugmentationPlan())
        for name in ALL_TRANSFORMS:
            assert name in text
