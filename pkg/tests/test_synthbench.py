"""Scene generator: copy-paste identity, determinism, augmentation rates,
and dataset file round trips."""

import numpy as np
import pytest

from refcomp.imageio import read_mask, read_pgm, read_ppm
from refcomp.synthbench import (AugmentationConfig, SceneConfig, augment_image,
                                augment_mask, bounding_box_mask,
                                generate_dataset, generate_scene, load_dataset,
                                warp_object, write_dataset)

CFG = SceneConfig()


class TestGenerate:
    def test_same_seed_bitwise_identical(self):
        a = generate_scene(CFG, 7)
        b = generate_scene(CFG, 7)
        for field in ("gt", "bg", "ref", "mask_bg", "mask_ref"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
        assert a.pose == b.pose

    def test_hole_support_equals_rendered_object_support(self):
        sample = generate_scene(CFG, 11)
        _, warped_mask = warp_object(sample.masked_ref, sample.mask_ref,
                                     sample.pose, CFG.image_size)
        np.testing.assert_array_equal(sample.mask_bg_c, warped_mask)

    def test_copy_paste_identity_is_exact(self):
        for seed in range(20):
            sample = generate_scene(CFG, seed)
            warped, _ = warp_object(sample.masked_ref, sample.mask_ref,
                                    sample.pose, CFG.image_size)
            recomposed = sample.mask_bg * sample.bg + warped
            assert np.abs(recomposed - sample.gt).max() == 0.0

    def test_masked_background_derivation(self):
        sample = generate_scene(CFG, 3)
        np.testing.assert_array_equal(sample.masked_bg, sample.mask_bg * sample.gt)
        np.testing.assert_array_equal(sample.masked_bg, sample.mask_bg * sample.bg)

    def test_object_area_bounds(self):
        for seed in range(30, 60):
            sample = generate_scene(CFG, seed)
            frac = sample.mask_bg_c.sum() / CFG.image_size ** 2
            assert CFG.min_area_frac <= frac <= CFG.max_area_frac

    def test_masks_are_binary(self):
        sample = generate_scene(CFG, 4)
        assert set(np.unique(sample.mask_bg)) <= {0.0, 1.0}
        assert set(np.unique(sample.mask_ref)) <= {0.0, 1.0}


class TestAugmentImage:
    def test_all_probabilities_zero_is_identity(self):
        cfg = AugmentationConfig(flip_p=0, rotation_p=0, scale_p=0, crop_p=0)
        sample = generate_scene(CFG, 5)
        img, mask = augment_image(sample.ref, sample.mask_ref, cfg, seed=1)
        np.testing.assert_array_equal(img, sample.ref)
        np.testing.assert_array_equal(mask, sample.mask_ref)

    def test_forced_flip_is_involution(self):
        cfg = AugmentationConfig(flip_p=1.0, rotation_p=0, scale_p=0, crop_p=0)
        sample = generate_scene(CFG, 6)
        once = augment_image(sample.ref, sample.mask_ref, cfg, seed=2)
        twice = augment_image(once[0], once[1], cfg, seed=3)
        np.testing.assert_array_equal(twice[0], sample.ref)
        np.testing.assert_array_equal(twice[1], sample.mask_ref)

    def test_transform_depends_only_on_seed(self):
        cfg = AugmentationConfig()
        sample = generate_scene(CFG, 8)
        other = generate_scene(CFG, 9)
        _, mask_a = augment_image(sample.ref, sample.mask_ref, cfg, seed=17)
        _, mask_b = augment_image(other.ref, sample.mask_ref, cfg, seed=17)
        np.testing.assert_array_equal(mask_a, mask_b)

    def test_mask_follows_object(self):
        cfg = AugmentationConfig(crop_p=0)
        sample = generate_scene(CFG, 12)
        img, mask = augment_image(sample.masked_ref, sample.mask_ref, cfg, seed=4)
        support = (img.max(axis=0) > 0).astype(np.float32)
        inter = float((support * mask).sum())
        union = float(np.maximum(support, mask).sum())
        assert inter / union > 0.8

    def test_empirical_rates(self, rate_draws=3000):
        from refcomp.synthbench import draw_augmentation_plan
        cfg = AugmentationConfig()
        flips = rotations = scales = 0
        for seed in range(rate_draws):
            plan = draw_augmentation_plan(cfg, (32, 32), np.random.default_rng(seed))
            flips += plan.flip
            rotations += plan.rotation_deg is not None
            scales += plan.scale is not None
        assert abs(flips / rate_draws - 0.5) < 0.03
        assert abs(rotations / rate_draws - 0.5) < 0.03
        assert abs(scales / rate_draws - 0.3) < 0.03


class TestAugmentMask:
    def l_shape(self):
        mask = np.zeros((16, 16), dtype=np.float32)
        mask[4:12, 4:7] = 1.0
        mask[9:12, 4:12] = 1.0
        return mask

    def find_seed(self, branch):
        from refcomp.synthbench import draw_mask_branch
        cfg = AugmentationConfig()
        for seed in range(500):
            if draw_mask_branch(cfg, np.random.default_rng(seed)) == branch:
                return seed
        pytest.fail(f"no {branch}-branch seed found")

    def test_bbox_branch_fills_enclosing_rectangle(self):
        mask = self.l_shape()
        out = bounding_box_mask(mask)
        expect = np.zeros_like(mask)
        expect[4:12, 4:12] = 1.0
        np.testing.assert_array_equal(out, expect)
        np.testing.assert_array_equal(augment_mask(mask, self.find_seed("bbox")), expect)

    def test_identity_branch(self):
        mask = self.l_shape()
        np.testing.assert_array_equal(augment_mask(mask, self.find_seed("none")), mask)

    def test_empty_mask_forces_identity(self):
        empty = np.zeros((8, 8), dtype=np.float32)
        np.testing.assert_array_equal(augment_mask(empty, 0), empty)

    def test_branch_frequencies(self):
        from refcomp.synthbench import MASK_BRANCHES, draw_mask_branch
        cfg = AugmentationConfig()
        draws = 4000
        counts = {b: 0 for b in MASK_BRANCHES}
        for seed in range(draws):
            counts[draw_mask_branch(cfg, np.random.default_rng(seed))] += 1
        for c in counts.values():
            assert abs(c / draws - 0.25) < 0.03

    def test_output_stays_binary(self):
        mask = self.l_shape()
        for seed in range(40):
            out = augment_mask(mask, seed)
            assert set(np.unique(out)) <= {0.0, 1.0}


class TestDatasetFiles:
    def test_round_trip_bitwise(self, tmp_path):
        samples = generate_dataset(CFG, 4, base_seed=100)
        manifest = write_dataset(samples, tmp_path)
        assert manifest.exists()
        loaded = load_dataset(tmp_path)
        assert len(loaded) == 4
        for orig, back in zip(samples, loaded):
            for field in ("gt", "bg", "ref", "mask_bg", "mask_ref"):
                np.testing.assert_array_equal(getattr(orig, field), getattr(back, field),
                                              err_msg=field)
            assert back.pose == orig.pose

    def test_manifest_line_count(self, tmp_path):
        samples = generate_dataset(CFG, 3, base_seed=50)
        manifest = write_dataset(samples, tmp_path)
        assert len(manifest.read_text().splitlines()) == 3

    def test_pgm_histogram_is_binary(self, tmp_path):
        samples = generate_dataset(CFG, 2, base_seed=60)
        write_dataset(samples, tmp_path)
        for path in tmp_path.glob("*.pgm"):
            raw = read_pgm(path)
            assert set(np.unique(raw)) <= {0.0, 1.0}
