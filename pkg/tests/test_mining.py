import numpy as np
import pytest
from scipy import ndimage

from attnmine.mining import (
    MiningConfig,
    aggregate_final_heatmap,
    binarize_cam,
    compute_cam,
    erase_component,
    flood_fill_component,
    read_heatmap_pgm,
    read_mask_pgm,
    run_am,
    write_heatmap_pgm,
    write_mask_pgm,
)


def blob(size, cx, cy, sigma, amp=1.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    return amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))


class TestComputeCam:
    def test_onehot_selector(self):
        rng = np.random.default_rng(0)
        feat = rng.normal(size=(5, 5, 3))
        w = np.array([0.0, 1.0, 0.0])
        cam = compute_cam(feat, np.ones((5, 5)), w)
        np.testing.assert_array_equal(cam, feat[:, :, 1])

    def test_zero_mask_annihilates(self):
        feat = np.random.default_rng(1).normal(size=(4, 4, 2))
        cam = compute_cam(feat, np.zeros((4, 4)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(cam, 0.0)

    def test_dot_product_single_pixel(self):
        feat = np.array([[[0.5, 0.2]]])
        cam = compute_cam(feat, np.ones((1, 1)), np.array([1.0, -1.0]))
        assert cam[0, 0] == pytest.approx(0.3)

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            compute_cam(np.zeros((2, 2, 1)), np.full((2, 2), 0.5), np.ones(1))


class TestBinarizeCam:
    def test_single_spike(self):
        h = np.zeros((4, 4))
        h[1, 2] = 3.0
        norm, binary, max_loc, degenerate = binarize_cam(h, 0.5)
        assert not degenerate
        assert max_loc == (1, 2)
        assert binary.sum() == 1 and binary[1, 2]

    def test_constant_degenerate(self):
        _, _, _, degenerate = binarize_cam(np.full((3, 3), 2.0), 0.5)
        assert degenerate

    def test_hand_normalization(self):
        h = np.array([[0.0, 0.2, 0.5, 1.0]])
        norm, binary, max_loc, _ = binarize_cam(h, 0.5)
        np.testing.assert_allclose(norm, h)
        np.testing.assert_array_equal(binary, [[False, False, True, True]])
        assert max_loc == (0, 3)

    def test_rowmajor_tie_break(self):
        h = np.zeros((3, 3))
        h[2, 0] = h[0, 2] = 5.0
        _, _, max_loc, _ = binarize_cam(h, 0.5)
        assert max_loc == (0, 2)


class TestEraseComponent:
    def test_block_erased(self):
        binary = np.zeros((5, 5), dtype=bool)
        binary[1:3, 1:3] = True
        mask = erase_component(np.ones((5, 5)), binary, (1, 1))
        assert mask[1:3, 1:3].sum() == 0
        assert mask.sum() == 25 - 4

    def test_disjoint_blob_untouched(self):
        binary = np.zeros((6, 6), dtype=bool)
        binary[0:2, 0:2] = True  # blob A
        binary[4:6, 4:6] = True  # blob B
        mask = erase_component(np.ones((6, 6)), binary, (0, 0))
        assert mask[0:2, 0:2].sum() == 0
        assert mask[4:6, 4:6].sum() == 4

    def test_connectivity_sensitivity(self):
        binary = np.zeros((4, 4), dtype=bool)
        binary[0, 0] = binary[1, 1] = True  # diagonal touch
        comp8 = flood_fill_component(binary, (0, 0), connectivity=8)
        comp4 = flood_fill_component(binary, (0, 0), connectivity=4)
        assert comp8.sum() == 2
        assert comp4.sum() == 1

    def test_matches_scipy_label_oracle(self):
        rng = np.random.default_rng(2)
        for conn, structure in ((8, np.ones((3, 3))), (4, None)):
            for _ in range(50):
                binary = rng.random((12, 12)) > 0.6
                if not binary.any():
                    continue
                seeds = np.argwhere(binary)
                seed = tuple(seeds[rng.integers(len(seeds))])
                comp = flood_fill_component(binary, seed, connectivity=conn)
                labels, _ = ndimage.label(binary, structure=structure)
                oracle = labels == labels[seed]
                np.testing.assert_array_equal(comp, oracle)

    def test_unset_seed_rejected(self):
        with pytest.raises(ValueError, match="not set"):
            erase_component(np.ones((3, 3)), np.zeros((3, 3), dtype=bool), (1, 1))


def two_blob_feat(size=12):
    # single-channel feature map with a strong and a weak blob
    f = blob(size, 3, 3, 1.2, amp=1.0) + blob(size, 9, 9, 1.2, amp=0.6)
    return f[..., None]


class TestRunAm:
    def test_t1_base_case(self):
        feat = two_blob_feat()
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=1))
        assert run.steps_completed == 1
        assert len(run.masks) == 2
        norm, _, _, _ = binarize_cam(feat[..., 0], 0.5)
        np.testing.assert_array_equal(run.heatmaps[0], norm)

    def test_peak_migrates_to_weak_blob(self):
        feat = two_blob_feat()
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=2))
        assert run.steps_completed == 2
        first_peak = np.unravel_index(np.argmax(run.heatmaps[0]), (12, 12))
        second_peak = np.unravel_index(np.argmax(run.heatmaps[1]), (12, 12))
        assert first_peak == (3, 3)
        assert second_peak == (9, 9)

    def test_constant_input_early_stop(self):
        feat = np.full((6, 6, 1), 2.0)
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=3))
        assert run.steps_completed == 0
        assert len(run.masks) == 1

    def test_mask_monotonicity_and_growth(self):
        feat = two_blob_feat()
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=3))
        zeros = 0
        for prev, cur in zip(run.masks, run.masks[1:]):
            assert np.all(cur <= prev)
            new_zeros = int((cur == 0).sum())
            assert new_zeros > zeros
            zeros = new_zeros

    def test_support_within_live_mask(self):
        feat = two_blob_feat()
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=3))
        for t, h in enumerate(run.raw_heatmaps):
            dead = run.masks[t] == 0
            assert np.all(np.asarray(h)[dead] == 0.0)

    def test_erased_components_stay_dead(self):
        feat = two_blob_feat()
        run = run_am(feat, np.ones(1), MiningConfig(num_steps=3))
        for t in range(1, len(run.masks)):
            erased = run.masks[t] == 0
            for h in run.raw_heatmaps[t:]:
                assert np.all(np.asarray(h)[erased] == 0.0)

    def test_determinism(self):
        feat = two_blob_feat()
        r1 = run_am(feat, np.ones(1), MiningConfig())
        r2 = run_am(feat, np.ones(1), MiningConfig())
        for a, b in zip(r1.heatmaps, r2.heatmaps):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(r1.masks, r2.masks):
            np.testing.assert_array_equal(a, b)


class TestAggregateFinalHeatmap:
    def test_t1_is_plain_cam(self):
        h = np.random.default_rng(3).random((6, 6))
        out = aggregate_final_heatmap([h], [np.ones((6, 6)), np.ones((6, 6))])
        np.testing.assert_array_equal(out, h)  # bit-exact

    def test_erased_pixel_fill_in(self):
        # pixel (0,0) erased at step 1 with step-1 response 0.8
        h1 = np.array([[0.8, 0.1], [0.1, 0.1]])
        h2 = np.array([[0.0, 0.3], [0.2, 0.1]])
        m0 = np.ones((2, 2))
        m1 = np.array([[0.0, 1.0], [1.0, 1.0]])
        m2 = m1.copy()
        out = aggregate_final_heatmap([h1, h2], [m0, m1, m2])
        assert out[0, 0] == pytest.approx((0.8 + (0.0 + 0.8)) / 2)

    def test_unerased_pixel_plain_average(self):
        h1 = np.full((2, 2), 0.4)
        h2 = np.full((2, 2), 0.6)
        h1[0, 0], h2[0, 0] = 0.9, 0.0  # make step 1 erase only (0,0)
        m0 = np.ones((2, 2))
        m1 = np.array([[0.0, 1.0], [1.0, 1.0]])
        out = aggregate_final_heatmap([h1, h2], [m0, m1, m1.copy()])
        assert out[1, 1] == pytest.approx((0.4 + 0.6 + 0.0) / 2)

    def test_mismatched_step_counts_rejected(self):
        with pytest.raises(ValueError, match="masks"):
            aggregate_final_heatmap([np.ones((2, 2))], [np.ones((2, 2))])


class TestDumpFormats:
    def test_heatmap_pgm_roundtrip(self, tmp_path):
        h = np.random.default_rng(4).uniform(-2, 3, size=(8, 6))
        path = tmp_path / "h.pgm"
        write_heatmap_pgm(path, h)
        back = read_heatmap_pgm(path)
        np.testing.assert_allclose(back, h, atol=(h.max() - h.min()) / 65535)

    def test_mask_pgm_roundtrip(self, tmp_path):
        m = (np.random.default_rng(5).random((7, 9)) > 0.5).astype(float)
        path = tmp_path / "m.pgm"
        write_mask_pgm(path, m)
        np.testing.assert_array_equal(read_mask_pgm(path), m)


def test_structural_properties_500_seeded_runs():
    """Mask monotonicity, CAM support and no-reactivation over 500 random runs."""
    violations = 0
    for seed in range(500):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        feat = rng.normal(size=(10, 10, d))
        w = rng.normal(size=d)
        run = run_am(feat, w, MiningConfig(num_steps=3))
        for prev, cur in zip(run.masks, run.masks[1:]):
            if not np.all(cur <= prev):
                violations += 1
        for t, h in enumerate(run.raw_heatmaps):
            if not np.all(np.asarray(h)[run.masks[t] == 0] == 0.0):
                violations += 1
        for t in range(1, len(run.masks)):
            erased = run.masks[t] == 0
            for h in run.raw_heatmaps[t:]:
                if not np.all(np.asarray(h)[erased] == 0.0):
                    violations += 1
    assert violations == 0
