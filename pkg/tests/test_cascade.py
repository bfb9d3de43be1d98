import math

import numpy as np
import pytest

from airseg.backend import BackendDescriptor
from airseg.cascade import (
    CascadeConfig,
    CascadeError,
    EmptyCoarseMaskError,
    blend_tiles,
    blend_weights,
    coarse_pass,
    extended_bbox,
    fine_pass,
    plan_tiles,
    run_cascade,
    threshold_probs,
)
from airseg.phantom import PhantomSpec, generate_phantom
from airseg.volume import BBox, Mask, ProbMap, Volume, crop, write_volume

from helpers import dice_of


@pytest.fixture(scope="module")
def phantom_pair():
    spec = PhantomSpec(rng_seed=7)
    return generate_phantom(spec)


@pytest.fixture(scope="module")
def oracle_desc(tmp_path_factory, phantom_pair):
    _, mask = phantom_pair
    path = tmp_path_factory.mktemp("oracle") / "gt.nii.gz"
    write_volume(mask, path)
    return BackendDescriptor.oracle(path)


def small_cfg(**kw):
    defaults = dict(patch_dims=(64, 64, 64), stride=(32, 32, 32))
    defaults.update(kw)
    return CascadeConfig(**defaults)


class TestConfig:
    def test_threshold_range(self):
        with pytest.raises(ValueError):
            CascadeConfig(prob_threshold=1.0)

    def test_stride_cannot_exceed_patch(self):
        with pytest.raises(ValueError):
            CascadeConfig(patch_dims=(32, 32, 32), stride=(48, 16, 16))

    def test_connectivity_validated(self):
        with pytest.raises(ValueError):
            CascadeConfig(connectivity=4)


class TestCoarsePass:
    def test_native_spacing_oracle_is_identity(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        cfg = small_cfg(coarse_spacing=vol.spacing)
        out = coarse_pass(vol, cfg, oracle_desc)
        assert np.array_equal(out.data, mask.data)

    def test_three_mm_oracle_dice(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        cfg = small_cfg(coarse_spacing=(3.0, 3.0, 3.0))
        out = coarse_pass(vol, cfg, oracle_desc)
        assert dice_of(out.data, mask.data) >= 0.75

    def test_all_zero_backend_is_error(self, phantom_pair, tmp_path):
        vol, _ = phantom_pair
        empty = Mask(np.zeros(vol.dims, dtype=np.uint8), vol.spacing, vol.origin)
        path = tmp_path / "empty.nii.gz"
        write_volume(empty, path)
        with pytest.raises(EmptyCoarseMaskError):
            coarse_pass(vol, small_cfg(), BackendDescriptor.oracle(path))


class TestExtendedBBox:
    def grid_mask(self, dims=(12, 12, 12), spacing=(1.0, 1.0, 1.0)):
        return Mask(np.zeros(dims, dtype=np.uint8), spacing)

    def test_single_voxel_no_margin(self):
        m = self.grid_mask()
        m.data[5, 5, 5] = 1
        box = extended_bbox(m, 0.0)
        assert box.lo == (5, 5, 5)
        assert box.hi == (6, 6, 6)

    def test_margin_in_millimeters(self):
        m = self.grid_mask()
        m.data[5, 5, 5] = 1
        box = extended_bbox(m, 3.0)
        assert box.lo == (2, 2, 2)
        assert box.hi == (9, 9, 9)

    def test_margin_uses_axis_spacing(self):
        m = self.grid_mask(spacing=(1.0, 2.0, 3.0))
        m.data[6, 6, 6] = 1
        box = extended_bbox(m, 3.0)
        assert box.lo == (3, 4, 5)  # ceil(3/1), ceil(3/2), ceil(3/3)

    def test_clamped_at_grid_edge(self):
        m = self.grid_mask()
        m.data[0, 0, 0] = 1
        box = extended_bbox(m, 3.0)
        assert box.lo == (0, 0, 0)
        assert box.hi == (4, 4, 4)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            extended_bbox(self.grid_mask(), 1.0)


class TestPlanTiles:
    def test_clamping_rule_1d(self):
        plan = plan_tiles((100, 64, 64), (64, 64, 64), (32, 32, 32))
        xs = sorted({o[0] for o in plan})
        assert xs == [0, 32, 36]

    def test_roi_equals_patch(self):
        assert plan_tiles((64, 64, 64), (64, 64, 64), (32, 32, 32)) == [(0, 0, 0)]

    def test_patch_larger_than_roi_rejected(self):
        with pytest.raises(ValueError):
            plan_tiles((48, 64, 64), (64, 64, 64), (32, 32, 32))

    def test_origins_increase_in_scan_order(self):
        plan = plan_tiles((40, 30, 50), (16, 16, 16), (8, 12, 10))
        assert plan == sorted(plan)
        assert len(set(plan)) == len(plan)

    def test_random_plans_cover_every_voxel(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            roi = tuple(int(d) for d in rng.integers(4, 40, 3))
            patch = tuple(int(rng.integers(2, d + 1)) for d in roi)
            stride = tuple(int(rng.integers(1, p + 1)) for p in patch)
            plan = plan_tiles(roi, patch, stride)
            covered = np.zeros(roi, dtype=bool)
            for origin in plan:
                sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
                covered[sl] = True
            assert covered.all()


class TestBlendWeights:
    def test_center_peak_is_one_for_odd_dims(self):
        w = blend_weights((9, 9, 9), 0.125)
        assert w[4, 4, 4] == pytest.approx(1.0)
        assert w.max() == pytest.approx(1.0)

    def test_reflection_symmetry(self):
        for dims in [(8, 8, 8), (9, 9, 9), (8, 9, 10)]:
            w = blend_weights(dims, 0.2)
            assert np.allclose(w, w[::-1, :, :])
            assert np.allclose(w, w[:, ::-1, :])
            assert np.allclose(w, w[:, :, ::-1])

    def test_corner_value_matches_closed_form(self):
        w = blend_weights((64, 64, 64), 1.0 / 8.0)
        analytic = math.exp(-3.0 * (31.5 / 8.0) ** 2 / 2.0)
        assert abs(w[0, 0, 0] - analytic) < 1e-6

    def test_floored_positive(self):
        w = blend_weights((64, 64, 64), 1.0 / 8.0)
        assert w.min() >= 1e-8


class ConstantBackend:
    """Test helper: patches of a constant probability via oracle-free stub."""


def constant_prob_tiles(plan, patch_dims, value):
    patch = np.full(patch_dims, value, dtype=np.float32)
    return [(origin, patch) for origin in plan]


class TestBlendTiles:
    def test_constant_tiles_blend_to_constant(self):
        roi = (40, 40, 40)
        patch = (16, 16, 16)
        plan = plan_tiles(roi, patch, (8, 8, 8))
        w = blend_weights(patch, 0.125)
        out = blend_tiles(roi, constant_prob_tiles(plan, patch, 1.0), w)
        assert np.allclose(out, 1.0, atol=1e-12)

    def test_two_tile_overlap_weighted_mean(self):
        # 1D-style overlap along x: tile A answers 0, tile B answers 1.
        roi = (24, 8, 8)
        patch = (16, 8, 8)
        w = blend_weights(patch, 0.25)
        a = np.zeros(patch, dtype=np.float32)
        b = np.ones(patch, dtype=np.float32)
        out = blend_tiles(roi, [((0, 0, 0), a), ((8, 0, 0), b)], w)
        for x in range(8, 16):  # overlap region
            wa = w[x, 4, 4]
            wb = w[x - 8, 4, 4]
            expect = wb / (wa + wb)
            assert out[x, 4, 4] == pytest.approx(expect, abs=1e-6)
        assert np.allclose(out[:8], 0.0)
        assert np.allclose(out[16:], 1.0)

    def test_order_independence_under_permutation(self):
        rng = np.random.default_rng(99)
        roi = (30, 22, 18)
        patch = (12, 10, 8)
        plan = plan_tiles(roi, patch, (6, 7, 5))
        w = blend_weights(patch, 0.125)
        tiles = [
            (origin, rng.random(patch).astype(np.float32)) for origin in plan
        ]
        base = blend_tiles(roi, tiles, w)
        for _ in range(3):
            shuffled = list(tiles)
            rng.shuffle(shuffled)
            out = blend_tiles(roi, shuffled, w)
            assert np.max(np.abs(out - base)) <= 1e-6

    def test_range_preserved(self):
        rng = np.random.default_rng(1)
        roi = (20, 20, 20)
        patch = (8, 8, 8)
        plan = plan_tiles(roi, patch, (4, 4, 4))
        w = blend_weights(patch, 0.125)
        tiles = [(o, rng.random(patch).astype(np.float32)) for o in plan]
        out = blend_tiles(roi, tiles, w)
        assert out.min() >= 0.0
        assert out.max() <= 1.0


class TestFinePass:
    def test_oracle_fine_pass_dice(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        coarse = coarse_pass(vol, small_cfg(), oracle_desc)
        box = extended_bbox(coarse, 8.0)
        roi = crop(vol, box)
        cfg = small_cfg()
        probs = fine_pass(roi, cfg, oracle_desc)
        pred = threshold_probs(probs, 0.5)
        gt_roi = crop(mask, box)
        assert dice_of(pred.data, gt_roi.data) >= 0.99

    def test_backend_error_names_tile(self, phantom_pair):
        vol, _ = phantom_pair
        box = BBox((0, 0, 0), (64, 64, 64))
        roi = crop(vol, box)
        bad = BackendDescriptor.oracle("/nonexistent/oracle.nii")
        with pytest.raises(CascadeError, match=r"fine tile at origin \(0, 0, 0\)"):
            fine_pass(roi, small_cfg(), bad)


class TestRunCascade:
    def test_oracle_cascade_dice(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        pred = run_cascade(vol, small_cfg(), oracle_desc, oracle_desc)
        assert pred.dims == vol.dims
        assert pred.spacing == vol.spacing
        assert dice_of(pred.data, mask.data) >= 0.98

    def test_region_grow_cascade_dice(self, phantom_pair):
        vol, mask = phantom_pair
        grow = BackendDescriptor.region_grow()
        pred = run_cascade(vol, small_cfg(), grow, grow)
        assert dice_of(pred.data, mask.data) >= 0.95

    def test_margin_monotone_with_oracle(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        last = 0.0
        for margin in (0.0, 4.0, 8.0, 16.0):
            cfg = small_cfg(margin_mm=margin)
            pred = run_cascade(vol, cfg, oracle_desc, oracle_desc)
            dice = dice_of(pred.data, mask.data)
            assert dice >= last - 1e-12
            last = dice

    def test_keep_lcc_removes_injected_speckles(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        cfg = small_cfg(keep_lcc=True)
        pred = run_cascade(vol, cfg, oracle_desc, oracle_desc)
        from airseg.postprocess import label_components

        assert label_components(pred, cfg.connectivity).num_components == 1

    def test_no_lcc_keeps_everything_pasted(self, phantom_pair, oracle_desc):
        vol, mask = phantom_pair
        cfg_on = small_cfg(keep_lcc=True)
        cfg_off = small_cfg(keep_lcc=False)
        on = run_cascade(vol, cfg_on, oracle_desc, oracle_desc)
        off = run_cascade(vol, cfg_off, oracle_desc, oracle_desc)
        assert off.num_foreground >= on.num_foreground

    def test_small_volume_padded_to_patch(self, oracle_desc, tmp_path):
        spec = PhantomSpec(
            grid_dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0), depth=1,
            trachea_radius=4.0, trachea_length=14.0, noise_sigma=0.0, rng_seed=5,
        )
        vol, mask = generate_phantom(spec)
        path = tmp_path / "gt48.nii.gz"
        write_volume(mask, path)
        oracle = BackendDescriptor.oracle(path)
        cfg = CascadeConfig(patch_dims=(64, 64, 64), stride=(32, 32, 32))
        pred = run_cascade(vol, cfg, oracle, oracle)
        assert pred.dims == vol.dims
        assert dice_of(pred.data, mask.data) >= 0.98

    def test_stage_timings_collected(self, phantom_pair, oracle_desc):
        vol, _ = phantom_pair
        timings = {}
        run_cascade(vol, small_cfg(), oracle_desc, oracle_desc, timings=timings)
        assert set(timings) == {"coarse", "crop", "fine", "post"}
        assert all(t >= 0 for t in timings.values())

    def test_stage_annotation_on_failure(self, phantom_pair):
        vol, _ = phantom_pair
        bad = BackendDescriptor.oracle("/nonexistent/gt.nii")
        with pytest.raises(CascadeError, match="coarse stage"):
            run_cascade(vol, small_cfg(), bad, bad)
