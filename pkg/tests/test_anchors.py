import numpy as np
import pytest

from roidet.anchors import (
    AnchorLayerSpec,
    ScaleSpec,
    build_grid,
    coverage,
    design_report,
    expand_scales,
    recommend_scales,
)

# The six published grid/scale settings (Exp1-6) used across the tests.
SETTINGS = {
    "exp1": ((4, 2, 1), ScaleSpec(0.7, 1.3, 0.3)),
    "exp2": ((7,), ScaleSpec(0.7, 2.2, 0.75)),
    "exp3": ((7,), ScaleSpec(0.7, 2.2, 0.3)),
    "exp4": ((7,), ScaleSpec(0.7, 2.2, 0.1)),
    "exp5": ((7,), ScaleSpec(0.7, 2.2, 0.05)),
    "exp6": ((14,), ScaleSpec(0.7, 2.2, 0.05)),
}


class TestExpandScales:
    def test_six_scale_setting(self):
        got = expand_scales(ScaleSpec(0.7, 2.2, 0.3))
        assert got == pytest.approx([0.7, 1.0, 1.3, 1.6, 1.9, 2.2], abs=1e-9)

    def test_three_scale_setting(self):
        got = expand_scales(ScaleSpec(0.7, 1.3, 0.3))
        assert got == pytest.approx([0.7, 1.0, 1.3], abs=1e-9)

    def test_three_scale_wide_setting(self):
        got = expand_scales(ScaleSpec(0.7, 2.2, 0.75))
        assert got == pytest.approx([0.7, 1.45, 2.2], abs=1e-9)

    def test_counts_for_all_settings(self):
        expected = {"exp1": 3, "exp2": 3, "exp3": 6, "exp4": 16, "exp5": 31, "exp6": 31}
        for name, (_, spec) in SETTINGS.items():
            assert len(expand_scales(spec)) == expected[name]

    def test_misaligned_stop_rejected(self):
        with pytest.raises(ValueError, match="integer"):
            ScaleSpec(0.7, 2.0, 0.3)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            ScaleSpec(0.0, 1.0, 0.1)
        with pytest.raises(ValueError):
            ScaleSpec(0.5, 1.0, 0.0)
        with pytest.raises(ValueError):
            ScaleSpec(1.0, 0.5, 0.1)


class TestBuildGrid:
    def brute_count(self, grids, n_scales, n_aspects=1):
        return sum(g * g for g in grids) * n_scales * n_aspects

    def test_layer7_six_scales_294(self):
        layer = AnchorLayerSpec(grids=(7,))
        aset = build_grid(layer, expand_scales(ScaleSpec(0.7, 2.2, 0.3)))
        assert aset.total == 294
        assert aset.total == self.brute_count((7,), 6)

    def test_layer421_three_scales_63(self):
        layer = AnchorLayerSpec(grids=(4, 2, 1))
        aset = build_grid(layer, expand_scales(ScaleSpec(0.7, 1.3, 0.3)))
        assert aset.total == 63
        assert aset.total == self.brute_count((4, 2, 1), 3)

    def test_counts_for_all_settings(self):
        expected = {"exp1": 63, "exp2": 147, "exp3": 294, "exp4": 784,
                    "exp5": 1519, "exp6": 6076}
        for name, (grids, spec) in SETTINGS.items():
            aset = build_grid(AnchorLayerSpec(grids=grids), expand_scales(spec))
            assert aset.total == expected[name]
            assert aset.total == self.brute_count(grids, spec.count)

    def test_cell_geometry(self):
        # 7x7 on 224: cell 32, first cell centered at (16, 16), scale 1 side 32
        layer = AnchorLayerSpec(grids=(7,))
        aset = build_grid(layer, [1.0])
        a = aset.anchors[0]
        assert a.cell == (0, 0)
        assert (a.box.cx, a.box.cy) == (16.0, 16.0)
        assert a.box.w == 32.0 and a.box.h == 32.0

    def test_ordering_grid_major_row_col_scale(self):
        layer = AnchorLayerSpec(grids=(2, 1))
        aset = build_grid(layer, [0.5, 1.0])
        keys = [(a.grid, a.cell, a.scale) for a in aset.anchors]
        assert keys == [
            (2, (0, 0), 0.5), (2, (0, 0), 1.0), (2, (0, 1), 0.5), (2, (0, 1), 1.0),
            (2, (1, 0), 0.5), (2, (1, 0), 1.0), (2, (1, 1), 0.5), (2, (1, 1), 1.0),
            (1, (0, 0), 0.5), (1, (0, 0), 1.0),
        ]

    def test_centers_inside_canvas_sides_unclipped(self):
        layer = AnchorLayerSpec(grids=(7,))
        aset = build_grid(layer, expand_scales(ScaleSpec(0.7, 2.2, 0.3)))
        s = layer.canvas_side
        for a in aset.anchors:
            assert 0 < a.box.cx < s and 0 < a.box.cy < s
        # corner cell at max scale overhangs but is stored unclipped
        big = [a for a in aset.anchors if a.cell == (0, 0) and a.scale == 2.2][0]
        assert big.box.x0 < 0

    def test_min_max_side_matches_coverage(self):
        layer = AnchorLayerSpec(grids=(7,))
        scales = expand_scales(ScaleSpec(0.7, 2.2, 0.3))
        aset = build_grid(layer, scales)
        sides = [a.box.w for a in aset.anchors]
        s = layer.canvas_side
        assert min(sides) == pytest.approx(coverage(min(scales), 7) * s, abs=1e-12)
        assert max(sides) == pytest.approx(coverage(max(scales), 7) * s, abs=1e-12)

    def test_boxes_array_matches_anchors(self):
        aset = build_grid(AnchorLayerSpec(grids=(4,)), [1.0, 2.0])
        arr = aset.boxes_array()
        assert arr.shape == (32, 4)
        for row, a in zip(arr, aset.anchors):
            assert tuple(row) == (a.box.cx, a.box.cy, a.box.w, a.box.h)


class TestCoverage:
    def test_published_endpoints(self):
        assert coverage(0.7, 7) == pytest.approx(0.1000, abs=5e-5)
        assert coverage(2.2, 7) == pytest.approx(0.31428, abs=5e-5)

    def test_whole_canvas(self):
        assert coverage(1.0, 1) == 1.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            coverage(0.0, 7)
        with pytest.raises(ValueError):
            coverage(1.0, 0)


class TestRecommendScales:
    def test_inverts_published_design(self):
        # ratio range [0.10, 0.314] at G=7 with 6 steps recovers (0.7, 2.2, 0.3)
        spec = recommend_scales([0.10, 0.314], g=7, margin=0.0, step_count=6)
        assert spec == ScaleSpec(0.7, 2.2, 0.3)
        assert coverage(spec.start, 7) <= 0.10 + 1e-12
        assert coverage(spec.stop, 7) >= 0.314 - 1e-12

    def test_degenerate_histogram_widens(self):
        spec = recommend_scales([1 / 7] * 50, g=7, margin=0.02, step_count=3)
        assert spec.start == pytest.approx(0.95)
        assert spec.stop == pytest.approx(1.05)
        assert spec.stop - spec.start >= 0.1 - 1e-12

    def test_step_count_validation(self):
        with pytest.raises(ValueError):
            recommend_scales([0.2, 0.3], g=7, step_count=1)

    def test_containment_property_random(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            g = int(rng.integers(1, 15))
            lo = rng.uniform(0.06 / g, 0.5)
            hi = rng.uniform(lo, min(1.0, lo + 0.6))
            ratios = rng.uniform(lo, hi, size=int(rng.integers(2, 60)))
            step_count = int(rng.integers(2, 9))
            spec = recommend_scales(ratios, g=g, margin=0.0, step_count=step_count)
            scales = expand_scales(spec)
            assert len(scales) == step_count
            # containment: [cov(start), cov(stop)] spans the data; the
            # generator keeps q_lo*G above one grain so the low end holds
            assert coverage(spec.start, g) <= ratios.min() + 1e-9
            assert coverage(spec.stop, g) >= ratios.max() - 1e-9

    def test_phantom_band_contained(self):
        rng = np.random.default_rng(0)
        ratios = rng.uniform(0.10, 0.30, 500)
        spec = recommend_scales(ratios, g=7, margin=0.02, step_count=6)
        scales = expand_scales(spec)
        covs = [coverage(s, 7) for s in scales]
        # margin trims 2% tails; the recommended band must cover the core
        assert min(covs) <= np.quantile(ratios, 0.02) + 1e-9
        assert max(covs) >= np.quantile(ratios, 0.98) - 1e-9


class TestDesignReport:
    def test_report_fields(self):
        rep = design_report(ScaleSpec(0.7, 2.2, 0.3), g=7)
        assert rep["total_anchors"] == 294
        assert rep["scales"] == pytest.approx([0.7, 1.0, 1.3, 1.6, 1.9, 2.2])
        assert rep["coverage"][0] == pytest.approx(0.1)
        assert rep["coverage"][-1] == pytest.approx(2.2 / 7)
