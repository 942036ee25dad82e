import numpy as np
import pytest

from roidet.anchors import AnchorLayerSpec, ScaleSpec, build_grid, expand_scales
from roidet.detector import (
    DetectorConfig,
    build_detector,
    load_checkpoint,
    save_checkpoint,
)


def small_cfg(**kw):
    defaults = dict(channels=(4, 4, 8, 8, 8), head_grids=(7,), anchors_per_cell=2)
    defaults.update(kw)
    return DetectorConfig(**defaults)


class TestBuildDetector:
    def test_output_shapes_layer7_six_scales(self):
        cfg = DetectorConfig(head_grids=(7,), anchors_per_cell=6)
        model = build_detector(cfg, np.random.default_rng(0))
        logits, offsets = model.forward(np.zeros((2, 1, 224, 224)))
        assert logits.shape == (2, 294)
        assert offsets.shape == (2, 294, 4)

    def test_output_shapes_layer421(self):
        cfg = small_cfg(head_grids=(4, 2, 1), anchors_per_cell=3)
        model = build_detector(cfg, np.random.default_rng(0))
        logits, offsets = model.forward(np.zeros((1, 1, 224, 224)))
        assert logits.shape == (1, 63)
        assert offsets.shape == (1, 63, 4)

    def test_same_seed_same_parameters(self):
        cfg = small_cfg()
        a = build_detector(cfg, np.random.default_rng(42))
        b = build_detector(cfg, np.random.default_rng(42))
        assert a.order == b.order
        for n in a.order:
            assert np.array_equal(a.params[n].data, b.params[n].data)

    def test_cls_bias_prior(self):
        model = build_detector(small_cfg(), np.random.default_rng(0))
        bias = model.params["head7.cls.b"].data
        assert np.all(bias == -2.0)
        # sigmoid(-2) ~ 0.12 foreground prior
        assert 1 / (1 + np.exp(2.0)) == pytest.approx(0.119, abs=1e-3)

    def test_invalid_grid_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            DetectorConfig(head_grids=(5,))

    def test_group_split_covers_all_params(self):
        cfg = small_cfg(head_grids=(4, 2, 1), anchors_per_cell=3)
        model = build_detector(cfg, np.random.default_rng(0))
        groups = model.group_names()
        flat = groups["early"] + groups["late"] + groups["head"]
        assert sorted(flat) == sorted(model.order)


class TestForward:
    def test_zero_image_finite(self):
        model = build_detector(small_cfg(), np.random.default_rng(1))
        logits, offsets = model.forward(np.zeros((1, 1, 224, 224)))
        assert np.all(np.isfinite(logits.data))
        assert np.all(np.isfinite(offsets.data))

    def test_batch_independence(self):
        model = build_detector(small_cfg(), np.random.default_rng(2))
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (1, 1, 224, 224))
        batch = np.concatenate([img, img], axis=0)
        logits, offsets = model.forward(batch)
        assert np.array_equal(logits.data[0], logits.data[1])
        assert np.array_equal(offsets.data[0], offsets.data[1])

    def test_permutation_equivariance(self):
        model = build_detector(small_cfg(), np.random.default_rng(4))
        rng = np.random.default_rng(5)
        batch = rng.uniform(0, 1, (3, 1, 224, 224))
        logits, _ = model.forward(batch)
        perm = [2, 0, 1]
        logits_p, _ = model.forward(batch[perm])
        assert np.array_equal(logits_p.data, logits.data[perm])

    def test_deterministic_forward(self):
        model = build_detector(small_cfg(), np.random.default_rng(6))
        rng = np.random.default_rng(7)
        batch = rng.uniform(0, 1, (1, 1, 224, 224))
        a, _ = model.forward(batch)
        b, _ = model.forward(batch)
        assert np.array_equal(a.data, b.data)

    def test_bad_batch_shape_rejected(self):
        model = build_detector(small_cfg(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.forward(np.zeros((1, 1, 100, 100)))


class TestAnchorOrderingContract:
    def test_scale_channel_maps_to_anchor_order(self):
        # zero the cls kernel and give each per-cell anchor channel its own
        # bias; logits must then replay the anchor-set ordering exactly
        cfg = small_cfg(head_grids=(7,), anchors_per_cell=3)
        model = build_detector(cfg, np.random.default_rng(0))
        model.params["head7.cls.w"].data[:] = 0.0
        model.params["head7.cls.b"].data[:] = [10.0, 20.0, 30.0]
        logits, _ = model.forward(np.zeros((1, 1, 224, 224)))
        scales = [0.7, 1.0, 1.3]
        aset = build_grid(AnchorLayerSpec(grids=(7,)), scales)
        assert aset.total == logits.shape[1]
        want = np.array([10.0 + 10.0 * scales.index(a.scale) for a in aset.anchors])
        assert np.array_equal(logits.data[0], want)

    def test_spatial_cell_maps_to_anchor_order(self):
        # brightness-tracking backbone: every conv kernel averages its
        # input, so the hottest 7x7 cell follows the bright patch
        cfg = small_cfg(head_grids=(7,), anchors_per_cell=2)
        model = build_detector(cfg, np.random.default_rng(0))
        for s in range(5):
            w = model.params[f"backbone{s}.w"]
            w.data[:] = 1.0 / (w.data.shape[1] * 9)
            model.params[f"backbone{s}.b"].data[:] = 0.0
        cls_w = model.params["head7.cls.w"]
        cls_w.data[:] = 0.0
        cls_w.data[:, :, 1, 1] = 1.0  # center tap only
        model.params["head7.cls.b"].data[:] = 0.0

        img = np.zeros((1, 1, 224, 224))
        row, col = 2, 5
        img[0, 0, row * 32:(row + 1) * 32, col * 32:(col + 1) * 32] = 1.0
        logits, _ = model.forward(img)
        aset = build_grid(AnchorLayerSpec(grids=(7,)), [1.0, 2.0])
        hot = int(np.argmax(logits.data[0]))
        assert aset.anchors[hot].cell == (row, col)

    def test_total_matches_anchorset_for_table_settings(self):
        for grids, spec, k in [
            ((7,), ScaleSpec(0.7, 2.2, 0.3), 6),
            ((4, 2, 1), ScaleSpec(0.7, 1.3, 0.3), 3),
            ((14,), ScaleSpec(0.7, 2.2, 0.05), 31),
        ]:
            cfg = small_cfg(head_grids=grids, anchors_per_cell=k)
            aset = build_grid(AnchorLayerSpec(grids=grids), expand_scales(spec))
            assert cfg.total_anchors == aset.total


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg(head_grids=(7,), anchors_per_cell=3)
        model = build_detector(cfg, np.random.default_rng(9))
        path = tmp_path / "model.roidet"
        save_checkpoint(model, path, extra={"scales": [0.7, 1.0, 1.3]})
        loaded, extra = load_checkpoint(path)
        assert extra == {"scales": [0.7, 1.0, 1.3]}
        assert loaded.config == cfg
        assert loaded.order == model.order
        for n in model.order:
            assert np.array_equal(loaded.params[n].data, model.params[n].data)
        # forward agreement
        rng = np.random.default_rng(1)
        batch = rng.uniform(0, 1, (1, 1, 224, 224))
        a, _ = model.forward(batch)
        b, _ = loaded.forward(batch)
        assert np.array_equal(a.data, b.data)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_truncated_rejected(self, tmp_path):
        cfg = small_cfg()
        model = build_detector(cfg, np.random.default_rng(0))
        path = tmp_path / "model.roidet"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        cfg = small_cfg()
        model = build_detector(cfg, np.random.default_rng(0))
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert p1.read_bytes() == p2.read_bytes()
