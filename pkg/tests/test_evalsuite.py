import math

import numpy as np
import pytest

from magic import data, evalsuite as ev, toyworld as tw
from magic.checkpoint import digest
from magic.rngstream import stream

_CACHE = {}


def scenes(n=64):
    key = ("scenes", n)
    if key not in _CACHE:
        _CACHE[key] = data.SceneDataset(
            range(n), size=32, modalities=("edge", "segmentation", "depth")
        )
    return _CACHE[key]


def extractor():
    if "ext" not in _CACHE:
        net, losses = ev.train_extractor(scenes(128), steps=250, batch_size=32, seed=0)
        _CACHE["ext"] = (net, losses)
    return _CACHE["ext"]


class TestFrechet:
    def test_identical_sets_zero(self):
        rng = stream(0, "fd")
        a = rng.standard_normal((50, 8))
        assert ev.frechet_distance(a, a.copy()) < 1e-8

    def test_unit_mean_shift_1d(self):
        a = np.array([[-1.0], [1.0]]) / math.sqrt(2)  # mean 0, unbiased var 1
        b = a + 1.0  # mean 1, var 1
        assert ev.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_variance_gap_1d(self):
        a = np.array([[-1.0], [1.0]]) / math.sqrt(2)  # var 1
        b = 2.0 * a  # var 4
        # 0 + 1 + 4 - 2*2 = 1
        assert ev.frechet_distance(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry_and_nonnegativity(self):
        rng = stream(1, "fd")
        a = rng.standard_normal((40, 6))
        b = rng.standard_normal((30, 6)) + 0.5
        d_ab = ev.frechet_distance(a, b)
        d_ba = ev.frechet_distance(b, a)
        assert d_ab >= 0
        assert d_ab == pytest.approx(d_ba, rel=1e-9)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            ev.frechet_distance(np.ones((1, 3)), np.ones((5, 3)))

    def test_column_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ev.frechet_distance(np.ones((5, 3)), np.ones((5, 4)))


class TestGuidanceFidelity:
    def test_ground_truth_scene_perfect_edge_f1(self):
        sc = tw.generate_scene(3)
        maps = {"edge": tw.extract_modality(sc, "edge")}
        mask = np.ones((1, 32, 32), dtype=np.float32)
        assert ev.edge_f1(sc.image, maps["edge"], mask) == 1.0

    def test_disjoint_edges_zero(self):
        sc = tw.generate_scene(3)
        flat = np.full((1, 32, 32), 0.5, dtype=np.float32)
        mask = np.ones((1, 32, 32), dtype=np.float32)
        assert ev.edge_f1(flat, tw.extract_modality(sc, "edge"), mask) == 0.0

    def test_f1_arithmetic(self):
        # 100 guidance pixels, 50 reproduced, no extras: P=1, R=0.5, F1=2/3
        ref = np.zeros(1024, dtype=bool)
        ref[:100] = True
        pred = np.zeros(1024, dtype=bool)
        pred[:50] = True
        assert ev._f1(pred, ref) == pytest.approx(2.0 / 3.0)

    def test_masked_region_only(self):
        sc = tw.generate_scene(5)
        maps = {
            "edge": tw.extract_modality(sc, "edge"),
            "segmentation": tw.extract_modality(sc, "segmentation"),
            "depth": tw.extract_modality(sc, "depth"),
        }
        mask = np.zeros((1, 32, 32), dtype=np.float32)
        mask[:, :16] = 1.0
        base = ev.guidance_fidelity(sc.image, maps, mask)
        noisy = sc.image.copy()
        noisy[:, 16:] = 0.123  # perturb only unmasked pixels
        pert = ev.guidance_fidelity(noisy, maps, mask)
        assert base == pert

    def test_empty_mask_absent(self):
        sc = tw.generate_scene(5)
        maps = {"edge": tw.extract_modality(sc, "edge")}
        mask = np.zeros((1, 32, 32), dtype=np.float32)
        assert ev.guidance_fidelity(sc.image, maps, mask) == {"edge_f1": None}

    def test_flat_two_class_seg_iou_perfect(self):
        img = np.zeros((1, 32, 32), dtype=np.float32)
        img[0, :, 16:] = 1.0
        onehot = np.zeros((4, 32, 32), dtype=np.float32)
        onehot[0, :, :16] = 1.0
        onehot[1, :, 16:] = 1.0
        mask = np.ones((1, 32, 32), dtype=np.float32)
        assert ev.seg_iou(img, onehot, mask) == 1.0

    def test_scene_seg_iou_beats_shuffled(self):
        sc = tw.generate_scene(8)
        onehot = tw.extract_modality(sc, "segmentation")
        mask = np.ones((1, 32, 32), dtype=np.float32)
        good = ev.seg_iou(sc.image, onehot, mask)
        rng = stream(0, "shuffle")
        scrambled = sc.image.reshape(-1).copy()
        rng.shuffle(scrambled)
        bad = ev.seg_iou(scrambled.reshape(1, 32, 32), onehot, mask)
        assert good > bad


class TestFeaturePull:
    def test_at_centroid_zero(self):
        rng = stream(0, "pull")
        a = rng.standard_normal((10, 4))
        b = rng.standard_normal((10, 4)) + 5.0
        blended = np.tile(a.mean(axis=0), (4, 1))
        assert ev.feature_pull_statistic({"a": a, "b": b}, blended) == pytest.approx(0.0)

    def test_midpoint_half(self):
        a = np.tile(np.array([0.0, 0.0]), (3, 1))
        b = np.tile(np.array([2.0, 0.0]), (3, 1))
        blended = np.tile(np.array([1.0, 0.0]), (3, 1))
        assert ev.feature_pull_statistic({"a": a, "b": b}, blended) == pytest.approx(0.5)

    def test_single_modality_rejected(self):
        with pytest.raises(ValueError):
            ev.feature_pull_statistic({"a": np.ones((3, 2))}, np.ones((3, 2)))


class TestExtractor:
    def test_training_learns(self):
        net, losses = extractor()
        ds = scenes(128)
        acc = net.accuracy(ds.images, ds.class_ids)
        assert acc > 0.5  # well above the 1/3 chance level
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_feature_shape_and_determinism(self):
        net, _ = extractor()
        ds = scenes(16)
        f1 = net.features(ds.images)
        f2 = net.features(ds.images)
        assert f1.shape == (16, ev.FEATURE_DIM)
        assert np.array_equal(f1, f2)

    def test_checkpoint_roundtrip(self, tmp_path):
        net, _ = extractor()
        p = tmp_path / "ext.mgk"
        ev.save_extractor(p, net, 0.95)
        loaded, meta = ev.load_extractor(p)
        assert digest(loaded.state()) == digest(net.state())
        assert float(meta["test_accuracy"]) == 0.95


class TestEvaluateRun:
    def test_reference_vs_itself(self):
        net, _ = extractor()
        ds = scenes(32)
        guidance_sets = [
            {
                "edge": ds.conds["edge"][i],
                "segmentation": ds.conds["segmentation"][i],
                "depth": ds.conds["depth"][i],
            }
            for i in range(len(ds))
        ]
        masks = np.ones_like(ds.masks)
        rep = ev.evaluate_run(
            ds.images, ds.images, masks, guidance_sets, ds.images, net, 0.95
        )
        assert rep.toy_fid < 1e-6
        assert rep.toy_fid_valid
        assert rep.preservation_exact
        assert rep.edge_f1 == 1.0
        assert rep.n_samples == 32

    def test_accuracy_gate_marks_invalid(self):
        net, _ = extractor()
        ds = scenes(8)
        guidance_sets = [{} for _ in range(len(ds))]
        rep = ev.evaluate_run(
            ds.images, ds.images, ds.masks, guidance_sets, ds.images, net, 0.5
        )
        assert not rep.toy_fid_valid

    def test_preservation_violation_detected(self):
        net, _ = extractor()
        ds = scenes(8)
        outputs = ds.images.copy()
        outputs[0] += 0.25  # clobbers known pixels too
        guidance_sets = [{} for _ in range(len(ds))]
        masks = ds.masks.copy()
        masks[0] = 0.0
        rep = ev.evaluate_run(outputs, ds.images, masks, guidance_sets, ds.images, net, 0.95)
        assert not rep.preservation_exact

    def test_csv_output(self, tmp_path):
        net, _ = extractor()
        ds = scenes(8)
        guidance_sets = [{} for _ in range(len(ds))]
        rep = ev.evaluate_run(
            ds.images, ds.images, ds.masks, guidance_sets, ds.images, net, 0.95
        )
        p = tmp_path / "metrics.csv"
        ev.write_report_csv(p, [rep, rep], labels=["a", "b"])
        lines = p.read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("label,toy_fid,")
