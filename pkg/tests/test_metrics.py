import math

import numpy as np
import pytest

from blendtrack import blendshapes as bs
from blendtrack.mesh import canthal_scale, default_face_mesh
from blendtrack.metrics import (
    aggregate_errors,
    improvement_ratio,
    mean_sem,
    pearson_per_blendshape,
    vertex_error,
    vertex_error_batch,
)

from oracles import naive_vertex_error, two_pass_pearson


@pytest.fixture(scope="module")
def mesh():
    return default_face_mesh()


@pytest.fixture(scope="module")
def scale(mesh):
    return canthal_scale(mesh, 32.0)


class TestVertexError:
    def test_identical_weights_zero(self, mesh, scale):
        w = np.random.default_rng(0).random(52)
        assert np.all(vertex_error(mesh, scale, w, w) == 0.0)

    def test_single_shape_distance(self, mesh, scale):
        name = "jawOpen"
        idx = bs.INDEX[name]
        gt = np.zeros(52)
        pred = np.zeros(52)
        pred[idx] = 0.6
        errors = vertex_error(mesh, scale, gt, pred)
        ev = mesh.eval_indices()
        expected = 0.6 * np.linalg.norm(mesh.deltas[name][ev], axis=1) * scale.millimeters_per_model_unit
        assert np.allclose(errors, expected, atol=1e-12)

    def test_symmetric_in_arguments(self, mesh, scale):
        rng = np.random.default_rng(1)
        gt, pred = rng.random(52), rng.random(52)
        assert np.allclose(vertex_error(mesh, scale, gt, pred),
                           vertex_error(mesh, scale, pred, gt))

    def test_matches_naive_oracle_100_pairs(self, mesh, scale):
        rng = np.random.default_rng(2)
        for _ in range(100):
            gt, pred = rng.random(52), rng.random(52)
            fast = vertex_error(mesh, scale, gt, pred)
            slow = naive_vertex_error(mesh, scale, gt, pred)
            # tolerance in model units scaled to mm
            assert np.allclose(fast, slow, atol=1e-9 * scale.millimeters_per_model_unit)

    def test_batch_matches_single(self, mesh, scale):
        rng = np.random.default_rng(3)
        gts = rng.random((8, 52))
        preds = rng.random((8, 52))
        batched = vertex_error_batch(mesh, scale, gts, preds)
        for i in range(8):
            assert np.allclose(batched[i], vertex_error(mesh, scale, gts[i], preds[i]))


class TestAggregate:
    REGIONS = tuple(["eye"] * 6 + ["mouth"] * 7)

    def test_single_zero_sample(self):
        report = aggregate_errors(np.zeros((1, 13)), self.REGIONS)
        assert report.overall_mean_mm == 0.0
        assert report.eye_mean_mm == 0.0
        assert report.mouth_mean_mm == 0.0
        assert report.sample_count == 1

    def test_two_sample_mean(self):
        samples = np.stack([np.full(13, 1.0), np.full(13, 3.0)])
        report = aggregate_errors(samples, self.REGIONS)
        assert report.overall_mean_mm == pytest.approx(2.0)
        assert np.allclose(report.per_vertex_mm, 2.0)

    def test_region_split(self):
        sample = np.concatenate([np.full(6, 1.0), np.full(7, 3.0)])[None, :]
        report = aggregate_errors(sample, self.REGIONS)
        assert report.eye_mean_mm == pytest.approx(1.0)
        assert report.mouth_mean_mm == pytest.approx(3.0)
        assert report.overall_mean_mm == pytest.approx((6 * 1.0 + 7 * 3.0) / 13)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_errors(np.zeros((0, 13)), self.REGIONS)

    def test_json_keys(self):
        doc = aggregate_errors(np.zeros((1, 13)), self.REGIONS).to_json_dict()
        assert set(doc) == {"per_vertex_mm", "eye_mean_mm", "mouth_mean_mm",
                            "overall_mean_mm", "sample_count"}


class TestImprovement:
    def test_published_same_location_ratio(self):
        assert improvement_ratio(1.95, 1.37) * 100 == pytest.approx(42.3, abs=0.05)

    def test_published_another_location_ratio(self):
        assert improvement_ratio(1.95, 1.52) * 100 == pytest.approx(28.3, abs=0.05)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            improvement_ratio(1.0, 0.0)


class TestMeanSem:
    def test_basic(self):
        mean, sem = mean_sem([1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0)
        assert sem == pytest.approx(1.0 / math.sqrt(3))

    def test_single_value(self):
        assert mean_sem([5.0]) == (5.0, 0.0)


class TestPearson:
    def test_self_correlation(self):
        rng = np.random.default_rng(4)
        labels = rng.random((50, 52))
        report = pearson_per_blendshape(labels, labels)
        assert np.allclose(report.per_blendshape_r, 1.0)
        assert report.overall_mean == pytest.approx(1.0)

    def test_perfect_anticorrelation(self):
        rng = np.random.default_rng(5)
        labels = rng.random((50, 52))
        report = pearson_per_blendshape(1.0 - labels, labels)
        assert np.allclose(report.per_blendshape_r, -1.0)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(6)
        preds = rng.random((100, 52))
        labels = rng.random((100, 52))
        report = pearson_per_blendshape(preds, labels)
        for ch in range(52):
            expected = two_pass_pearson(preds[:, ch].tolist(), labels[:, ch].tolist())
            assert report.per_blendshape_r[ch] == pytest.approx(expected, abs=1e-12)

    def test_zero_variance_channel_undefined_and_excluded(self):
        rng = np.random.default_rng(7)
        preds = rng.random((30, 52))
        labels = rng.random((30, 52))
        labels[:, bs.INDEX["tongueOut"]] = 0.5
        report = pearson_per_blendshape(preds, labels)
        assert math.isnan(report.per_blendshape_r[bs.INDEX["tongueOut"]])
        assert math.isnan(report.region_means["tongue"])
        defined = report.per_blendshape_r[~np.isnan(report.per_blendshape_r)]
        assert report.overall_mean == pytest.approx(defined.mean())
        assert report.to_json_dict()["per_blendshape_r"][bs.INDEX["tongueOut"]] is None

    def test_affine_invariance(self):
        rng = np.random.default_rng(8)
        preds = rng.random((60, 52))
        labels = rng.random((60, 52))
        base = pearson_per_blendshape(preds, labels)
        shifted = pearson_per_blendshape(preds * 0.2 + 0.3, labels)
        assert np.allclose(base.per_blendshape_r, shifted.per_blendshape_r, atol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pearson_per_blendshape(np.zeros((3, 52)), np.zeros((4, 52)))

    def test_region_means_group_by_table(self):
        rng = np.random.default_rng(9)
        preds = rng.random((40, 52))
        labels = rng.random((40, 52))
        report = pearson_per_blendshape(preds, labels)
        for region, names in bs.REGIONS.items():
            vals = [report.per_blendshape_r[bs.INDEX[n]] for n in names]
            assert report.region_means[region] == pytest.approx(np.mean(vals))
