import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfg import autodiff as ad
from bevfg.autodiff import Tensor
from bevfg.bev import (
    IGNORE_INDEX,
    BevHead,
    BevMap,
    bev_cross_entropy,
    collapse_to_bev,
    confusion_matrix,
    miou,
    predict_classes,
    standardize_channels,
)
from bevfg.errors import AllIgnored, ShapeMismatch
from bevfg.tmae import GridSpec, VoxelGrid

from oracles import brute_cross_entropy, brute_miou


def column_grid(feats, sigma):
    """VoxelGrid from ungated F x Nx x Ny x Nz features and Nx x Ny x Nz density."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return VoxelGrid.from_ungated(GridSpec(resolution=sigma.shape), np.asarray(feats, dtype=np.float64), sigma)


def random_maps(rng, shape, C, ignore_frac=0.2):
    gt = rng.integers(0, C, shape)
    gt[rng.random(shape) < ignore_frac] = IGNORE_INDEX
    return rng.integers(0, C, shape), gt


class TestBevMap:
    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            BevMap(np.array([[0, 7]]))

    def test_accepts_ignore(self):
        assert BevMap(np.array([[0, 255]])).shape == (1, 2)


class TestCollapse:
    def test_uniform_features(self):
        rng = np.random.default_rng(0)
        f = np.broadcast_to(np.array([0.3, -2.0])[:, None, None, None], (2, 3, 4, 5))
        out = collapse_to_bev(column_grid(f, rng.uniform(0.1, 3.0, (3, 4, 5))))
        np.testing.assert_allclose(out.data, np.broadcast_to(np.array([0.3, -2.0])[:, None, None], (2, 3, 5)), rtol=1e-6)

    def test_empty_column_zero(self):
        out = collapse_to_bev(column_grid(np.ones((2, 1, 3, 1)), np.zeros((1, 3, 1))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_two_voxel_hand_case(self):
        a, b = 0.8, -0.4
        out = collapse_to_bev(column_grid([[[[a], [b]]]], [[[1.0], [3.0]]]))
        assert out.data.ravel()[0] == pytest.approx((a + 3 * b) / 4, rel=1e-6)

    def test_eps_guard_value(self):
        out = collapse_to_bev(column_grid([[[[2.0], [2.0]]]], [[[1.0], [3.0]]]))
        assert out.data.ravel()[0] == 2.0 * 4.0 / (4.0 + 1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(3, 4, 5, 6))
        s = rng.uniform(0.5, 2.0, (4, 5, 6))
        base = collapse_to_bev(column_grid(f, s)).data
        # rescaling a column shifts the eps guard's relative weight, hence the tolerance
        scaled = collapse_to_bev(column_grid(f, s * 1000.0)).data
        np.testing.assert_allclose(scaled, base, atol=1e-6)
        big = collapse_to_bev(column_grid(f, s * 1e6)).data
        np.testing.assert_allclose(big, collapse_to_bev(column_grid(f, s * 3e6)).data, atol=1e-9)


class TestCrossEntropy:
    def test_confident_is_zero(self):
        gt = np.array([[0, 1], [3, 2]])
        logits = np.zeros((4, 2, 2))
        for (i, j), c in np.ndenumerate(gt):
            logits[c, i, j] = 1e6
        assert bev_cross_entropy(Tensor(logits), BevMap(gt)).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_c(self):
        gt = BevMap(np.zeros((3, 3)), num_classes=8)
        assert bev_cross_entropy(Tensor(np.zeros((8, 3, 3))), gt).item() == pytest.approx(np.log(8), rel=1e-15)

    def test_hand_2x2(self):
        logits = np.array([[[1.0, 0.0], [2.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]]])
        gt = np.array([[0, 0], [1, IGNORE_INDEX]])
        l1 = -np.log(np.e / (np.e + 1))
        l2 = -np.log(1 / (1 + np.e))
        l3 = -np.log(1 / (np.e**2 + 1))
        loss = bev_cross_entropy(Tensor(logits), BevMap(gt, num_classes=2))
        assert loss.item() == pytest.approx((l1 + l2 + l3) / 3, rel=1e-14)

    def test_all_ignored(self):
        with pytest.raises(AllIgnored):
            bev_cross_entropy(Tensor(np.zeros((4, 2, 2))), BevMap(np.full((2, 2), 255)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            bev_cross_entropy(Tensor(np.zeros((4, 2, 3))), BevMap(np.zeros((2, 2))))

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5, 6))
        _, gt = random_maps(rng, (5, 6), 4)
        shifted = logits + rng.normal(size=(1, 5, 6)) * 50
        a = bev_cross_entropy(Tensor(logits), BevMap(gt)).item()
        b = bev_cross_entropy(Tensor(shifted), BevMap(gt)).item()
        assert abs(a - b) < 1e-9

    def test_gradient_fd(self):
        rng = np.random.default_rng(2)
        _, gt = random_maps(rng, (3, 4), 4)
        assert ad.gradcheck(lambda x: bev_cross_entropy(x, BevMap(gt)), [rng.normal(size=(4, 3, 4))]) < 1e-6

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(size=(4, 4, 5)) * 5
            _, gt = random_maps(rng, (4, 5), 4)
            if (gt == IGNORE_INDEX).all():
                continue
            got = bev_cross_entropy(Tensor(logits), BevMap(gt)).item()
            assert abs(got - brute_cross_entropy(logits, gt)) < 1e-12


class TestMiou:
    def test_perfect(self):
        gt = np.array([[0, 1], [2, 3]])
        _, m = miou(gt, gt)
        assert m == 1.0

    def test_disjoint(self):
        iou, m = miou(np.zeros((2, 2)), np.ones((2, 2)), 2)
        np.testing.assert_array_equal(iou, [0.0, 0.0])
        assert m == 0.0

    def test_absent_class_excluded(self):
        iou, m = miou(np.array([[0, 1]]), np.array([[0, 1]]), 4)
        assert np.isnan(iou[2]) and np.isnan(iou[3]) and m == 1.0

    def test_ignore_cells_skipped(self):
        _, m = miou(np.array([[0, 3]]), np.array([[0, 255]]), 4)
        assert m == 1.0

    def test_mixed_4x4_brute_force(self):
        pred = np.array([[0, 0, 1, 2], [1, 1, 1, 2], [3, 0, 2, 2], [3, 3, 0, 1]])
        gt = np.array([[0, 1, 1, 2], [1, 1, 255, 2], [3, 0, 0, 2], [3, 2, 0, 1]])
        iou, m = miou(pred, gt)
        biou, bm = brute_miou(pred, gt, 4)
        np.testing.assert_allclose(iou, biou, rtol=0, atol=1e-12)
        assert abs(m - bm) < 1e-12

    def test_confusion_counts(self):
        cm = confusion_matrix(np.array([0, 1, 1, 5]), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 1]])

    def test_label_permutation(self):
        rng = np.random.default_rng(5)
        pred, gt = random_maps(rng, (6, 7), 4)
        perm = np.array([2, 0, 3, 1])
        gt_p = np.where(gt == IGNORE_INDEX, IGNORE_INDEX, perm[np.minimum(gt, 3)])
        assert miou(perm[pred], gt_p)[1] == pytest.approx(miou(pred, gt)[1], abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_maps(rng, (int(rng.integers(1, 6)), int(rng.integers(1, 6))), 4, 0.3)
    _, m = miou(pred, gt)
    assert np.isnan(m) or 0.0 <= m <= 1.0


class TestHead:
    def test_shapes_and_prediction(self):
        rng = np.random.default_rng(0)
        head = BevHead(rng, 6, 8)
        logits = head(Tensor(rng.normal(size=(6, 32, 48))))
        assert logits.shape == (4, 32, 48) and np.all(np.isfinite(logits.data))
        pred = predict_classes(logits)
        assert pred.dtype == np.uint8 and pred.max() < 4

    def test_standardized_channels(self):
        x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 6, 7))
        y = standardize_channels(Tensor(x)).data
        np.testing.assert_allclose(y.mean(axis=(1, 2)), 0.0, atol=1e-15)
        np.testing.assert_allclose(y.std(axis=(1, 2)), 1.0, rtol=1e-6)

    def test_constant_channel_maps_to_zero(self):
        y = standardize_channels(Tensor(np.full((2, 3, 3), 7.5))).data
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_logits_invariant_to_feature_scale(self):
        # pretrained backbones can shift and rescale every channel; the head sees the same
        # input up to the variance epsilon (relative error about eps / (2 var) = 5e-6 here)
        rng = np.random.default_rng(2)
        head = BevHead(rng, 6, 8)
        f = rng.normal(size=(6, 8, 10))
        scale, shift = rng.uniform(5.0, 20.0, (6, 1, 1)), rng.normal(0.0, 10.0, (6, 1, 1))
        np.testing.assert_allclose(head(Tensor(scale * f + shift)).data, head(Tensor(f)).data, rtol=1e-4, atol=1e-4)

    def test_standardize_gradient(self):
        x = np.random.default_rng(3).normal(size=(3, 4, 5))
        w = np.random.default_rng(4).normal(size=(3, 4, 5))
        assert ad.gradcheck(lambda t: ad.sum(standardize_channels(t) * w), [x]) < 1e-6
