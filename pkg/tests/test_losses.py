import math

import numpy as np
import pytest

import entroad.autodiff as ad
from entroad.errors import ConfigError, DataError
from entroad.losses import (
    LossConfig,
    bce_image,
    branch_loss,
    dice,
    focal,
    seg_loss,
    stage1_loss,
    stage2_loss,
)


def fd_grad(loss_fn, pred, h=1e-6):
    g = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        up = np.array(pred)
        up[idx] += h
        down = np.array(pred)
        down[idx] -= h
        g[idx] = (loss_fn(up) - loss_fn(down)) / (2 * h)
    return g


def tape_grad(loss_builder, pred):
    t = ad.Tensor(np.asarray(pred, dtype=np.float64), requires_grad=True)
    loss_builder(t).backward()
    return t.grad


def assert_grads_match(loss_builder, pred, tol=1e-4):
    analytic = tape_grad(loss_builder, pred)
    numeric = fd_grad(lambda x: float(ad.value_of(loss_builder(x))), pred)
    for idx in np.ndindex(pred.shape):
        rel = ad.relative_error(float(analytic[idx]), float(numeric[idx]))
        assert rel < tol, f"{idx}: analytic {analytic[idx]} vs fd {numeric[idx]}"


class TestBceImage:
    def test_perfect_prediction_near_zero(self):
        assert float(ad.value_of(bce_image(1.0, 1))) <= 1e-7
        assert float(ad.value_of(bce_image(0.0, 0))) <= 1e-7

    def test_half_prediction_gives_log2(self):
        assert float(ad.value_of(bce_image(0.5, 0))) == pytest.approx(math.log(2), abs=1e-7)
        assert float(ad.value_of(bce_image(0.5, 1))) == pytest.approx(math.log(2), abs=1e-7)

    def test_gradient_matches_fd(self, rng):
        for y in (0, 1):
            for a in rng.uniform(0.05, 0.95, size=20):
                t = ad.Tensor(np.array(a), requires_grad=True)
                bce_image(t, y).backward()
                h = 1e-6
                numeric = (
                    float(ad.value_of(bce_image(a + h, y))) - float(ad.value_of(bce_image(a - h, y)))
                ) / (2 * h)
                assert ad.relative_error(float(t.grad), numeric) < 1e-5


class TestFocal:
    def test_perfect_prediction_near_zero(self):
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert float(ad.value_of(focal(target, target, 0.25, 2.0))) <= 1e-6

    def test_constant_half_prediction_all_negative(self):
        pred = np.full((4, 4), 0.5)
        target = np.zeros((4, 4))
        value = float(ad.value_of(focal(pred, target, 0.25, 2.0)))
        expected = 0.75 * 0.25 * math.log(2)  # per pixel, hand evaluation
        assert value == pytest.approx(expected, abs=1e-4)
        assert value == pytest.approx(0.1300, abs=1e-3)

    def test_gamma_zero_reduces_to_scaled_bce(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(5, 5))
        target = (rng.random((5, 5)) < 0.4).astype(float)
        got = float(ad.value_of(focal(pred, target, 0.5, 0.0)))
        bce = -(target * np.log(pred + 1e-8) + (1 - target) * np.log(1 - pred + 1e-8)).mean()
        assert got == pytest.approx(0.5 * bce, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DataError):
            focal(np.zeros((2, 2)), np.zeros((2, 3)), 0.25, 2.0)

    def test_gradient_matches_fd_interior(self, rng):
        pred = rng.uniform(0.01, 0.99, size=(5, 5))
        target = (rng.random((5, 5)) < 0.5).astype(float)
        assert_grads_match(lambda t: focal(t, target, 0.25, 2.0), pred)


class TestDice:
    def test_perfect_binary_overlap_near_zero(self):
        target = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert float(ad.value_of(dice(target, target))) <= 1e-6

    def test_all_zero_prediction_on_positives_near_one(self):
        target = np.ones((3, 3))
        value = float(ad.value_of(dice(np.zeros((3, 3)), target)))
        assert value == pytest.approx(1.0, abs=1e-6)

    def test_all_one_prediction_half_positive_gives_third(self):
        target = np.zeros((4, 4))
        target[:2] = 1.0
        value = float(ad.value_of(dice(np.ones((4, 4)), target)))
        assert value == pytest.approx(1.0 / 3.0, abs=1e-7)

    def test_gradient_matches_fd_interior(self, rng):
        pred = rng.uniform(0.01, 0.99, size=(4, 4))
        target = (rng.random((4, 4)) < 0.5).astype(float)
        assert_grads_match(lambda t: dice(t, target), pred)


class TestSegLoss:
    def test_zero_dice_weight_equals_focal(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(3, 3))
        target = (rng.random((3, 3)) < 0.5).astype(float)
        cfg = LossConfig(lambda_d=0.0)
        got = float(ad.value_of(seg_loss(pred, target, cfg)))
        assert got == pytest.approx(float(ad.value_of(focal(pred, target, cfg.alpha_f, cfg.gamma))), abs=1e-12)

    def test_perfect_prediction_small(self):
        target = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert float(ad.value_of(seg_loss(target, target, LossConfig()))) <= 1e-6

    def test_affine_in_dice_weight(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(3, 3))
        target = (rng.random((3, 3)) < 0.5).astype(float)
        l0 = float(ad.value_of(seg_loss(pred, target, LossConfig(lambda_d=0.0))))
        l2 = float(ad.value_of(seg_loss(pred, target, LossConfig(lambda_d=2.0))))
        d = float(ad.value_of(dice(pred, target)))
        assert (l2 - l0) / 2.0 == pytest.approx(d, abs=1e-9)


class TestStage1Loss:
    def test_perfect_components_small(self):
        target = np.array([[1.0, 0.0], [0.0, 0.0]])
        value = float(ad.value_of(stage1_loss(target, target, 1.0, 1, LossConfig())))
        assert value <= 1e-5

    def test_normal_image_all_zero(self):
        target = np.zeros((3, 3))
        value = float(ad.value_of(stage1_loss(np.zeros((3, 3)), target, 0.0, 0, LossConfig())))
        assert value <= 1e-5

    def test_equals_sum_of_parts(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(3, 3))
        target = (rng.random((3, 3)) < 0.5).astype(float)
        a_hat, y = 0.3, 1
        cfg = LossConfig()
        total = float(ad.value_of(stage1_loss(pred, target, a_hat, y, cfg)))
        parts = float(ad.value_of(seg_loss(pred, target, cfg))) + float(ad.value_of(bce_image(a_hat, y)))
        assert total == pytest.approx(parts, abs=1e-12)


class TestBranchLoss:
    def test_perfect_maps_small(self):
        target = np.array([[1.0, 0.0], [0.0, 0.0]])
        layers = [(target, 1.0 - target), (target, 1.0 - target)]
        assert float(ad.value_of(branch_loss(layers, target, LossConfig()))) <= 2e-5

    def test_single_layer_decomposition(self, rng):
        pred_a = rng.uniform(0.05, 0.95, size=(3, 3))
        pred_n = rng.uniform(0.05, 0.95, size=(3, 3))
        target = (rng.random((3, 3)) < 0.5).astype(float)
        cfg = LossConfig()
        got = float(ad.value_of(branch_loss([(pred_a, pred_n)], target, cfg)))
        expected = float(ad.value_of(seg_loss(pred_a, target, cfg))) + cfg.lambda_d * float(
            ad.value_of(dice(pred_n, 1.0 - target))
        )
        assert got == pytest.approx(expected, abs=1e-12)

    def test_two_layer_case_matches_straight_line_oracle(self, rng):
        cfg = LossConfig(alpha_f=0.25, gamma=2.0, lambda_d=1.0)
        target = (rng.random((2, 2)) < 0.5).astype(float)
        layers = [
            (rng.uniform(0.1, 0.9, size=(2, 2)), rng.uniform(0.1, 0.9, size=(2, 2)))
            for _ in range(2)
        ]
        got = float(ad.value_of(branch_loss(layers, target, cfg)))

        def focal_np(m, y):
            pos = 0.25 * y * (1 - m) ** 2 * np.log(m + 1e-8)
            neg = 0.75 * (1 - y) * m**2 * np.log(1 - m + 1e-8)
            return -(pos + neg).mean()

        def dice_np(m, y):
            return 1 - (2 * (m * y).sum() + 1e-8) / (m.sum() + y.sum() + 1e-8)

        oracle = 0.0
        for pred_a, pred_n in layers:
            oracle += focal_np(pred_a, target) + dice_np(pred_a, target) + dice_np(pred_n, 1 - target)
        assert got == pytest.approx(oracle, abs=1e-6)

    def test_empty_layer_list_rejected(self):
        with pytest.raises(DataError):
            branch_loss([], np.zeros((2, 2)), LossConfig())


class TestStage2Loss:
    def test_equal_weights_give_mean(self):
        cfg = LossConfig(lambda_a=1.0, lambda_b=1.0)
        got = float(ad.value_of(stage2_loss(2.0, 4.0, cfg)))
        assert got == pytest.approx(3.0, abs=1e-7)

    def test_reference_weights(self):
        cfg = LossConfig(lambda_a=0.7, lambda_b=0.3)
        got = float(ad.value_of(stage2_loss(1.0, 2.0, cfg)))
        assert got == pytest.approx(0.7 * 1.0 + 0.3 * 2.0, abs=1e-7)

    def test_scale_invariance(self):
        # the stability epsilon in the weight normalization shifts the two
        # evaluations by ~6e-9, so equality holds at the loss-oracle tolerance
        a = float(ad.value_of(stage2_loss(1.3, 0.4, LossConfig(lambda_a=0.7, lambda_b=0.3))))
        b = float(ad.value_of(stage2_loss(1.3, 0.4, LossConfig(lambda_a=7.0, lambda_b=3.0))))
        assert a == pytest.approx(b, abs=1e-6)

    def test_both_weights_zero_rejected(self):
        with pytest.raises(ConfigError):
            stage2_loss(1.0, 1.0, LossConfig(lambda_a=0.0, lambda_b=0.0))


class TestLossBounds:
    def test_losses_nonnegative_and_dice_bounded(self, rng):
        for _ in range(30):
            pred = rng.uniform(0.0, 1.0, size=(4, 4))
            target = (rng.random((4, 4)) < 0.5).astype(float)
            assert float(ad.value_of(focal(pred, target, 0.25, 2.0))) >= -1e-9
            d = float(ad.value_of(dice(pred, target)))
            assert -1e-9 <= d <= 1.0 + 1e-9
