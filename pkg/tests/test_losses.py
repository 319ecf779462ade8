import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmsdepth import autodiff as ad
from rmsdepth.errors import UntrainableSampleError
from rmsdepth.gradcheck import check_gradients
from rmsdepth.losses import (
    DepthNorm,
    LossWeights,
    composite_loss,
    eval_metrics,
    huber_value,
    log_denormalize,
    log_normalize,
    range_masks,
)

NORM = DepthNorm()
ONLY_LIN = LossWeights(0.0, 1.0, 0.0, 0.0)


def test_log_normalize_endpoints():
    assert log_normalize(0.5, NORM) == pytest.approx(-1.0, abs=1e-15)
    assert log_normalize(80.0, NORM) == pytest.approx(1.0, abs=1e-15)
    assert log_normalize(np.sqrt(40.0), NORM) == pytest.approx(0.0, abs=1e-15)
    assert log_normalize(200.0, NORM) == pytest.approx(1.0, abs=1e-15)


@given(st.floats(0.5, 80.0))
def test_log_normalize_round_trip(d):
    assert log_denormalize(log_normalize(d, NORM), NORM) == pytest.approx(d, rel=1e-12)


def test_log_normalize_var_matches_array():
    d = np.array([0.7, 3.0, 45.0])
    assert np.allclose(log_normalize(ad.const(d), NORM).data, log_normalize(d, NORM), atol=1e-14)


def test_huber_closed_forms():
    assert huber_value(2.0) == 2.0
    assert huber_value(10.0) == 37.5
    assert huber_value(-10.0) == 37.5


def test_huber_continuous_at_delta():
    eps = 1e-9 * 80.0
    lo, hi = huber_value(5.0 - eps), huber_value(5.0 + eps)
    assert abs(hi - lo) < 1e-6
    d_lo = (huber_value(5.0 - eps) - huber_value(5.0 - 2 * eps)) / eps
    d_hi = (huber_value(5.0 + 2 * eps) - huber_value(5.0 + eps)) / eps
    assert abs(d_hi - d_lo) < 1e-3


@pytest.mark.parametrize("r,expect", [(2.0, 2.0), (10.0, 37.5)])
def test_single_pixel_lin_term(r, expect):
    pred = np.array([[20.0 + r]])
    loss, parts = composite_loss(pred, np.array([[20.0]]), None, ONLY_LIN, NORM)
    assert parts["lin"] == pytest.approx(expect / 80.0, abs=1e-12)
    assert float(loss.data) == pytest.approx(expect / 80.0, abs=1e-12)


def test_perfect_prediction_zero_loss():
    gt = np.random.default_rng(0).uniform(1.0, 60.0, size=(2, 5, 6))
    sparse = np.where(np.random.default_rng(1).random(gt.shape) < 0.2, gt, 0.0)
    _, parts = composite_loss(gt, gt, sparse)
    assert all(abs(v) < 1e-12 for v in parts.values())


def test_sparse_terms_inactive_without_sparse():
    r = np.random.default_rng(2)
    pred = r.uniform(1.0, 60.0, size=(1, 4, 4))
    main = r.uniform(1.0, 60.0, size=(1, 4, 4))
    _, parts = composite_loss(pred, main, None)
    assert parts["sparse"] == 0.0
    expect_log = np.mean(np.abs(log_normalize(pred, NORM) - log_normalize(main, NORM)))
    assert parts["log"] == pytest.approx(expect_log, rel=1e-12)


def test_log_term_uses_sparse_target_when_given():
    pred = np.full((1, 2, 2), 10.0)
    main = np.full((1, 2, 2), 10.0)
    sparse = np.array([[[20.0, 0.0], [0.0, 0.0]]])
    _, parts = composite_loss(pred, main, sparse)
    assert parts["log"] == pytest.approx(log_normalize(20.0, NORM) - log_normalize(10.0, NORM), rel=1e-12)
    assert parts["sparse"] == pytest.approx(10.0 / 80.0, rel=1e-12)
    assert parts["lin"] == 0.0


def test_gradient_term_skips_invalid_pairs():
    pred = np.array([[[10.0, 20.0, 40.0]]])
    main = np.array([[[10.0, 0.0, 10.0]]])
    # no horizontally adjacent pair is valid, and there is one row
    _, parts = composite_loss(pred, main, None)
    assert parts["grad"] == 0.0
    main2 = np.array([[[10.0, 10.0, 0.0]]])
    _, parts = composite_loss(pred, main2, None)
    assert parts["grad"] == pytest.approx(log_normalize(20.0, NORM) - log_normalize(10.0, NORM), rel=1e-12)


def test_empty_main_rejected():
    with pytest.raises(UntrainableSampleError):
        composite_loss(np.ones((1, 2, 2)), np.zeros((1, 2, 2)))


@pytest.mark.parametrize("with_sparse", [False, True])
def test_composite_loss_gradient(with_sparse):
    r = np.random.default_rng(3)
    main = np.where(r.random((2, 4, 5)) < 0.85, r.uniform(1.0, 70.0, (2, 4, 5)), 0.0)
    sparse = np.where(r.random((2, 4, 5)) < 0.4, r.uniform(1.0, 70.0, (2, 4, 5)), 0.0) if with_sparse else None
    pred = r.uniform(1.0, 70.0, (2, 4, 5))
    # stay clear of |residual| == delta and of zero residuals, where the loss has kinks
    pred = np.where(np.abs(np.abs(pred - main) - 5.0) < 0.1, pred + 0.3, pred)
    errs = check_gradients(lambda v: composite_loss(v["pred"], main, sparse)[0], {"pred": pred})
    assert errs["pred"] <= 1e-5


# -- metrics ----------------------------------------------------------------------


def test_single_pixel_metrics():
    rep = eval_metrics(np.array([10.0]), np.array([20.0]), ranges=(80.0,))
    m = rep["ranges"]["0-80"]
    assert m["MAE"] == 10000.0
    assert m["RMSE"] == 10000.0
    assert m["iMAE"] == pytest.approx(50.0, abs=1e-12)
    assert m["iRMSE"] == pytest.approx(50.0, abs=1e-12)


def test_range_membership_and_skipped():
    gt = np.array([0.0, 30.0, 50.0, 60.0, 80.0, 90.0])
    masks = range_masks(gt)
    assert masks["0-50"].tolist() == [False, True, True, False, False, False]
    assert masks["0-80"].tolist() == [False, True, True, True, True, False]
    rep = eval_metrics(np.ones(2), np.array([60.0, 70.0]), ranges=(50.0, 70.0))
    assert rep["skipped"] == ["0-50"]
    assert rep["ranges"]["0-70"]["n"] == 2


def test_predictions_clamped():
    rep = eval_metrics(np.array([200.0, 0.0]), np.array([80.0, 0.5]), ranges=(80.0,))
    assert rep["ranges"]["0-80"]["MAE"] == 0.0


@settings(max_examples=30)
@given(st.lists(st.floats(1.0, 80.0), min_size=1, max_size=20))
def test_rmse_at_least_mae(vals):
    g = np.array(vals)
    p = g[::-1].copy()
    m = eval_metrics(p, g)["ranges"]["0-80"]
    assert m["RMSE"] >= m["MAE"] - 1e-9
    assert m["iRMSE"] >= m["iMAE"] - 1e-9
