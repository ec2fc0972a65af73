import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from sceneflow import InvalidInputError, evaluate


def test_perfect_prediction(rng):
    gt = rng.normal(size=(20, 3))
    r = evaluate(gt, gt)
    assert (r.epe3d, r.acc3d_strict, r.acc3d_relax, r.outliers3d, r.point_count) == (0.0, 1.0, 1.0, 0.0, 20)


def test_twenty_percent_relative_error():
    r = evaluate([[1.2, 0, 0]], [[1.0, 0, 0]])
    assert r.epe3d == pytest.approx(0.2)
    assert (r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (0.0, 0.0, 1.0)


def test_zero_ground_truth_guard():
    gt = np.zeros((2, 3))
    r = evaluate([[0, 0, 0], [0.01, 0, 0]], gt)
    # Both points pass the absolute thresholds; the relative error of the
    # second is infinite but that only matters for the outlier test.
    assert (r.acc3d_strict, r.acc3d_relax, r.outliers3d) == (1.0, 1.0, 0.5)


def test_absolute_threshold_boundaries():
    # Large ground truth keeps relative errors small; only absolute terms act.
    gt = np.array([[100.0, 0, 0]] * 3)
    pred = gt + [[0.3, 0, 0], [0.04, 0, 0], [0.31, 0, 0]]
    r = evaluate(pred, gt)
    assert r.outliers3d == pytest.approx(1 / 3)
    assert r.acc3d_strict == 1.0


def test_relative_boundary_is_neither():
    r = evaluate([[0.0, 0, 1.25]], [[0.0, 0, 1.0]])
    assert r.acc3d_relax == 0.0 and r.outliers3d == 1.0
    r = evaluate([[0.0, 0, 0.875]], [[0.0, 0, 1.0]])
    assert r.acc3d_relax == 0.0 and r.outliers3d == 1.0


def test_errors():
    with pytest.raises(InvalidInputError):
        evaluate(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        evaluate([[np.nan, 0, 0]], [[0.0, 0, 0]])
    with pytest.raises(InvalidInputError):
        evaluate(np.zeros((0, 3)), np.zeros((0, 3)))


def test_brute_force(rng):
    for _ in range(20):
        gt = rng.normal(scale=0.5, size=(60, 3))
        gt[:5] = 0
        pred = gt + rng.normal(scale=0.15, size=gt.shape)
        pred[:2] = 0
        r = evaluate(pred, gt)
        assert (r.epe3d, r.acc3d_strict, r.acc3d_relax, r.outliers3d) == oracles.metrics(pred, gt)


def test_text_and_csv():
    r = evaluate([[1.2, 0, 0]], [[1.0, 0, 0]])
    assert r.to_text().splitlines()[0].split() == ["epe3d", "0.200000"]
    header, values = r.to_csv().splitlines()
    assert header == "epe3d,acc3d_strict,acc3d_relax,outliers3d,point_count"
    assert float(values.split(",")[0]) == r.epe3d


flows = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**32 - 1)))


@given(flows)
def test_properties(args):
    n, seed = args
    r = np.random.default_rng(seed)
    gt = r.normal(scale=0.3, size=(n, 3))
    pred = gt + r.normal(scale=r.uniform(0.01, 0.5), size=gt.shape)
    base = evaluate(pred, gt)
    assert 0 <= base.acc3d_strict <= base.acc3d_relax <= 1 and 0 <= base.outliers3d <= 1 and base.epe3d >= 0
    perm = r.permutation(n)
    p2 = evaluate(pred[perm], gt[perm])
    assert p2.acc3d_strict == base.acc3d_strict and p2.outliers3d == base.outliers3d
    assert p2.epe3d == pytest.approx(base.epe3d, rel=1e-15)
    g = r.normal(size=(1, 3))
    more = evaluate(np.vstack([pred, g]), np.vstack([gt, g]))
    assert more.acc3d_strict >= base.acc3d_strict and more.acc3d_relax >= base.acc3d_relax
    assert more.outliers3d <= base.outliers3d
