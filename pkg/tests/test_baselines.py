import numpy as np
import pytest

from rkd.baselines import coord_median_aggregate, fedavg, rlr_aggregate


def test_fedavg_examples():
    v = np.array([1.0, -2.5, 3.0])
    np.testing.assert_array_equal(fedavg([v]), v)
    np.testing.assert_array_equal(fedavg([v, -v]), np.zeros(3))
    np.testing.assert_array_equal(fedavg([[0.0], [2.0], [4.0]]), [2.0])


def test_fedavg_weighted():
    out = fedavg([np.array([0.0]), np.array([3.0])], weights=[1, 2])
    np.testing.assert_allclose(out, [2.0])
    with pytest.raises(ValueError):
        fedavg([np.zeros(1)], weights=[0])


def test_fedavg_keeps_dtype():
    assert fedavg([np.ones(3, np.float32)] * 2).dtype == np.float32


def test_coord_median_examples():
    np.testing.assert_array_equal(coord_median_aggregate([[1.0], [2.0], [100.0]]), [2.0])
    v = np.array([0.3, 0.7])
    np.testing.assert_array_equal(coord_median_aggregate([v, v, v]), v)
    np.testing.assert_array_equal(coord_median_aggregate([[1.0], [2.0], [4.0], [100.0]]), [3.0])


def test_rlr_unanimous_is_fedavg_step():
    g = np.array([1.0, 1.0])
    ups = [np.array([0.1, -0.2]), np.array([0.3, -0.4])]
    out = rlr_aggregate(ups, threshold=2, server_lr=0.5, global_params=g)
    np.testing.assert_allclose(out, g + 0.5 * np.mean(ups, axis=0))


def test_rlr_tie_flips_lr():
    g = np.zeros(2)
    ups = [np.array([1.0, 1.0]), np.array([-1.0, 1.0])]
    out = rlr_aggregate(ups, threshold=1, server_lr=1.0, global_params=g)
    # coordinate 0: votes cancel, |sum| = 0 < 1, step flipped (mean is 0 anyway)
    # coordinate 1: |sum| = 2 >= 1, regular step
    np.testing.assert_allclose(out, [0.0, 1.0])
    ups = [np.array([2.0]), np.array([-1.0])]
    out = rlr_aggregate(ups, threshold=1, server_lr=1.0, global_params=np.zeros(1))
    np.testing.assert_allclose(out, [-0.5])


def test_rlr_single_client():
    g = np.array([0.0, 0.0])
    out = rlr_aggregate([np.array([0.2, -0.3])], threshold=1, server_lr=1.0, global_params=g)
    np.testing.assert_allclose(out, [0.2, -0.3])


def test_rlr_validation():
    with pytest.raises(ValueError):
        rlr_aggregate([np.zeros(2)], threshold=-1, server_lr=1.0, global_params=np.zeros(2))
    with pytest.raises(ValueError):
        rlr_aggregate([np.zeros(2)], threshold=1, server_lr=1.0, global_params=np.zeros(3))
