import numpy as np
import pytest
from sklearn.base import clone

from depthdbd.estimator import DefocusBlurDetector, check_images, check_masks
from depthdbd.exceptions import ConfigurationError, DimensionError


@pytest.fixture(scope="module")
def arrays(fixture_records):
    recs = fixture_records[:6]
    X = np.stack([r.image for r in recs])
    y = np.stack([r.blur_label[0] for r in recs])
    d = np.stack([r.depth[0] for r in recs])
    return X, y, d


def test_params_and_clone():
    est = DefocusBlurDetector(max_epochs=3, lr=1e-3, variant="pdnet")
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(max_epochs=1).max_epochs == 1


def test_fit_predict_shapes(arrays):
    X, y, _ = arrays
    est = DefocusBlurDetector(max_epochs=2, lr=1e-3, batch_size=3).fit(X, y)
    proba = est.predict_proba(X)
    assert proba.shape == y.shape and proba.min() >= 0 and proba.max() <= 1
    assert set(np.unique(est.predict(X))) <= {0, 1}
    assert 0 <= est.score(X, y) <= 1
    assert len(est.history_) == 2


def test_channels_last_uint8_input(arrays):
    X, y, _ = arrays
    est = DefocusBlurDetector(max_epochs=1, batch_size=3).fit(X, y)
    hwc = np.round(np.moveaxis(X, 1, -1) * 255).astype(np.uint8)
    np.testing.assert_allclose(est.predict_proba(hwc), est.predict_proba(X), atol=0.02)


def test_same_random_state_same_predictions(arrays):
    X, y, _ = arrays
    a = DefocusBlurDetector(max_epochs=1, batch_size=3, random_state=3).fit(X, y)
    b = DefocusBlurDetector(max_epochs=1, batch_size=3, random_state=3).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_distill_requires_depth(arrays):
    X, y, _ = arrays
    with pytest.raises(ConfigurationError):
        DefocusBlurDetector(distill=True, max_epochs=1).fit(X, y)


def test_distill_fit(arrays):
    X, y, d = arrays
    est = DefocusBlurDetector(distill=True, max_epochs=1, batch_size=3, beta=1.0).fit(X, y, d)
    assert est.model_ is not est.teacher_
    assert [h["stage"] for h in est.history_] == ["stage1", "stage2"]


def test_input_validation():
    with pytest.raises(DimensionError):
        check_images(np.zeros((2, 4, 8, 8)))
    with pytest.raises(DimensionError):
        check_masks(np.zeros((3, 8, 8)), n_samples=2)
    np.testing.assert_array_equal(check_masks(np.array([[[0, 128, 255]]], np.uint8))[0, 0, 0],
                                  [0, 1, 1])
