import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from otfseg import AdaptiveUNetSegmenter, DomainPriorEncoder, PlainUNetSegmenter, TentAdapter
from otfseg.estimators import check_images, check_masks
from otfseg.exceptions import ShapeError, ValidationError

from conftest import tiny_samples

X, Y = tiny_samples(8, seed=7)


@pytest.fixture(scope="module")
def encoder():
    return DomainPriorEncoder(base_channels=4, epochs=1, batch_size=4).fit(X)


def test_check_images():
    assert check_images(X.astype(np.float64)).dtype == np.float32
    with pytest.raises(ShapeError):
        check_images(X[0])
    with pytest.raises(ValidationError):
        check_images(X * 3)
    bad = X.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        check_images(bad)
    with pytest.raises(ShapeError):
        check_images(X, dimensionality=3)


def test_check_masks():
    with pytest.raises(ShapeError):
        check_masks(Y[:, :16], X)
    with pytest.raises(ValidationError):
        check_masks(Y + 5, X, num_classes=2)
    with pytest.raises(ValidationError):
        check_masks(Y + 0.5, X)


def test_get_params_and_clone(encoder):
    seg = AdaptiveUNetSegmenter(encoder=encoder, base_channels=4, epochs=2)
    params = seg.get_params(deep=False)
    assert params["base_channels"] == 4 and params["encoder"] is encoder
    cloned = clone(seg)
    assert cloned.get_params(deep=False)["epochs"] == 2
    assert not hasattr(cloned, "checkpoint_")
    seg.set_params(lam=0.5)
    assert seg.lam == 0.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        DomainPriorEncoder().transform(X)
    with pytest.raises(NotFittedError):
        PlainUNetSegmenter().predict(X)


def test_encoder_transform_shape(encoder):
    codes = encoder.transform(X)
    assert codes.shape == (8, 8, 8, 8)


def test_adaptive_fit_predict_score(encoder):
    seg = AdaptiveUNetSegmenter(encoder=encoder, base_channels=4, epochs=1, batch_size=4).fit(X, Y)
    pred = seg.predict(X)
    assert pred.shape == Y.shape and set(np.unique(pred)) <= {0, 1}
    proba = seg.predict_proba(X[:2])
    assert proba.shape == (2, 2, 32, 32)
    assert 0.0 <= seg.score(X, Y) <= 1.0
    # episodes are independent, so a subset gives the same masks
    assert np.array_equal(seg.predict(X[3:5]), pred[3:5])


def test_plain_and_tent(tmp_path):
    plain = PlainUNetSegmenter(base_channels=4, epochs=1, batch_size=4).fit(X, Y)
    assert plain.predict(X).shape == Y.shape
    tent = TentAdapter(plain, shots=1, lr=1e-3, batch_size=4).fit(X)
    assert tent.predict(X).shape == Y.shape
    assert tent.checkpoint_.fingerprint != plain.checkpoint_.fingerprint
    with pytest.raises(ValidationError):
        plain.set_params(stats_mode="bogus").predict(X)
