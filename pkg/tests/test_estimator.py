import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from adasum import AdasumClassifier
from adasum.training import make_dataset


@pytest.fixture(scope="module")
def blobs():
    d = make_dataset("gauss_blobs", 0, n_samples=1200, n_features=3, n_classes=3, separation=4.0)
    return d.X, np.array(["a", "b", "c"])[d.y]


def test_params_roundtrip():
    clf = AdasumClassifier(ranks=4, max_lr=0.2)
    assert clf.get_params()["ranks"] == 4
    c2 = clone(clf).set_params(reduction="sum")
    assert c2.reduction == "sum" and c2.max_lr == 0.2


def test_fit_predict(blobs):
    X, y = blobs
    clf = AdasumClassifier(ranks=4, epochs=3, batch_size=16, max_lr=0.2).fit(X, y)
    assert set(clf.classes_) == {"a", "b", "c"}
    assert clf.score(X, y) > 0.9
    np.testing.assert_allclose(clf.predict_proba(X[:5]).sum(axis=1), 1.0)
    assert clf.n_features_in_ == 3 and len(clf.history_) > 0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        AdasumClassifier().predict(np.zeros((1, 2)))


def test_validation(blobs):
    X, y = blobs
    with pytest.raises(ValueError):
        AdasumClassifier().fit(X, np.zeros(len(y)))
    clf = AdasumClassifier(epochs=0.2).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        AdasumClassifier().fit(X, np.linspace(0, 1, len(y)))
