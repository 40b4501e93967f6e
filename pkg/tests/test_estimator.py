import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cca import CCAEmbedder
from cca.data import GenConfig, generate


@pytest.fixture(scope="module")
def xy():
    manifest, images = generate(GenConfig(n_items=80, image_size=16, attributes=[("hue", "hue_band", 2), ("shape", "shape_glyph", 2)]))
    return images, manifest.labels()


SMALL = dict(patch_size=8, dim=16, heads=2, depth=2, ffn_hidden=32, batch_size=16, epochs=1)


def test_get_params_and_clone():
    est = CCAEmbedder(**SMALL)
    assert est.get_params()["dim"] == 16
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est


def test_fit_transform_shapes(xy):
    X, y = xy
    est = CCAEmbedder(**SMALL, validation_fraction=0.25).fit(X, y)
    Z = est.transform(X[:7])
    assert Z.shape == (7, 2 * 16)
    np.testing.assert_allclose(np.linalg.norm(Z[:, :16], axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(est.embed(X[:7], 1), Z[:, 16:])
    assert 0.0 <= est.score(X, y, n_triplets=100) <= 1.0
    assert len(est.history_) == 1


def test_fit_is_deterministic(xy):
    X, y = xy
    a = CCAEmbedder(**SMALL, random_state=3).fit(X, y).transform(X[:5])
    b = CCAEmbedder(**SMALL, random_state=3).fit(X, y).transform(X[:5])
    assert a.tobytes() == b.tobytes()


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CCAEmbedder().transform(np.zeros((1, 32, 32, 3), np.uint8))


def test_input_validation(xy):
    X, y = xy
    est = CCAEmbedder(**SMALL)
    with pytest.raises(ValueError):
        est.fit(X[:, :, :, :2], y)
    with pytest.raises(ValueError):
        est.fit(X, y[:5])
    with pytest.raises(ValueError):
        est.fit(X, y + 0.5)
    est.fit(X, y)
    with pytest.raises(ValueError):
        est.transform(np.zeros((2, 32, 32, 3), np.uint8))
    with pytest.raises(ValueError):
        est.embed(X[:2], 5)
