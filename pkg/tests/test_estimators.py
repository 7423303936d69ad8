import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vitalflow import scenegen
from vitalflow.estimators import FlowMatchingGenerator, StableFlowEditor, VitalLayerSelector
from vitalflow.validation import check_consistent_length, check_images, check_seeds, check_tokens


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    items = scenegen.make_dataset(32, 0)
    X = np.stack([i[1] for i in items])
    y = np.stack([i[2] for i in items])
    gen = FlowMatchingGenerator(d_model=16, heads=2, layers=4, batch_size=8, steps=20, sample_steps=3,
                                out_dir=str(tmp_path_factory.mktemp("gen")))
    return gen.fit(X, y), X, y


def test_get_params_and_clone():
    gen = FlowMatchingGenerator(layers=6, lr=1e-3)
    p = gen.get_params()
    assert p["layers"] == 6 and p["lr"] == 1e-3
    c = clone(gen)
    assert c.get_params() == p and c is not gen
    sel = VitalLayerSelector(k=8).set_params(n_vital=2)
    assert sel.get_params()["n_vital"] == 2
    assert StableFlowEditor(mode="none").get_params()["mode"] == "none"


def test_unfitted_raise():
    with pytest.raises(NotFittedError):
        FlowMatchingGenerator().predict(np.zeros((1, 8), int))
    with pytest.raises(NotFittedError):
        VitalLayerSelector().get_support()


def test_generator_fit_predict_invert(fitted, tmp_path):
    gen, X, y = fitted
    assert gen.n_layers_ == 4 and len(gen.loss_curve_) == 20
    out = gen.predict(y[:2], seeds=[1, 2])
    assert out.shape == (2, 32, 32, 3) and np.abs(out).max() <= 1.0
    assert np.array_equal(out, gen.predict(y[:2], seeds=[1, 2]))
    z, cache = gen.invert(X[:2], y[:2])
    assert z.shape == (2, 32, 32, 3) and len(cache.latents) == 4
    rec = gen.reconstruct(X[:2], y[:2], use_cache=True)
    np.testing.assert_array_equal(rec, np.clip(1.15 * X[:2], -1, 1))
    assert np.isfinite(gen.score(X[:4], y[:4]))
    again = FlowMatchingGenerator.from_checkpoint(gen.checkpoint_, sample_steps=3)
    assert np.array_equal(again.predict(y[:2], seeds=[1, 2]), out)


def test_selector_and_editor(fitted):
    gen, X, y = fitted
    sel = VitalLayerSelector(k=3, steps=2, n_vital=2).fit(gen)
    mask = sel.get_support()
    assert mask.dtype == bool and mask.sum() == 2 and list(np.flatnonzero(mask)) == list(sel.get_support(indices=True))
    assert len(sel.reselect("threshold", tau=-1.0)) == 4
    ed = StableFlowEditor(generator=gen, vital_layers=sel, mode="inject_all", steps=3).fit(np.array([7]), y[:1])
    same = ed.transform(y[:1])
    assert np.abs(same - ed.reference_).max() <= 1e-6
    real = StableFlowEditor(generator=gen, vital_layers=sel, steps=3).fit(X[:1], y[:1])
    assert real.transform(y[1:2]).shape == (1, 32, 32, 3)
    with pytest.raises(ValueError):
        StableFlowEditor(generator=gen, mode="blend").fit(np.array([1]), y[:1])


def test_validation_helpers():
    img = scenegen.render(scenegen.SceneSpec("red"))
    assert check_images(img).shape == (1, 32, 32, 3)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 16, 16, 3)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 32, 32, 3), 2.0))
    with pytest.raises(ValueError):
        check_images(np.full((1, 32, 32, 3), np.nan))
    assert check_tokens(scenegen.SceneSpec("red")).shape == (1, 8)
    with pytest.raises(ValueError):
        check_tokens(np.zeros((1, 7), int))
    with pytest.raises(ValueError):
        check_tokens(np.full((1, 8), 40))
    with pytest.raises(ValueError):
        check_tokens(np.zeros((1, 8)))
    assert check_seeds(np.array([3, 4])) == [3, 4]
    with pytest.raises(ValueError):
        check_seeds([1], 2)
    with pytest.raises(ValueError):
        check_consistent_length(np.zeros(2), np.zeros(3))
