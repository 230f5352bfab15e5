import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tagpose.errors import DatasetError
from tagpose.estimator import TagPoseEstimator
from tagpose.synth import generate


@pytest.fixture(scope="module")
def fitted(robot, tmp_path_factory):
    est = TagPoseEstimator(epochs=2, batch=6, adapt_epochs=1, out_dir=str(tmp_path_factory.mktemp("est")))
    return est.fit(generate(robot, "in-dist", 14, seed=31))


def test_params_and_clone():
    est = TagPoseEstimator(lr=5e-4, epochs=3)
    params = est.get_params()
    assert params["lr"] == 5e-4 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(seed=7)
    assert est.seed == 7


def test_unfitted_raises(scenes):
    with pytest.raises(NotFittedError):
        TagPoseEstimator().predict(scenes)


def test_prediction_shapes(fitted, scenes, robot):
    assert fitted.predict(scenes).shape == (len(scenes), robot.n_joints)
    assert fitted.predict_keypoints(scenes).shape == (len(scenes), robot.n_keypoints, 3)
    assert fitted.transform(scenes).shape == (len(scenes), robot.n_joints + 12)
    assert 0.0 <= fitted.score(scenes) <= 1.0
    assert len(fitted.history_) == 2


def test_adapt_keeps_interface(fitted, ood_scenes, scenes):
    est = clone(fitted).fit(generate(fitted.model_, "in-dist", 8, seed=32))
    before = est.predict(scenes)
    est.adapt(ood_scenes)
    assert est.predict(scenes).shape == before.shape
    assert len(est.adapt_history_) == 1


def test_input_validation(fitted, scenes, ood_scenes):
    with pytest.raises(DatasetError):
        fitted.predict([])
    with pytest.raises(TypeError):
        fitted.predict([np.zeros(3)])
    from tagpose.camera import Intrinsics
    other = generate(fitted.model_, "in-dist", 1, seed=3, K=Intrinsics(50, 50, 31.5, 31.5, 64, 64))
    with pytest.raises(DatasetError):
        fitted.predict(list(scenes[:1]) + other)
