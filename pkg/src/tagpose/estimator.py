"""Scikit-learn style wrapper around the two training stages."""
from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DatasetError
from .kinematics import default_robot, load_robot
from .synth import Scene
from .trainer import (
    StageConfig, TrainConfig, add_auc, add_distances, predict, train_stage1, train_stage2,
)


def check_scenes(X, labelled=False):
    """Validate a list of scenes with a shared image size and intrinsics."""
    scenes = list(X)
    if not scenes:
        raise DatasetError("no scenes given")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Scene")
        if s.mask.shape != scenes[0].mask.shape or s.K != scenes[0].K:
            raise DatasetError(f"scene {i} has a different image size or intrinsics")
        if labelled and not s.meta.get("labels", True):
            raise DatasetError(f"scene {i} carries no labels")
    return scenes


class TagPoseEstimator(BaseEstimator):
    """Joint-angle and keypoint estimator trained through the alignment graph.

    ``fit`` runs the supervised-plus-alignment stage on labelled scenes;
    ``adapt`` runs the alignment-only stage on unlabelled scenes.  ``predict``
    returns joint angles, ``score`` the ADD AUC.
    """

    def __init__(self, robot=None, lr=1e-3, epochs=40, batch=32, decay=0.95, adapt_lr=1e-6, adapt_epochs=20,
                 seed=0, threshold_max=0.1, val_fraction=0.1, out_dir=None):
        self.robot = robot
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.decay = decay
        self.adapt_lr = adapt_lr
        self.adapt_epochs = adapt_epochs
        self.seed = seed
        self.threshold_max = threshold_max
        self.val_fraction = val_fraction
        self.out_dir = out_dir

    def _config(self):
        out = self.out_dir or tempfile.mkdtemp(prefix="tagpose-")
        return TrainConfig(
            stage1=StageConfig(lr=self.lr, epochs=self.epochs, batch=self.batch, decay=self.decay),
            stage2=StageConfig(lr=self.adapt_lr, epochs=self.adapt_epochs, batch=self.batch, decay=self.decay),
            seed=self.seed, threshold_max=self.threshold_max, out_dir=out,
        )

    def fit(self, X, y=None):
        scenes = check_scenes(X, labelled=True)
        self.model_ = load_robot(self.robot) if self.robot else default_robot()
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(scenes))
        n_val = max(1, int(round(self.val_fraction * len(scenes)))) if len(scenes) > 1 else 0
        val = [scenes[i] for i in order[:n_val]] or scenes
        train = [scenes[i] for i in order[n_val:]] or scenes
        result = train_stage1(self._config(), train, val, self.model_)
        self.nets_ = result.nets
        self.history_ = result.history
        return self

    def adapt(self, X):
        check_is_fitted(self, "nets_")
        scenes = check_scenes(X)
        result = train_stage2(self._config(), scenes, self.nets_, self.model_)
        self.nets_ = result.nets
        self.adapt_history_ = result.history
        return self

    def _predict_all(self, X):
        check_is_fitted(self, "nets_")
        return predict(self.nets_, self.model_, check_scenes(X))

    def predict(self, X):
        return self._predict_all(X)["p"]

    def predict_keypoints(self, X):
        return self._predict_all(X)["kp3"]

    def transform(self, X):
        """Per-scene vector: joint angles, flattened rotation and translation."""
        out = self._predict_all(X)
        return np.concatenate([out["p"], out["R"].reshape(len(out["R"]), -1), out["T"]], axis=1)

    def score(self, X, y=None):
        scenes = check_scenes(X, labelled=True)
        kp = self.predict_keypoints(scenes)
        return add_auc(add_distances(kp, np.stack([s.kp3 for s in scenes])), self.threshold_max)
