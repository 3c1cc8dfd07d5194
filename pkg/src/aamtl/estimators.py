"""scikit-learn style wrappers around the functional core."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .aam import Label, train_aam
from .evaluation import CONVERGENCE_THRESHOLD, TestSet, evaluate_model
from .fitting import MAX_ITERATIONS, N_RESTARTS, REL_COST_TOLERANCE, FitConfig, fit_with_restarts
from .geometry import bounding_box
from .shape_model import train_shape_model
from .transfer import Ordering, TransferConfig, transfer


def _check_shapes(shapes) -> np.ndarray:
    X = check_array(np.asarray(shapes, dtype=float).reshape(len(shapes), -1))
    if X.shape[1] % 2 or X.shape[1] < 6:
        raise ValueError("each shape needs an even number of coordinates for at least 3 points")
    return X


class PointDistributionModel(TransformerMixin, BaseEstimator):
    """Procrustes-aligned shape PCA with the similarity subspace in front.

    ``transform`` maps image-frame shapes (rows of ``2V`` coordinates) to
    parameters of ``[global | local]``; ``inverse_transform`` maps back.
    """

    def __init__(self, variance_fraction: float = 0.98):
        self.variance_fraction = variance_fraction

    def fit(self, X, y=None):
        X = _check_shapes(X)
        self.model_ = train_shape_model(list(X), self.variance_fraction)
        self.n_features_in_ = X.shape[1]
        self.n_components_ = self.model_.n_params
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_shapes(X)
        return (X - self.model_.mean) @ self.model_.basis

    def inverse_transform(self, P):
        check_is_fitted(self, "model_")
        P = check_array(P)
        return self.model_.mean + P @ self.model_.basis.T


class ActiveAppearanceModel(BaseEstimator):
    """Train on ``(images, shapes)``; ``predict`` fits landmarks in new images.

    ``predict`` takes optional ``bboxes`` ``(x_min, y_min, x_max, y_max)``
    for initialization; ``score`` is the fraction of images fitted with
    normalized RMS at or below ``threshold`` when boxes come from the truth.
    """

    def __init__(self, shape_fraction=0.98, appearance_fraction=0.98, face_size=150.0,
                 normalize=False, max_iterations=MAX_ITERATIONS, rel_cost_tolerance=REL_COST_TOLERANCE,
                 n_restarts=N_RESTARTS, random_state=0, threshold=CONVERGENCE_THRESHOLD):
        self.shape_fraction = shape_fraction
        self.appearance_fraction = appearance_fraction
        self.face_size = face_size
        self.normalize = normalize
        self.max_iterations = max_iterations
        self.rel_cost_tolerance = rel_cost_tolerance
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.threshold = threshold

    def _fit_config(self) -> FitConfig:
        return FitConfig(max_iterations=self.max_iterations,
                         rel_cost_tolerance=self.rel_cost_tolerance,
                         n_restarts=self.n_restarts, rng_seed=int(self.random_state))

    def _train(self, images, shapes, label=Label.TARGET):
        return train_aam(images, list(shapes), self.shape_fraction, self.appearance_fraction,
                         self.face_size, label=label, normalize=self.normalize)

    def fit(self, images, shapes):
        shapes = _check_shapes(shapes)
        if len(images) != len(shapes):
            raise ValueError(f"{len(images)} images but {len(shapes)} shapes")
        self.model_ = self._train(images, shapes)
        self.n_features_in_ = shapes.shape[1]
        return self

    def predict(self, images, bboxes=None):
        check_is_fitted(self, "model_")
        if bboxes is None:
            raise ValueError("predict needs one bounding box per image")
        cfg = self._fit_config()
        return np.array([fit_with_restarts(self.model_, img, box, cfg).shape
                         for img, box in zip(images, bboxes)])

    def score(self, images, shapes):
        check_is_fitted(self, "model_")
        shapes = _check_shapes(shapes)
        test = TestSet(list(images), list(shapes), bboxes=[bounding_box(s) for s in shapes])
        return evaluate_model(self.model_, test, self._fit_config(),
                              threshold=self.threshold).fraction_at_threshold


class SubspaceSelectionAAM(ActiveAppearanceModel):
    """Target-domain AAM augmented with the ``d`` source directions that
    capture the most target variance.

    ``source_model`` is a trained :class:`~aamtl.aam.AamModel` from the
    source domain; ``fit`` takes the (few) target training examples.
    """

    def __init__(self, source_model=None, d_shape=3, d_appearance=30,
                 ordering="target_variance", shape_fraction=0.98, appearance_fraction=0.98,
                 face_size=150.0, normalize=False, max_iterations=MAX_ITERATIONS,
                 rel_cost_tolerance=REL_COST_TOLERANCE, n_restarts=N_RESTARTS, random_state=0,
                 threshold=CONVERGENCE_THRESHOLD):
        super().__init__(shape_fraction, appearance_fraction, face_size, normalize,
                         max_iterations, rel_cost_tolerance, n_restarts, random_state, threshold)
        self.source_model = source_model
        self.d_shape = d_shape
        self.d_appearance = d_appearance
        self.ordering = ordering

    def fit(self, images, shapes):
        if self.source_model is None:
            raise ValueError("source_model is required")
        shapes = _check_shapes(shapes)
        target = self._train(images, shapes)
        cfg = TransferConfig(self.d_shape, self.d_appearance, Ordering(self.ordering))
        self.target_model_ = target
        self.model_, self.report_ = transfer(target, self.source_model, images, list(shapes), cfg,
                                             return_report=True)
        self.n_features_in_ = shapes.shape[1]
        return self
