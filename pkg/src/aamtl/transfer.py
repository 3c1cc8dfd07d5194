"""Subspace-selection transfer: rank source eigenvectors by the target variance they
capture, keep the best ``d`` and merge them with the target basis.

Baselines (source-only, target-only, union of data, full subspace concatenation)
are built from the same pieces.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .aam import AamModel, Label, train_aam
from .appearance_model import AppearanceModel, appearance_matrix
from .exceptions import DegenerateInputError, DimensionError
from .geometry import (AlignedShapeSet, as_points, bilinear_sample, optimal_similarity,
                       procrustes_align)
from .numeric import orthonormalize
from .shape_model import ShapeModel

EIGENVALUE_FLOOR = 1e-8


class Ordering(str, enum.Enum):
    TARGET_VARIANCE = "target_variance"
    SOURCE_EIGENVALUE = "source_eigenvalue"


@dataclass(frozen=True)
class TransferConfig:
    d_shape: int = 3
    d_appearance: int = 30
    ordering: Ordering = Ordering.TARGET_VARIANCE
    renormalize_warped: bool = True

    def __post_init__(self):
        if self.d_shape < 0 or self.d_appearance < 0:
            raise ValueError("d must be nonnegative")
        object.__setattr__(self, "ordering", Ordering(self.ordering))


@dataclass(frozen=True)
class ProjectedVariance:
    """Target variance along each source column and the descending order."""
    sigma2: np.ndarray
    order: np.ndarray

    def captured(self, indices) -> float:
        return float(np.sum(self.sigma2[np.asarray(indices, dtype=int)]))


def projected_variance(source_basis, target_samples, target_mean) -> ProjectedVariance:
    """Variance of the centred target samples projected on each source column.

    ``sigma2[i] = phi_i^T Xc Xc^T phi_i / (N_T - 1)`` where ``Xc`` holds the
    target samples minus ``target_mean``. Ties in the ordering keep the lower
    source index first.
    """
    B = np.asarray(source_basis, dtype=float)
    X = np.asarray(target_samples, dtype=float)
    mu = np.asarray(target_mean, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise DegenerateInputError("need at least 2 target samples")
    if B.shape[0] != X.shape[0] or mu.shape != (X.shape[0],):
        raise DimensionError(
            f"source basis {B.shape}, target samples {X.shape} and mean {mu.shape} disagree")
    Xc = X - mu[:, None]
    proj = B.T @ Xc
    sigma2 = np.sum(proj**2, axis=1) / (X.shape[1] - 1)
    sigma2 = np.where(sigma2 < 0, 0.0, sigma2)
    order = np.argsort(-sigma2, kind="stable")
    return ProjectedVariance(sigma2=sigma2, order=order)


def pick_columns(source_basis, target_samples, target_mean, d: int, ordering) -> np.ndarray:
    """Indices of the ``d`` source columns chosen under ``ordering``."""
    k = np.asarray(source_basis).shape[1]
    if not 0 <= d <= k:
        raise ValueError(f"d={d} outside [0, {k}]")
    if Ordering(ordering) is Ordering.SOURCE_EIGENVALUE:
        return np.arange(d)
    pv = projected_variance(source_basis, target_samples, target_mean)
    return pv.order[:d]


def select_subspace(target_basis, source_basis, target_samples, target_mean, d: int,
                    ordering=Ordering.TARGET_VARIANCE) -> np.ndarray:
    """``orthonormalize([target_basis | top-d source columns])``.

    The target columns come first, so an orthonormal target basis is returned
    unchanged as the leading columns.
    """
    T = np.asarray(target_basis, dtype=float)
    S = np.asarray(source_basis, dtype=float)
    if T.shape[0] != S.shape[0]:
        raise DimensionError("target and source bases live in different spaces")
    idx = pick_columns(S, target_samples, target_mean, d, ordering)
    return orthonormalize(np.column_stack([T, S[:, idx]]))


def rotate_shape_basis(basis, angle: float) -> np.ndarray:
    """Rotate every landmark displacement in each column by ``angle``."""
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    B = np.asarray(basis, dtype=float)
    out = np.empty_like(B)
    for j in range(B.shape[1]):
        out[:, j] = (as_points(B[:, j]) @ R.T).reshape(-1)
    return out


def source_local_in_target_frame(target_model: ShapeModel, source_model: ShapeModel) -> np.ndarray:
    """Source local columns rotated into the target model's Procrustes orientation."""
    if source_model.mean.size != target_model.mean.size:
        raise DimensionError("source and target models have different landmark counts")
    T = optimal_similarity(source_model.mean, target_model.mean)
    return rotate_shape_basis(source_model.local_basis, T.rotation)


def _column_variances(basis, samples, floor_rel=EIGENVALUE_FLOOR) -> np.ndarray:
    if basis.shape[1] == 0:
        return np.zeros(0)
    X = np.asarray(samples, dtype=float)
    Xc = X - X.mean(axis=1, keepdims=True)
    var = np.sum((basis.T @ Xc) ** 2, axis=1) / max(X.shape[1] - 1, 1)
    return np.maximum(var, floor_rel * max(var.max(), 1e-300))


def _covariance_variances(basis, parts, floor_rel=EIGENVALUE_FLOOR) -> np.ndarray:
    """Variance along each column under a sum of low-rank covariances ``B diag(l) B^T``."""
    if basis.shape[1] == 0:
        return np.zeros(0)
    var = np.zeros(basis.shape[1])
    for B, lam in parts:
        if B.shape[1]:
            var += ((basis.T @ B) ** 2) @ lam
    return np.maximum(var, floor_rel * max(var.max(), 1e-300))


def transfer_shape(target_model: ShapeModel, source_model: ShapeModel,
                   target_aligned: AlignedShapeSet, d: int,
                   ordering=Ordering.TARGET_VARIANCE) -> ShapeModel:
    """Shape model with the target mean and basis [target | selected source local columns]."""
    candidates = source_local_in_target_frame(target_model, source_model)
    X = target_aligned.shapes
    if X.shape[0] != target_model.mean.size:
        raise DimensionError("aligned target shapes do not match the target model")
    basis = select_subspace(target_model.basis, candidates, X, target_model.mean, d, ordering)
    local = basis[:, target_model.n_global:]
    return ShapeModel(mean=target_model.mean, basis=basis,
                      eigenvalues=_column_variances(local, X),
                      n_global=target_model.n_global)


def warp_appearance_basis(source: AppearanceModel, target_frame, renormalize: bool = True) -> np.ndarray:
    """Carry source appearance eigenvectors onto the target frame.

    Every eigenvector is painted on the source raster and resampled at the
    target frame pixels through the piecewise affine map target mesh ->
    source mesh (same triangulation, the target's).
    """
    if source.frame.n_vertices != target_frame.n_vertices:
        raise DimensionError("source and target frames have different landmark counts")
    xy = target_frame.warp_points(source.frame.mesh.vertices)
    cols = []
    for j in range(source.n_components):
        raster = source.frame.to_raster(source.basis[:, j])
        cols.append(bilinear_sample(raster, xy[:, 0], xy[:, 1]))
    W = np.column_stack(cols) if cols else np.zeros((target_frame.n_pixels, 0))
    if renormalize and W.shape[1]:
        n = np.linalg.norm(W, axis=0)
        W = W / np.where(n > 0, n, 1.0)
    return W


def transfer_appearance(target_model: AppearanceModel, source_model: AppearanceModel,
                        target_appearances, d: int, ordering=Ordering.TARGET_VARIANCE,
                        renormalize: bool = True) -> AppearanceModel:
    """Appearance model with the target mean and basis [target | selected warped source]."""
    candidates = warp_appearance_basis(source_model, target_model.frame, renormalize)
    A = np.asarray(target_appearances, dtype=float)
    basis = select_subspace(target_model.basis, candidates, A, target_model.mean, d, ordering)
    return AppearanceModel(frame=target_model.frame, mean=target_model.mean, basis=basis,
                           eigenvalues=_column_variances(basis, A),
                           normalize=target_model.normalize)


@dataclass(frozen=True)
class TransferReport:
    """What the selection saw: per-direction variances and the chosen indices."""
    shape_sigma2: np.ndarray
    shape_order: np.ndarray
    shape_selected: np.ndarray
    shape_source_eigenvalues: np.ndarray
    appearance_sigma2: np.ndarray
    appearance_order: np.ndarray
    appearance_selected: np.ndarray
    appearance_source_eigenvalues: np.ndarray
    target_shape_variance: float
    target_appearance_variance: float
    config: TransferConfig = field(default_factory=TransferConfig)

    def to_dict(self) -> dict:
        def pct(v, total):
            return [float(x) / total * 100.0 if total > 0 else 0.0 for x in v]

        def src_pct(ev):
            tot = float(np.sum(ev))
            return [float(x) / tot * 100.0 if tot > 0 else 0.0 for x in ev]

        return {
            "ordering": self.config.ordering.value,
            "d_shape": self.config.d_shape,
            "d_appearance": self.config.d_appearance,
            "shape": {
                "sigma2": [float(x) for x in self.shape_sigma2],
                "order": [int(x) for x in self.shape_order],
                "sigma2_descending": [float(self.shape_sigma2[i]) for i in self.shape_order],
                "selected": [int(x) for x in self.shape_selected],
                "target_variance_percent": pct(self.shape_sigma2, self.target_shape_variance),
                "source_variance_percent": src_pct(self.shape_source_eigenvalues),
            },
            "appearance": {
                "sigma2": [float(x) for x in self.appearance_sigma2],
                "order": [int(x) for x in self.appearance_order],
                "sigma2_descending": [float(self.appearance_sigma2[i]) for i in self.appearance_order],
                "selected": [int(x) for x in self.appearance_selected],
                "target_variance_percent": pct(self.appearance_sigma2, self.target_appearance_variance),
                "source_variance_percent": src_pct(self.appearance_source_eigenvalues),
            },
        }


def _target_data(target: AamModel, images, shapes):
    shapes = [np.asarray(s, dtype=float).reshape(-1) for s in shapes]
    aligned = procrustes_align(shapes)
    A = appearance_matrix(target.appearance.frame, images, shapes, target.appearance.normalize)
    return aligned, A


def transfer(target: AamModel, source: AamModel, target_images, target_shapes,
             config: TransferConfig | None = None, return_report: bool = False):
    """Build the selected-subspace model from a target model, a source model
    and the target training data the target model was trained on."""
    config = config or TransferConfig()
    if target.n_vertices != source.n_vertices:
        raise DimensionError("source and target models have different landmark counts")
    aligned, A = _target_data(target, target_images, target_shapes)
    shape = transfer_shape(target.shape, source.shape, aligned, config.d_shape, config.ordering)
    appearance = transfer_appearance(target.appearance, source.appearance, A,
                                     config.d_appearance, config.ordering,
                                     config.renormalize_warped)
    model = AamModel(shape=shape, appearance=appearance, label=Label.SELECTED)
    if not return_report:
        return model
    cand_s = source_local_in_target_frame(target.shape, source.shape)
    pv_s = projected_variance(cand_s, aligned.shapes, target.shape.mean)
    cand_a = warp_appearance_basis(source.appearance, target.appearance.frame,
                                   config.renormalize_warped)
    pv_a = projected_variance(cand_a, A, target.appearance.mean)
    Xc = aligned.shapes - target.shape.mean[:, None]
    Ac = A - target.appearance.mean[:, None]
    report = TransferReport(
        shape_sigma2=pv_s.sigma2, shape_order=pv_s.order,
        shape_selected=pick_columns(cand_s, aligned.shapes, target.shape.mean,
                                    config.d_shape, config.ordering),
        shape_source_eigenvalues=source.shape.eigenvalues,
        appearance_sigma2=pv_a.sigma2, appearance_order=pv_a.order,
        appearance_selected=pick_columns(cand_a, A, target.appearance.mean,
                                         config.d_appearance, config.ordering),
        appearance_source_eigenvalues=source.appearance.eigenvalues,
        target_shape_variance=float(np.sum(Xc**2) / max(Xc.shape[1] - 1, 1)),
        target_appearance_variance=float(np.sum(Ac**2) / max(Ac.shape[1] - 1, 1)),
        config=config)
    return model, report


def baseline_source(source: AamModel) -> AamModel:
    return source.relabel(Label.SOURCE)


def baseline_target(target: AamModel) -> AamModel:
    return target.relabel(Label.TARGET)


def baseline_sut(source_images, source_shapes, target_images, target_shapes,
                 shape_fraction: float = 0.98, appearance_fraction: float = 0.98,
                 face_size: float = 150.0) -> AamModel:
    """Model trained on the union of source and target samples."""
    images = list(source_images) + list(target_images)
    shapes = list(source_shapes) + list(target_shapes)
    return train_aam(images, shapes, shape_fraction, appearance_fraction, face_size,
                     label=Label.SUT)


def baseline_st(target: AamModel, source: AamModel, target_images=None,
                target_shapes=None, renormalize: bool = True) -> AamModel:
    """Target means with bases orthonormalized from [target | all source] columns.

    With target training data the eigenvalues are target variances along the
    merged columns; without it they come from the two models' covariances.
    """
    if target.n_vertices != source.n_vertices:
        raise DimensionError("source and target models have different landmark counts")
    cand_s = source_local_in_target_frame(target.shape, source.shape)
    cand_a = warp_appearance_basis(source.appearance, target.appearance.frame, renormalize)
    Phi = orthonormalize(np.column_stack([target.shape.basis, cand_s]))
    Psi = orthonormalize(np.column_stack([target.appearance.basis, cand_a]))
    local = Phi[:, target.shape.n_global:]
    if target_images is not None and target_shapes is not None:
        aligned, A = _target_data(target, target_images, target_shapes)
        lam = _column_variances(local, aligned.shapes)
        kap = _column_variances(Psi, A)
    else:
        lam = _covariance_variances(local, [(target.shape.local_basis, target.shape.eigenvalues),
                                            (cand_s, source.shape.eigenvalues)])
        kap = _covariance_variances(Psi, [(target.appearance.basis, target.appearance.eigenvalues),
                                          (cand_a, source.appearance.eigenvalues)])
    shape = ShapeModel(mean=target.shape.mean, basis=Phi, eigenvalues=lam,
                       n_global=target.shape.n_global)
    appearance = AppearanceModel(frame=target.appearance.frame, mean=target.appearance.mean,
                                 basis=Psi, eigenvalues=kap,
                                 normalize=target.appearance.normalize)
    return AamModel(shape=shape, appearance=appearance, label=Label.ST)
