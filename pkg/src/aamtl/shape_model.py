"""Statistical shape model: mean, similarity basis plus local PCA basis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateInputError
from .geometry import AlignedShapeSet, as_shape, global_similarity_basis, procrustes_align
from .numeric import fix_signs, pca, project, reconstruct

N_GLOBAL = 4
DEFAULT_VARIANCE_FRACTION = 0.98


@dataclass(frozen=True)
class ShapeModel:
    """``mean`` (2V,), ``basis`` (2V, 4 + K) = [global | local], local ``eigenvalues`` (K,).

    Shapes passed to :meth:`to_params` live in the same coordinate space as
    ``mean``; image-frame shapes are reached through the global columns.
    """
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    n_global: int = N_GLOBAL

    def __post_init__(self):
        # one memory layout so products do not depend on how the model was built
        for name in ("mean", "basis", "eigenvalues"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))

    @property
    def n_vertices(self) -> int:
        return self.mean.size // 2

    @property
    def n_local(self) -> int:
        return self.basis.shape[1] - self.n_global

    @property
    def n_params(self) -> int:
        return self.basis.shape[1]

    @property
    def global_basis(self) -> np.ndarray:
        return self.basis[:, :self.n_global]

    @property
    def local_basis(self) -> np.ndarray:
        return self.basis[:, self.n_global:]

    def to_params(self, shape) -> np.ndarray:
        return project(self.basis, self.mean, as_shape(shape))

    def to_shape(self, params) -> np.ndarray:
        return reconstruct(self.basis, self.mean, params)


def shape_to_params(model: ShapeModel, s) -> np.ndarray:
    return model.to_params(s)


def params_to_shape(model: ShapeModel, p) -> np.ndarray:
    return model.to_shape(p)


def local_model(mean, local_columns, samples) -> ShapeModel:
    """Assemble a model whose basis is [similarity basis at ``mean`` | ``local_columns``].

    ``local_columns`` must already be orthonormal and orthogonal to the
    similarity basis. Eigenvalues are the sample variances of ``samples``
    (2V, N) along each local column.
    """
    Phi_g = global_similarity_basis(mean)
    basis = np.column_stack([Phi_g, local_columns])
    X = np.asarray(samples, dtype=float)
    Xc = X - X.mean(axis=1, keepdims=True)
    var = np.sum((local_columns.T @ Xc) ** 2, axis=1) / max(X.shape[1] - 1, 1)
    return ShapeModel(mean=np.asarray(mean, dtype=float), basis=basis, eigenvalues=var)


def train_shape_model(shapes, variance_fraction: float = DEFAULT_VARIANCE_FRACTION,
                      aligned: AlignedShapeSet | None = None) -> ShapeModel:
    """Procrustes-align ``shapes`` and build the combined shape basis.

    The local components are principal directions of the aligned shapes after
    their similarity component at the mean is projected out, so they are
    orthogonal to the global columns by construction.
    """
    shapes = [as_shape(s) for s in shapes]
    if len(shapes) < 2:
        raise DegenerateInputError(f"need at least 2 shapes, got {len(shapes)}")
    if aligned is None:
        aligned = procrustes_align(shapes)
    mean = aligned.mean
    Phi_g = global_similarity_basis(mean)
    X = aligned.shapes
    Xc = X - mean[:, None]
    Xr = Xc - Phi_g @ (Phi_g.T @ Xc)
    res = pca(Xr + mean[:, None], variance_fraction)
    Phi_l = res.basis - Phi_g @ (Phi_g.T @ res.basis)
    if Phi_l.shape[1]:
        Phi_l = fix_signs(Phi_l / np.linalg.norm(Phi_l, axis=0))
    return ShapeModel(mean=mean, basis=np.column_stack([Phi_g, Phi_l]),
                      eigenvalues=res.eigenvalues)
