"""Appearance model in a reference frame defined by the (scaled) mean shape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateGeometryError, DegenerateInputError, DimensionError
from .geometry import (TriMesh, as_points, as_shape, bilinear_sample, delaunay, face_size,
                       map_points, rasterize)
from .numeric import pca

DEFAULT_FACE_SIZE = 150.0
FRAME_MARGIN = 2.0


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """Raster on which appearance vectors live.

    ``pixel_index[r, c]`` is the vector index of a masked pixel and ``-1``
    elsewhere; indices run densely in row-major order.
    """
    mesh: TriMesh
    mask: np.ndarray = field(repr=False)
    pixel_index: np.ndarray = field(repr=False)
    pixel_triangle: np.ndarray = field(repr=False)
    pixel_bary: np.ndarray = field(repr=False)

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())

    L = n_pixels

    @property
    def raster_shape(self) -> tuple:
        return self.mask.shape

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices

    @property
    def pixel_coords(self) -> np.ndarray:
        """``(L, 2)`` array of (x, y) pixel centres in vector order."""
        rows, cols = np.nonzero(self.mask)
        return np.column_stack([cols, rows]).astype(float)

    def to_raster(self, vector, fill: float = 0.0) -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_pixels,):
            raise DimensionError(f"expected a vector of length {self.n_pixels}")
        out = np.full(self.mask.shape, fill)
        out[self.mask] = vector
        return out

    def from_raster(self, raster) -> np.ndarray:
        return np.asarray(raster, dtype=float)[self.mask]

    def warp_points(self, shape) -> np.ndarray:
        """Image positions ``(L, 2)`` of the frame pixels under the warp frame -> ``shape``."""
        ids = self.mesh.triangles[self.pixel_triangle]
        return map_points(self.pixel_bary, ids, shape)


def make_frame(mesh: TriMesh, raster_shape) -> ReferenceFrame:
    tri_index, bary = rasterize(mesh, raster_shape)
    mask = tri_index >= 0
    pixel_index = np.full(mask.shape, -1, dtype=np.int64)
    pixel_index[mask] = np.arange(int(mask.sum()))
    return ReferenceFrame(mesh=mesh, mask=mask, pixel_index=pixel_index,
                          pixel_triangle=tri_index[mask], pixel_bary=bary[mask])


def build_reference_frame(mean, target_face_size: float = DEFAULT_FACE_SIZE,
                          triangles=None) -> ReferenceFrame:
    """Scale ``mean`` to ``target_face_size`` with a 2-pixel margin and rasterize it."""
    pts = as_points(as_shape(mean))
    fs = face_size(pts)
    if fs <= 0:
        raise DegenerateGeometryError("mean shape has zero extent")
    pts = pts * (target_face_size / fs)
    pts = pts - pts.min(axis=0) + FRAME_MARGIN
    verts = pts.reshape(-1)
    mesh = delaunay(verts) if triangles is None else TriMesh(verts, np.asarray(triangles))
    hi = np.ceil(pts.max(axis=0) + FRAME_MARGIN).astype(int)
    return make_frame(mesh, (int(hi[1]) + 1, int(hi[0]) + 1))


def sample_appearance(frame: ReferenceFrame, image, shape) -> np.ndarray:
    """Warp ``image`` from ``shape`` into the frame and vectorize the masked pixels."""
    shape = as_shape(shape)
    if shape.size != frame.mesh.vertices.size:
        raise DimensionError("shape vertex count differs from the reference frame")
    xy = frame.warp_points(shape)
    return bilinear_sample(image, xy[:, 0], xy[:, 1])


def normalize_appearance(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class AppearanceModel:
    frame: ReferenceFrame
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    normalize: bool = False

    def __post_init__(self):
        # one memory layout so products do not depend on how the model was built
        for name in ("mean", "basis", "eigenvalues"):
            object.__setattr__(self, name, np.ascontiguousarray(getattr(self, name), dtype=float))

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def sample(self, image, shape) -> np.ndarray:
        a = sample_appearance(self.frame, image, shape)
        return normalize_appearance(a) if self.normalize else a

    def to_params(self, a) -> np.ndarray:
        return self.basis.T @ (np.asarray(a, dtype=float) - self.mean)

    def instance(self, q) -> np.ndarray:
        return self.mean + self.basis @ np.asarray(q, dtype=float)


def appearance_matrix(frame: ReferenceFrame, images, shapes, normalize: bool = False) -> np.ndarray:
    """``(L, N)`` matrix of sampled appearance vectors."""
    cols = []
    for img, s in zip(images, shapes):
        a = sample_appearance(frame, img, s)
        cols.append(normalize_appearance(a) if normalize else a)
    return np.column_stack(cols) if cols else np.zeros((frame.n_pixels, 0))


def train_appearance_model(images, shapes, frame: ReferenceFrame,
                           variance_fraction: float = 0.98,
                           normalize: bool = False) -> AppearanceModel:
    """PCA of the training images warped into ``frame``."""
    images = list(images)
    shapes = list(shapes)
    if len(images) != len(shapes):
        raise DimensionError("images and shapes differ in length")
    if len(images) < 2:
        raise DegenerateInputError(f"need at least 2 training images, got {len(images)}")
    A = appearance_matrix(frame, images, shapes, normalize)
    res = pca(A, variance_fraction)
    return AppearanceModel(frame=frame, mean=res.mean, basis=res.basis,
                           eigenvalues=res.eigenvalues, normalize=normalize)
