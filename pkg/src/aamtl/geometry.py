"""Landmark geometry: similarity transforms, Procrustes alignment, meshes and warps.

Shapes are flat float arrays laid out ``(x1, y1, x2, y2, ...)``. Images are
2-D arrays indexed ``[row, col]`` with pixel centres at integer coordinates,
so point ``(x, y)`` sits at ``image[y, x]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .exceptions import DegenerateGeometryError, DegenerateInputError, DimensionError
from .numeric import orthonormalize

PROCRUSTES_TOL = 1e-8
PROCRUSTES_MAX_ITER = 100


def as_shape(points) -> np.ndarray:
    """Validate and flatten a shape given as ``(V, 2)`` or ``(2V,)``."""
    s = np.asarray(points, dtype=float).reshape(-1)
    if s.size % 2 or s.size < 6:
        raise DimensionError(f"a shape needs an even number >= 6 of coordinates, got {s.size}")
    if not np.all(np.isfinite(s)):
        raise ValueError("shape coordinates must be finite")
    return s


def as_points(shape) -> np.ndarray:
    return np.asarray(shape, dtype=float).reshape(-1, 2)


def rotate90(shape) -> np.ndarray:
    """The shape rotated by +90 degrees about the origin: (x, y) -> (-y, x)."""
    pts = as_points(shape)
    return np.column_stack([-pts[:, 1], pts[:, 0]]).reshape(-1)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, shape) -> np.ndarray:
        pts = as_points(shape)
        return (pts @ self.matrix.T + np.asarray(self.translation)).reshape(-1)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` applied after ``other``."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return SimilarityTransform(self.scale * other.scale,
                                   self.rotation + other.rotation, tuple(t))

    def inverse(self) -> "SimilarityTransform":
        inv = SimilarityTransform(1.0 / self.scale, -self.rotation)
        t = -(inv.matrix @ np.asarray(self.translation))
        return SimilarityTransform(inv.scale, inv.rotation, tuple(t))


def optimal_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity transform ``T`` minimising ``||T(src) - dst||^2``."""
    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise DimensionError(f"shapes have {len(a)} and {len(b)} points")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    denom = np.sum(a0**2)
    if denom <= 1e-300 or denom <= 1e-24 * max(np.sum(a**2), 1e-300):
        raise DegenerateGeometryError("source shape has no spread")
    dot = np.sum(a0 * b0)
    cross = np.sum(a0[:, 0] * b0[:, 1] - a0[:, 1] * b0[:, 0])
    sc = dot / denom
    ss = cross / denom
    scale = float(np.hypot(sc, ss))
    if scale <= 0:
        raise DegenerateGeometryError("destination shape has no spread")
    rot = float(np.arctan2(ss, sc))
    R = np.array([[sc, -ss], [ss, sc]])
    t = cb - R @ ca
    return SimilarityTransform(scale, rot, (float(t[0]), float(t[1])))


def centroid(shape) -> np.ndarray:
    return as_points(shape).mean(axis=0)


def _normalize(shape) -> np.ndarray:
    pts = as_points(shape)
    pts = pts - pts.mean(axis=0)
    n = np.linalg.norm(pts)
    if n == 0:
        raise DegenerateGeometryError("shape has no spread")
    return (pts / n).reshape(-1)


def _rotate_onto(shape, anchor) -> np.ndarray:
    """Rotate a centred shape about the origin to best match ``anchor``."""
    a = as_points(shape)
    b = as_points(anchor)
    dot = np.sum(a * b)
    cross = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    th = np.arctan2(cross, dot)
    c, s = np.cos(th), np.sin(th)
    return (a @ np.array([[c, -s], [s, c]]).T).reshape(-1)


@dataclass(frozen=True)
class AlignedShapeSet:
    """Procrustes-aligned shapes (one per column) and their mean."""
    shapes: np.ndarray
    mean: np.ndarray
    transforms: tuple = ()
    objective_trace: tuple = ()
    n_iterations: int = 0

    @property
    def n_samples(self) -> int:
        return self.shapes.shape[1]


def procrustes_align(shapes, tol: float = PROCRUSTES_TOL,
                     max_iter: int = PROCRUSTES_MAX_ITER) -> AlignedShapeSet:
    """Generalized Procrustes analysis.

    The mean is kept centred at the origin with unit Frobenius norm and its
    rotation is anchored to the first input shape.
    """
    S = [as_shape(s) for s in shapes]
    if not S:
        raise DegenerateInputError("procrustes_align needs at least one shape")
    n_coords = S[0].size
    if any(s.size != n_coords for s in S):
        raise DimensionError("all shapes must have the same number of landmarks")

    anchor = _normalize(S[0])
    mean = anchor.copy()
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        transforms = [optimal_similarity(s, mean) for s in S]
        aligned = np.column_stack([T.apply(s) for T, s in zip(transforms, S)])
        trace.append(float(np.sum((aligned - mean[:, None]) ** 2)))
        new_mean = _rotate_onto(_normalize(aligned.mean(axis=1)), anchor)
        moved = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if moved < tol:
            break
    transforms = [optimal_similarity(s, mean) for s in S]
    aligned = np.column_stack([T.apply(s) for T, s in zip(transforms, S)])
    trace.append(float(np.sum((aligned - mean[:, None]) ** 2)))
    return AlignedShapeSet(shapes=aligned, mean=aligned.mean(axis=1),
                           transforms=tuple(transforms),
                           objective_trace=tuple(trace), n_iterations=it)


def similarity_tangent(mean) -> np.ndarray:
    """The four raw columns: shape, shape rotated 90 degrees, unit x, unit y."""
    m = as_shape(mean)
    v = m.size // 2
    tx = np.tile([1.0, 0.0], v)
    ty = np.tile([0.0, 1.0], v)
    return np.column_stack([m, rotate90(m), tx, ty])


def global_similarity_basis(mean) -> np.ndarray:
    """Orthonormal ``(2V, 4)`` basis spanning similarity motions of ``mean``."""
    Q = orthonormalize(similarity_tangent(mean))
    if Q.shape[1] != 4:
        raise DegenerateGeometryError("mean shape does not span a 4-D similarity space")
    return Q


def face_size(shape) -> float:
    """Mean of bounding-box width and height."""
    pts = as_points(shape)
    ext = pts.max(axis=0) - pts.min(axis=0)
    return float(0.5 * (ext[0] + ext[1]))


def bounding_box(shape) -> np.ndarray:
    """``(x_min, y_min, x_max, y_max)``."""
    pts = as_points(shape)
    return np.concatenate([pts.min(axis=0), pts.max(axis=0)])


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", as_shape(self.vertices))
        tri = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tri.size and (tri.min() < 0 or tri.max() >= self.n_vertices):
            raise DimensionError("triangle index out of range")
        object.__setattr__(self, "triangles", tri)

    @property
    def n_vertices(self) -> int:
        return self.vertices.size // 2

    @property
    def points(self) -> np.ndarray:
        return as_points(self.vertices)

    def with_vertices(self, vertices) -> "TriMesh":
        vertices = as_shape(vertices)
        if vertices.size != self.vertices.size:
            raise DimensionError("vertex count differs from the mesh")
        return TriMesh(vertices, self.triangles)


def delaunay(vertices) -> TriMesh:
    """Delaunay triangulation with a canonical, input-order-determined layout.

    Each triangle is listed counter-clockwise starting from its lowest
    vertex index, and triangles are sorted lexicographically.
    """
    s = as_shape(vertices)
    pts = as_points(s)
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateGeometryError(f"cannot triangulate: {exc}") from None
    out = []
    for t in tri.simplices:
        a, b, c = pts[t]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if area2 == 0:
            continue
        t = list(t) if area2 > 0 else [t[0], t[2], t[1]]
        k = int(np.argmin(t))
        out.append(t[k:] + t[:k])
    if not out:
        raise DegenerateGeometryError("all points are collinear")
    return TriMesh(s, np.array(sorted(out), dtype=np.int64))


def barycentric(tri_points, xy) -> np.ndarray:
    """Barycentric coordinates of points ``xy`` (n, 2) in one triangle (3, 2)."""
    a, b, c = tri_points
    T = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    uv = np.linalg.solve(T, (np.asarray(xy) - a).T).T
    return np.column_stack([1 - uv.sum(axis=1), uv])


def rasterize(mesh: TriMesh, shape_hw, tol: float = 1e-10):
    """Assign every pixel centre of a ``(H, W)`` raster to a mesh triangle.

    Returns ``(tri_index, bary)``: an ``(H, W)`` int array holding the lowest
    index of a triangle containing the pixel centre (``-1`` outside), and an
    ``(H, W, 3)`` array of barycentric coordinates in that triangle.
    """
    H, W = shape_hw
    tri_index = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    pts = mesh.points
    for k, t in enumerate(mesh.triangles):
        tp = pts[t]
        lo = np.floor(tp.min(axis=0)).astype(int)
        hi = np.ceil(tp.max(axis=0)).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        try:
            bc = barycentric(tp, np.column_stack([xs.ravel(), ys.ravel()]))
        except np.linalg.LinAlgError:
            continue
        inside = np.all(bc >= -tol, axis=1)
        free = tri_index[ys.ravel(), xs.ravel()] < 0
        sel = inside & free
        tri_index[ys.ravel()[sel], xs.ravel()[sel]] = k
        bary[ys.ravel()[sel], xs.ravel()[sel]] = bc[sel]
    return tri_index, bary


def bilinear_sample(image, x, y) -> np.ndarray:
    """Bilinear interpolation of ``image`` at points (x, y), clamped to the border."""
    img = np.asarray(image, dtype=float)
    H, W = img.shape
    x = np.clip(np.asarray(x, dtype=float), 0.0, W - 1.0)
    y = np.clip(np.asarray(y, dtype=float), 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def map_points(bary, tri_vertex_ids, dst_vertices):
    """Map points given by barycentric coordinates into a destination mesh."""
    dst = as_points(dst_vertices)
    corners = dst[tri_vertex_ids]  # (n, 3, 2)
    return np.einsum("nk,nkd->nd", bary, corners)


def piecewise_affine_warp(src_mesh: TriMesh, dst_vertices, image, out_shape=None) -> np.ndarray:
    """Resample ``image`` onto the raster of ``src_mesh``.

    Each output pixel inside a source triangle is carried by that triangle's
    affine map to the matching triangle of ``dst_vertices`` and sampled
    bilinearly from ``image``; other pixels are 0. ``out_shape`` defaults to
    the smallest raster holding the source mesh.
    """
    dst = as_shape(dst_vertices)
    if dst.size != src_mesh.vertices.size:
        raise DimensionError("destination vertex count differs from the mesh")
    if out_shape is None:
        hi = np.ceil(src_mesh.points.max(axis=0)).astype(int)
        out_shape = (int(hi[1]) + 1, int(hi[0]) + 1)
    tri_index, bary = rasterize(src_mesh, out_shape)
    out = np.zeros(out_shape)
    inside = tri_index >= 0
    ids = src_mesh.triangles[tri_index[inside]]
    xy = map_points(bary[inside], ids, dst)
    out[inside] = bilinear_sample(image, xy[:, 0], xy[:, 1])
    return out


def triangle_affines(src_points, dst_points, triangles) -> np.ndarray:
    """Per-triangle ``(2, 3)`` affine maps carrying src triangles onto dst."""
    out = np.empty((len(triangles), 2, 3))
    for k, t in enumerate(triangles):
        S = np.column_stack([src_points[t], np.ones(3)])
        out[k] = np.linalg.solve(S, dst_points[t]).T
    return out
