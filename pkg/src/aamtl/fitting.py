"""Project-out inverse compositional Gauss-Newton fitting.

The shape in the image is ``s = mean + basis @ p`` with the similarity columns
absorbing pose, so ``p`` carries image-frame coordinates. Appearance variation
is projected out of the residual; the steepest-descent images and the
Gauss-Newton Hessian are computed once per model on the reference frame.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .aam import AamModel
from .appearance_model import normalize_appearance
from .exceptions import DegenerateGeometryError
from .geometry import (SimilarityTransform, as_points, as_shape, bilinear_sample, bounding_box,
                       centroid, face_size, triangle_affines)

MAX_ITERATIONS = 300
REL_COST_TOLERANCE = 1e-5
N_RESTARTS = 10


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = MAX_ITERATIONS
    rel_cost_tolerance: float = REL_COST_TOLERANCE
    n_restarts: int = N_RESTARTS
    noise_scale: float = 0.05
    noise_translation: float = 0.02
    noise_rotation: float = 0.0524
    rng_seed: int = 0
    step_halving: bool = True
    max_halvings: int = 8

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.n_restarts < 0:
            raise ValueError("n_restarts must be >= 0")
        if not self.rel_cost_tolerance > 0:
            raise ValueError("rel_cost_tolerance must be positive")
        if min(self.noise_scale, self.noise_translation, self.noise_rotation) < 0:
            raise ValueError("noise magnitudes must be nonnegative")


@dataclass(frozen=True)
class FitResult:
    shape: np.ndarray
    shape_params: np.ndarray
    appearance_params: np.ndarray
    cost_trace: list = field(default_factory=list)
    converged: bool = False
    restart_index: int = 0
    status: str = "max_iterations"

    @property
    def n_iterations(self) -> int:
        return len(self.cost_trace) - 1

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


def _filled_raster(frame, vector) -> np.ndarray:
    """Paint ``vector`` on the frame and extend it outward by nearest masked value."""
    raster = frame.to_raster(vector)
    _, (ri, ci) = ndimage.distance_transform_edt(~frame.mask, return_indices=True)
    return raster[ri, ci]


class ProjectOutFitter:
    """Precomputed quantities for fitting one model."""

    def __init__(self, model: AamModel):
        self.model = model
        app = model.appearance
        frame = app.frame
        self.frame = frame
        self.mean_shape = model.shape.mean
        self.Phi = model.shape.basis
        self.Psi = app.basis
        self.nu = app.mean
        self.ref_vertices = frame.mesh.vertices
        self.triangles = frame.mesh.triangles
        self.template = _filled_raster(frame, self.nu)
        gy, gx = np.gradient(self.template)
        gx = frame.from_raster(gx)
        gy = frame.from_raster(gy)

        # dW/dp at each pixel: barycentric blend of the vertex rows of the basis
        ids = self.triangles[frame.pixel_triangle]
        bary = frame.pixel_bary
        Px = self.Phi[0::2]
        Py = self.Phi[1::2]
        self.dWx = np.einsum("lk,lkj->lj", bary, Px[ids])
        self.dWy = np.einsum("lk,lkj->lj", bary, Py[ids])
        sd = gx[:, None] * self.dWx + gy[:, None] * self.dWy
        self.sd = sd
        self.sd_po = self.project_out(sd)
        self.hessian = self.sd_po.T @ self.sd_po
        self._incident = [np.nonzero((self.triangles == v).any(axis=1))[0]
                          for v in range(frame.n_vertices)]

    def project_out(self, e):
        if self.Psi.shape[1] == 0:
            return e
        return e - self.Psi @ (self.Psi.T @ e)

    def shape(self, p) -> np.ndarray:
        return self.mean_shape + self.Phi @ p

    def params(self, shape) -> np.ndarray:
        return self.Phi.T @ (as_shape(shape) - self.mean_shape)

    def warped(self, image, shape) -> np.ndarray:
        xy = self.frame.warp_points(shape)
        a = bilinear_sample(image, xy[:, 0], xy[:, 1])
        return normalize_appearance(a) if self.model.appearance.normalize else a

    def residual(self, image, shape) -> np.ndarray:
        return self.project_out(self.warped(image, shape) - self.nu)

    def cost(self, image, shape) -> float:
        r = self.residual(image, shape)
        return float(np.mean(r**2))

    def gn_step(self, residual) -> np.ndarray:
        g = self.sd_po.T @ residual
        try:
            return np.linalg.solve(self.hessian, g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(self.hessian, g, rcond=None)[0]

    def incremental_cost(self, delta, warped) -> float:
        """Project-out cost with the template displaced by the incremental warp ``delta``."""
        disp = self.Phi @ np.asarray(delta, dtype=float)
        xy = self.frame.warp_points(self.ref_vertices + disp)
        t = bilinear_sample(self.template, xy[:, 0], xy[:, 1])
        r = self.project_out(t - np.asarray(warped))
        return float(np.mean(r**2))

    def incremental_gradient(self, warped) -> np.ndarray:
        """Analytic gradient of :meth:`incremental_cost` at ``delta = 0``."""
        e = self.project_out(self.nu - np.asarray(warped))
        return 2.0 * (self.sd_po.T @ e) / e.size

    def compose(self, shape, delta) -> np.ndarray:
        """Vertices of ``W(.; p) o W(.; delta)^-1`` to first order in ``delta``."""
        ref = as_points(self.ref_vertices)
        cur = as_points(shape)
        moved = ref - as_points(self.Phi @ delta)
        A = triangle_affines(ref, cur, self.triangles)
        out = np.empty_like(ref)
        for v, tris in enumerate(self._incident):
            h = np.append(moved[v], 1.0)
            out[v] = np.mean(A[tris] @ h, axis=0)
        return out.reshape(-1)


_FITTERS: "weakref.WeakKeyDictionary[AamModel, ProjectOutFitter]" = weakref.WeakKeyDictionary()


def get_fitter(model: AamModel) -> ProjectOutFitter:
    f = _FITTERS.get(model)
    if f is None:
        f = ProjectOutFitter(model)
        _FITTERS[model] = f
    return f


def _healthy(shape, image_shape) -> bool:
    if not np.all(np.isfinite(shape)):
        return False
    fs = face_size(shape)
    return 1.0 <= fs <= 100.0 * max(image_shape)


def fit_single(model: AamModel, image, init, config: FitConfig | None = None) -> FitResult:
    """Gauss-Newton fit from shape parameters ``init``.

    Stops when the relative change of the mean squared project-out residual
    drops below ``config.rel_cost_tolerance`` or after ``config.max_iterations``
    iterations. With step halving a cost-increasing step is halved until it no
    longer increases the cost; if that fails the fit stops at the current
    shape.
    """
    config = config or FitConfig()
    f = get_fitter(model)
    image = np.asarray(image, dtype=float)
    p = np.asarray(init, dtype=float).copy()
    shape = f.shape(p)
    if not _healthy(shape, image.shape):
        raise DegenerateGeometryError("initial shape is degenerate")
    r = f.residual(image, shape)
    cost = float(np.mean(r**2))
    trace = [cost]
    converged = False
    status = "max_iterations"
    if not np.isfinite(cost):
        status = "diverged"
    else:
        for _ in range(config.max_iterations):
            delta = f.gn_step(r)
            step = 1.0
            halvings = config.max_halvings if config.step_halving else 0
            while True:
                new_shape = f.compose(shape, step * delta)
                new_p = f.params(new_shape)
                new_shape = f.shape(new_p)
                if _healthy(new_shape, image.shape):
                    new_r = f.residual(image, new_shape)
                    new_cost = float(np.mean(new_r**2))
                else:
                    new_cost = np.inf
                if new_cost <= cost or halvings == 0:
                    break
                halvings -= 1
                step *= 0.5
            if not np.isfinite(new_cost):
                status = "diverged"
                break
            rel = abs(new_cost - cost) / max(cost, 1e-12)
            if new_cost > cost and config.step_halving:
                # no descent along the halved steps: stay put
                trace.append(cost)
                if rel < config.rel_cost_tolerance:
                    converged, status = True, "converged"
                else:
                    status = "stalled"
                break
            p, shape, r, cost = new_p, new_shape, new_r, new_cost
            trace.append(cost)
            if rel < config.rel_cost_tolerance:
                converged, status = True, "converged"
                break
    a = f.warped(image, shape)
    q = model.appearance.to_params(a)
    return FitResult(shape=shape, shape_params=p, appearance_params=q, cost_trace=trace,
                     converged=converged, status=status)


def base_initialization(model: AamModel, bbox) -> np.ndarray:
    """Place the model mean in ``bbox = (x_min, y_min, x_max, y_max)`` by scale and translation."""
    bbox = np.asarray(bbox, dtype=float)
    w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
    if not (w > 0 and h > 0):
        raise DegenerateGeometryError(f"bounding box has no area: {bbox}")
    mu = model.shape.mean
    mb = bounding_box(mu)
    mw, mh = mb[2] - mb[0], mb[3] - mb[1]
    scale = 0.5 * (w / mw + h / mh)
    pts = as_points(mu)
    mc = 0.5 * (mb[:2] + mb[2:])
    bc = 0.5 * (bbox[:2] + bbox[2:])
    s0 = ((pts - mc) * scale + bc).reshape(-1)
    return model.shape.to_params(s0)


def perturbed_initializations(model: AamModel, base_params, config: FitConfig) -> list:
    """``n_restarts`` Gaussian perturbations of the base placement in scale,
    rotation and translation about the shape centroid."""
    rng = np.random.default_rng(config.rng_seed)
    s0 = model.shape.to_shape(base_params)
    c = centroid(s0)
    fs = face_size(s0)
    out = []
    for _ in range(config.n_restarts):
        ds, dr, dx, dy = rng.standard_normal(4)
        scale = max(1.0 + config.noise_scale * ds, 0.1)
        T = SimilarityTransform(scale, config.noise_rotation * dr)
        t = c - T.matrix @ c + config.noise_translation * fs * np.array([dx, dy])
        T = replace(T, translation=(float(t[0]), float(t[1])))
        out.append(model.shape.to_params(T.apply(s0)))
    return out


def fit_with_restarts(model: AamModel, image, bbox, config: FitConfig | None = None) -> FitResult:
    """Fit from the base initialization and its perturbations; keep the lowest final cost."""
    config = config or FitConfig()
    base = base_initialization(model, bbox)
    inits = [base] + perturbed_initializations(model, base, config)
    best = None
    for k, p0 in enumerate(inits):
        try:
            res = fit_single(model, image, p0, config)
        except DegenerateGeometryError:
            continue
        res = replace(res, restart_index=k)
        if not np.isfinite(res.final_cost):
            if best is None:
                best = res
            continue
        if best is None or not np.isfinite(best.final_cost) or res.final_cost < best.final_cost:
            best = res
    if best is None:
        shape = model.shape.to_shape(base)
        best = FitResult(shape=shape, shape_params=base,
                         appearance_params=np.zeros(model.appearance.n_components),
                         cost_trace=[np.inf], converged=False, status="diverged")
    return best
