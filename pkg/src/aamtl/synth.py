"""Synthetic landmark/image datasets with planted linear factors.

Every sample is ``pose(base + sum_i c_i * direction_i)`` for the shape and
``base_texture + sum_j a_j * pattern_j`` warped onto that shape for the image,
so the generating subspaces are known exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance_model import ReferenceFrame, build_reference_frame
from .exceptions import DegenerateGeometryError
from .dataset_io import ManifestEntry, save_image, save_pts, write_manifest
from .geometry import (SimilarityTransform, TriMesh, as_shape, bilinear_sample, delaunay,
                       face_size, map_points, optimal_similarity, rasterize, similarity_tangent)
from .numeric import orthonormalize
from .transfer import rotate_shape_basis

# 20-vertex stylized face in unit coordinates (x right, y down).
BASE_FACE = np.array([
    # outline: left temple, down around the chin, right temple
    [-0.45, -0.10], [-0.42, 0.20], [-0.30, 0.45], [0.00, 0.58],
    [0.30, 0.45], [0.42, 0.20], [0.45, -0.10],
    # eyebrows
    [-0.32, -0.32], [-0.12, -0.35], [0.12, -0.35], [0.32, -0.32],
    # eye corners
    [-0.28, -0.18], [-0.12, -0.18], [0.12, -0.18], [0.28, -0.18],
    # nose tip
    [0.00, 0.05],
    # mouth: left corner, upper lip, right corner, lower lip
    [-0.17, 0.30], [0.00, 0.25], [0.17, 0.30], [0.00, 0.37],
])

OUTLINE = list(range(0, 7))
BROWS = list(range(7, 11))
EYES = list(range(11, 15))
NOSE = 15
MOUTH = list(range(16, 20))

# per-vertex displacement fields used as raw deformation directions
_MOTIONS = {
    "mouth_open": {19: (0, 1.0), 17: (0, -0.3), 3: (0, 0.6), 2: (0, 0.3), 4: (0, 0.3)},
    "smile": {16: (-0.8, -0.6), 18: (0.8, -0.6), 19: (0, -0.2)},
    "brow_raise": {7: (0, -1.0), 8: (0, -1.0), 9: (0, -1.0), 10: (0, -1.0),
                   11: (0, -0.2), 12: (0, -0.2), 13: (0, -0.2), 14: (0, -0.2)},
    "brow_furrow": {8: (0.6, 0.8), 9: (-0.6, 0.8), 7: (0, 0.3), 10: (0, 0.3)},
    "grimace": {16: (-0.7, 0.3), 18: (0.7, 0.3), 17: (0, 0.4), 19: (0, -0.4),
                12: (0, 0.3), 13: (0, 0.3), 8: (0.3, 0.5), 9: (-0.3, 0.5)},
    "jaw_shift": {2: (0.6, 0), 3: (1.0, 0), 4: (0.6, 0), 19: (0.4, 0)},
    "pucker": {16: (0.8, 0), 18: (-0.8, 0), 17: (0, -0.3), 19: (0, 0.3)},
    "nose_length": {15: (0, 1.0), 17: (0, 0.3)},
    "face_width": {0: (-0.6, 0), 1: (-1.0, 0), 2: (-0.6, 0), 4: (0.6, 0), 5: (1.0, 0),
                   6: (0.6, 0)},
    "eye_spacing": {11: (-1.0, 0), 12: (-0.6, 0), 13: (0.6, 0), 14: (1.0, 0)},
}


def base_face(face_px: float = 80.0) -> np.ndarray:
    """The stylized face scaled so that its face size is ``face_px``, centred at 0."""
    pts = BASE_FACE * (face_px / face_size(BASE_FACE))
    pts = pts - pts.mean(axis=0)
    return pts.reshape(-1)


def motion(name: str, n_vertices: int = len(BASE_FACE)) -> np.ndarray:
    v = np.zeros((n_vertices, 2))
    for i, d in _MOTIONS[name].items():
        v[i] = d
    return v.reshape(-1)


def deformation_directions(base, names) -> np.ndarray:
    """Unit directions for the named motions, orthogonal to the similarity
    motions of ``base`` and to each other (Gram-Schmidt in the given order)."""
    raw = np.column_stack([similarity_tangent(base)] + [motion(n) for n in names])
    Q = orthonormalize(raw)
    if Q.shape[1] != 4 + len(names):
        raise DegenerateGeometryError("deformation directions are linearly dependent")
    return Q[:, 4:]


@dataclass(frozen=True)
class Blob:
    """Isotropic Gaussian intensity bump placed relative to landmarks.

    ``anchor`` lists the vertex indices whose mean is the blob centre;
    ``offset`` and ``sigma`` are fractions of the frame face size.
    """
    anchor: tuple
    amplitude: float
    sigma: float = 0.08
    offset: tuple = (0.0, 0.0)

    def render(self, frame: ReferenceFrame) -> np.ndarray:
        pts = frame.mesh.points
        fs = face_size(pts)
        c = pts[list(self.anchor)].mean(axis=0) + np.asarray(self.offset) * fs
        H, W = frame.raster_shape
        ys, xs = np.mgrid[0:H, 0:W]
        s = self.sigma * fs
        return self.amplitude * np.exp(-((xs - c[0]) ** 2 + (ys - c[1]) ** 2) / (2 * s * s))


def render_texture(frame: ReferenceFrame, fill: float, blobs) -> np.ndarray:
    raster = np.full(frame.raster_shape, float(fill))
    for b in blobs:
        raster = raster + b.render(frame)
    return raster


@dataclass(frozen=True)
class SynthSpec:
    """Generator description.

    Shape directions are unit vectors in the base-shape coordinate space and
    stddevs are in the same (pixel) units; ``pose_jitter`` holds the stddevs
    of the scale factor, rotation (radians) and translation (pixels).
    """
    base_shape: np.ndarray
    shape_factors: tuple = ()
    appearance_factors: tuple = ()
    base_texture: tuple = ()
    skin: float = 0.6
    background: float = 0.2
    pose_jitter: tuple = (0.0, 0.0, 0.0)
    noise_stddev: float = 0.0
    n_samples: int = 10
    rng_seed: int = 0
    image_size: tuple = (128, 128)
    texture_face_size: float = 60.0
    subject_prefix: str = "s"

    def __post_init__(self):
        for d, sd in self.shape_factors:
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError("shape factor directions must have unit norm")
            if sd < 0:
                raise ValueError("stddevs must be nonnegative")
        for _, sd in self.appearance_factors:
            if sd < 0:
                raise ValueError("stddevs must be nonnegative")


@dataclass
class SynthDataset:
    images: list
    shapes: np.ndarray
    shape_coeffs: np.ndarray
    appearance_coeffs: np.ndarray
    poses: list
    subjects: list
    texture_frame: ReferenceFrame = field(repr=False)
    textures: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "SynthDataset":
        idx = list(idx)
        return SynthDataset(
            images=[self.images[i] for i in idx], shapes=self.shapes[idx],
            shape_coeffs=self.shape_coeffs[idx], appearance_coeffs=self.appearance_coeffs[idx],
            poses=[self.poses[i] for i in idx], subjects=[self.subjects[i] for i in idx],
            texture_frame=self.texture_frame,
            textures=[self.textures[i] for i in idx] if self.textures else [])


def render_image(shape, texture, texture_frame: ReferenceFrame, image_size, background) -> np.ndarray:
    """Paint ``texture`` (a raster on ``texture_frame``) onto ``shape`` in an image."""
    mesh = TriMesh(as_shape(shape), texture_frame.mesh.triangles)
    tri_index, bary = rasterize(mesh, image_size)
    if np.isscalar(background):
        img = np.full(image_size, float(background))
    else:
        img = np.array(background, dtype=float, copy=True)
    inside = tri_index >= 0
    ids = mesh.triangles[tri_index[inside]]
    xy = map_points(bary[inside], ids, texture_frame.mesh.vertices)
    img[inside] = bilinear_sample(texture, xy[:, 0], xy[:, 1])
    return img


def background_raster(image_size, level: float) -> np.ndarray:
    H, W = image_size
    ys, xs = np.mgrid[0:H, 0:W]
    return level + 0.05 * np.sin(xs / W * np.pi) * np.cos(ys / H * np.pi)


def generate(spec: SynthSpec) -> SynthDataset:
    """Draw ``spec.n_samples`` samples; deterministic in ``spec.rng_seed``."""
    base = as_shape(spec.base_shape)
    rng = np.random.default_rng(spec.rng_seed)
    frame = build_reference_frame(base, spec.texture_face_size, triangles=delaunay(base).triangles)
    base_tex = render_texture(frame, spec.skin, spec.base_texture)
    patterns = [np.asarray(p.render(frame) if isinstance(p, Blob) else p, dtype=float)
                for p, _ in spec.appearance_factors]
    bg = background_raster(spec.image_size, spec.background)
    H, W = spec.image_size
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    ks, ka = len(spec.shape_factors), len(spec.appearance_factors)
    s_sd = np.array([sd for _, sd in spec.shape_factors])
    a_sd = np.array([sd for _, sd in spec.appearance_factors])
    D = np.column_stack([d for d, _ in spec.shape_factors]) if ks else np.zeros((base.size, 0))

    images, shapes, cs, cas, poses, textures = [], [], [], [], [], []
    for _ in range(spec.n_samples):
        c = rng.standard_normal(ks) * s_sd if ks else np.zeros(0)
        ca = rng.standard_normal(ka) * a_sd if ka else np.zeros(0)
        js, jr, jx, jy = rng.standard_normal(4)
        pose = SimilarityTransform(
            max(1.0 + spec.pose_jitter[0] * js, 0.2), spec.pose_jitter[1] * jr,
            tuple(centre + spec.pose_jitter[2] * np.array([jx, jy])))
        local = base + D @ c
        shape = pose.apply(local)
        tex = base_tex.copy()
        for a, pat in zip(ca, patterns):
            tex += a * pat
        img = render_image(shape, tex, frame, spec.image_size, bg)
        if spec.noise_stddev > 0:
            img = img + spec.noise_stddev * rng.standard_normal(img.shape)
        images.append(img)
        shapes.append(shape)
        cs.append(c)
        cas.append(ca)
        poses.append(pose)
        textures.append(tex)
    subjects = [f"{spec.subject_prefix}{i:03d}" for i in range(spec.n_samples)]
    return SynthDataset(images=images, shapes=np.array(shapes), shape_coeffs=np.array(cs).reshape(spec.n_samples, ks),
                        appearance_coeffs=np.array(cas).reshape(spec.n_samples, ka), poses=poses,
                        subjects=subjects, texture_frame=frame, textures=textures)


# Planted transfer scenario ------------------------------------------------

# dark eyes, mouth and brows shared by every synthetic face
FACE_FEATURES = (Blob((11, 12), -0.30, 0.05), Blob((13, 14), -0.30, 0.05),
                 Blob((16, 17, 18, 19), -0.30, 0.06), Blob((7, 8), -0.2, 0.04),
                 Blob((9, 10), -0.2, 0.04))

SOURCE_ONLY_MOTIONS = ("smile", "mouth_open", "jaw_shift", "eye_spacing")
PLANTED_MOTION = "grimace"
TARGET_ONLY_MOTIONS = ("brow_raise", "nose_length", "brow_furrow", "pucker")


@dataclass
class PlantedScenario:
    source: SynthDataset
    target: SynthDataset
    target_test: SynthDataset
    planted_factor: np.ndarray
    base_shape: np.ndarray
    directions: dict


def planted_transfer_scenario(seed: int = 0, n_source: int = 100, n_target: int = 5,
                              n_test: int = 40, face_px: float = 80.0,
                              image_size=(128, 128), texture_face_size: float = 60.0,
                              planted_source_sd: float = 8.0, planted_target_sd: float = 20.0,
                              source_sds=(25.0, 20.0, 15.0, 10.0),
                              target_only_sds=(10.0, 10.0, 10.0, 8.0),
                              noise_stddev: float = 0.01) -> PlantedScenario:
    """Source and target domains sharing one planted shape factor.

    The source varies strongly along four source-only motions and weakly
    along the planted one; the target varies mostly along the planted motion
    plus a few target-only motions that the source never shows. Source and
    target also differ in base texture and appearance factors.
    """
    base = base_face(face_px)
    names = list(SOURCE_ONLY_MOTIONS) + [PLANTED_MOTION] + list(TARGET_ONLY_MOTIONS)
    D = deformation_directions(base, names)
    dirs = {n: D[:, i] for i, n in enumerate(names)}
    planted = dirs[PLANTED_MOTION]

    features = FACE_FEATURES
    shared_app = (Blob((8, 9), 0.25, 0.08, (0, -0.08)), Blob((1, 2), 0.25, 0.10))
    source_app = (Blob((0, 1), 0.3, 0.15), Blob((5, 6), 0.3, 0.15), Blob((15,), 0.25, 0.1))

    source = generate(SynthSpec(
        base_shape=base,
        shape_factors=tuple((dirs[n], sd) for n, sd in zip(SOURCE_ONLY_MOTIONS, source_sds))
        + ((planted, planted_source_sd),),
        appearance_factors=tuple((b, 1.0) for b in source_app) + tuple((b, 0.3) for b in shared_app),
        base_texture=features, skin=0.6, background=0.2,
        pose_jitter=(0.05, 0.05, 4.0), noise_stddev=noise_stddev, n_samples=n_source,
        rng_seed=seed * 7919 + 1, image_size=tuple(image_size),
        texture_face_size=texture_face_size, subject_prefix="src"))

    target_kw = dict(
        base_shape=base,
        shape_factors=((planted, planted_target_sd),)
        + tuple((dirs[n], sd) for n, sd in zip(TARGET_ONLY_MOTIONS, target_only_sds)),
        appearance_factors=tuple((b, 1.0) for b in shared_app),
        base_texture=features + (Blob((3,), -0.15, 0.1, (0, -0.1)),), skin=0.5, background=0.25,
        pose_jitter=(0.05, 0.05, 4.0), noise_stddev=noise_stddev,
        image_size=tuple(image_size), texture_face_size=texture_face_size)
    target = generate(SynthSpec(n_samples=n_target, rng_seed=seed * 7919 + 2,
                                subject_prefix="tgt", **target_kw))
    test = generate(SynthSpec(n_samples=n_test, rng_seed=seed * 7919 + 3,
                              subject_prefix="test", **target_kw))
    return PlantedScenario(source=source, target=target, target_test=test,
                           planted_factor=planted, base_shape=base, directions=dirs)


def direction_in_frame(direction, base, model_mean) -> np.ndarray:
    """Express a base-frame displacement direction in a model's Procrustes frame."""
    T = optimal_similarity(base, model_mean)
    d = rotate_shape_basis(np.asarray(direction)[:, None], T.rotation)[:, 0]
    return d / np.linalg.norm(d)


def write_dataset(dataset: SynthDataset, directory, split: str = "train", bits: int = 16) -> list:
    """Write images, ``.pts`` files and a ``manifest.tsv`` under ``directory``.

    Returns the manifest entries (absolute paths).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for subj, img, shape in zip(dataset.subjects, dataset.images, dataset.shapes):
        ip, pp = directory / f"{subj}.png", directory / f"{subj}.pts"
        save_image(ip, img, bits=bits)
        save_pts(pp, shape)
        entries.append(ManifestEntry(str(ip), str(pp), subj, split))
    return entries


def write_scenario(scenario: PlantedScenario, directory) -> dict:
    """Write the source, target and test splits of a planted scenario.

    Produces ``source/``, ``target/`` (train split plus test split) and
    ``planted_factor.json``; returns the manifest paths.
    """
    directory = Path(directory)
    src = write_dataset(scenario.source, directory / "source", "train")
    tgt = write_dataset(scenario.target, directory / "target", "train")
    tst = write_dataset(scenario.target_test, directory / "target", "test")
    (directory / "source" / "manifest.tsv").write_text(write_manifest(src, directory / "source"))
    (directory / "target" / "manifest.tsv").write_text(write_manifest(tgt + tst, directory / "target"))
    truth = {"planted_factor": [float(v) for v in scenario.planted_factor],
             "base_shape": [float(v) for v in scenario.base_shape]}
    (directory / "planted_factor.json").write_text(json.dumps(truth, sort_keys=True, indent=1) + "\n")
    return {"source": str(directory / "source" / "manifest.tsv"),
            "target": str(directory / "target" / "manifest.tsv")}
