"""Landmark files, manifests, grayscale images and the model container."""
from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .aam import AamModel, Label
from .appearance_model import AppearanceModel, make_frame
from .exceptions import (ChecksumError, CoordinateError, CountMismatchError, DimensionError,
                         HeaderError, ParseError, TruncatedFileError, VersionMismatchError,
                         ModelFormatError)
from .geometry import TriMesh
from .shape_model import ShapeModel

N_POINTS_SCHEME = 66
INNER_MOUTH_CORNERS = (60, 64)


# .pts landmark files ----------------------------------------------------------

@dataclass(frozen=True)
class LandmarkFile:
    version: int
    n_points: int
    points: tuple  # ((x, y), ...)

    def __post_init__(self):
        if len(self.points) != self.n_points:
            raise CountMismatchError(f"{len(self.points)} points but n_points={self.n_points}")
        if self.n_points < 3:
            raise ParseError("a landmark file needs at least 3 points")

    @property
    def shape(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float).reshape(-1)

    @classmethod
    def from_shape(cls, shape, version: int = 1) -> "LandmarkFile":
        pts = np.asarray(shape, dtype=float).reshape(-1, 2)
        return cls(version, len(pts), tuple((float(x), float(y)) for x, y in pts))


_HEADER = re.compile(r"^\s*(version|n_points)\s*:\s*(\S+)\s*$")


def parse_pts(text: str) -> LandmarkFile:
    """Parse ibug-style ``.pts`` text."""
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines) and lines[i].strip() != "{":
        raw = lines[i]
        if raw.strip():
            m = _HEADER.match(raw)
            if not m:
                raise HeaderError(f"unexpected header line {raw.strip()!r}", i + 1)
            key, val = m.groups()
            if key in header:
                raise HeaderError(f"duplicate {key}", i + 1)
            try:
                header[key] = int(val)
            except ValueError:
                raise HeaderError(f"{key} must be an integer, got {val!r}", i + 1) from None
        i += 1
    if i == len(lines):
        raise HeaderError("missing '{'", len(lines))
    for key in ("version", "n_points"):
        if key not in header:
            raise HeaderError(f"missing {key}", i + 1)
    open_line = i + 1
    pts = []
    last = open_line
    i += 1
    closed = False
    while i < len(lines):
        raw = lines[i].strip()
        if raw == "}":
            closed = True
            break
        if raw:
            fields = raw.split()
            if len(fields) != 2:
                raise CoordinateError(f"expected 'x y', got {raw!r}", i + 1)
            try:
                x, y = float(fields[0]), float(fields[1])
            except ValueError:
                raise CoordinateError(f"non-numeric coordinate in {raw!r}", i + 1) from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise CoordinateError(f"non-finite coordinate in {raw!r}", i + 1)
            pts.append((x, y))
            last = i + 1
        i += 1
    if not closed:
        raise ParseError("missing '}'", len(lines))
    if len(pts) != header["n_points"]:
        raise CountMismatchError(
            f"n_points is {header['n_points']} but the block has {len(pts)} coordinate lines",
            last)
    return LandmarkFile(header["version"], header["n_points"], tuple(pts))


def write_pts(lf: LandmarkFile) -> str:
    """Canonical text: shortest round-trip float formatting, one point per line."""
    body = "".join(f"{repr(float(x))} {repr(float(y))}\n" for x, y in lf.points)
    return f"version: {lf.version}\nn_points: {lf.n_points}\n{{\n{body}}}\n"


def read_pts(path) -> np.ndarray:
    text = Path(path).read_text()
    try:
        return parse_pts(text).shape
    except ParseError as exc:
        err = type(exc)(f"{path}: {exc}")
        err.line = exc.line
        raise err from None


def save_pts(path, shape) -> None:
    Path(path).write_text(write_pts(LandmarkFile.from_shape(shape)))


def trim_68_to_66(shape, drop=INNER_MOUTH_CORNERS) -> np.ndarray:
    """Remove the two inner-mouth-corner points from a 68-point shape."""
    pts = np.asarray(shape, dtype=float).reshape(-1, 2)
    if len(pts) != 68:
        raise DimensionError(f"expected a 68-point shape, got {len(pts)} points")
    keep = [i for i in range(68) if i not in set(drop)]
    return pts[keep].reshape(-1)


# images ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Grayscale image as floats in [0, 1]; 8- and 16-bit inputs are supported."""
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        return arr / 65535.0
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_image(path, image, bits: int = 16) -> None:
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(path)
    else:
        raise ValueError("bits must be 8 or 16")


# manifests ------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image: str
    landmarks: str
    subject: str
    split: str = "train"


DEFAULT_SUBJECT_PATTERN = r"^([^_./]+)"


def subject_from_filename(path, pattern: str = DEFAULT_SUBJECT_PATTERN) -> str:
    name = Path(path).name
    m = re.search(pattern, name)
    if not m or not m.group(1):
        raise ParseError(f"cannot extract a subject id from {name!r} with {pattern!r}")
    return m.group(1)


def parse_manifest(text: str, base_dir=None, subject_pattern: str = DEFAULT_SUBJECT_PATTERN) -> list:
    """Tab-separated ``image  landmarks  subject  split`` lines.

    ``#`` starts a comment. A three-column line (``image landmarks split``)
    takes its subject id from the image filename via ``subject_pattern``.
    Relative paths are resolved against ``base_dir``.
    """
    entries = []
    seen = set()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) == 3:
            img, pts, split = fields
            subj = subject_from_filename(img, subject_pattern)
        elif len(fields) == 4:
            img, pts, subj, split = fields
        else:
            raise ParseError(f"expected 3 or 4 tab-separated fields, got {len(fields)}", n)
        if split not in ("train", "test"):
            raise ParseError(f"split must be 'train' or 'test', got {split!r}", n)
        if not subj:
            raise ParseError("empty subject id", n)
        if base_dir is not None:
            img = str(Path(base_dir) / img)
            pts = str(Path(base_dir) / pts)
        if (img, pts) in seen:
            raise ParseError(f"duplicate entry {img}", n)
        seen.add((img, pts))
        entries.append(ManifestEntry(img, pts, subj, split))
    return entries


def read_manifest(path, subject_pattern: str = DEFAULT_SUBJECT_PATTERN) -> list:
    path = Path(path)
    return parse_manifest(path.read_text(), path.parent, subject_pattern)


def write_manifest(entries, base_dir=None) -> str:
    out = []
    for e in entries:
        img, pts = e.image, e.landmarks
        if base_dir is not None:
            img = str(Path(img).relative_to(base_dir))
            pts = str(Path(pts).relative_to(base_dir))
        out.append(f"{img}\t{pts}\t{e.subject}\t{e.split}\n")
    return "".join(out)


def subject_disjoint_split(entries, train_ids) -> tuple:
    """Entries of ``train_ids`` subjects vs. everything else."""
    train_ids = set(train_ids)
    present = {e.subject for e in entries}
    unknown = train_ids - present
    if unknown:
        raise KeyError(f"unknown subject ids: {sorted(unknown)}")
    train = [e for e in entries if e.subject in train_ids]
    test = [e for e in entries if e.subject not in train_ids]
    return train, test


def load_entries(entries, trim: bool = True, drop=INNER_MOUTH_CORNERS):
    """Images and shapes for manifest entries; 68-point shapes are trimmed to 66."""
    images, shapes = [], []
    for e in entries:
        images.append(load_image(e.image))
        s = read_pts(e.landmarks)
        if trim and s.size == 136:
            s = trim_68_to_66(s, drop)
        shapes.append(s)
    return images, shapes


# model container -------------------------------------------------------------------

MAGIC = b"AAMTLMDL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _rle_encode(mask: np.ndarray) -> np.ndarray:
    flat = mask.reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    # first run counts False pixels; a leading True gives a zero-length False run
    if flat.size and flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.int64)


def _rle_decode(runs, shape) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(vals, runs)
    if flat.size != int(np.prod(shape)):
        raise ModelFormatError("mask run lengths do not match the raster size")
    return flat.reshape(shape)


def _model_arrays(model: AamModel) -> dict:
    fr = model.appearance.frame
    return {
        "shape_mean": model.shape.mean,
        "shape_basis": model.shape.basis,
        "shape_eigenvalues": model.shape.eigenvalues,
        "appearance_mean": model.appearance.mean,
        "appearance_basis": model.appearance.basis,
        "appearance_eigenvalues": model.appearance.eigenvalues,
        "frame_vertices": fr.mesh.vertices,
        "frame_triangles": fr.mesh.triangles.astype(np.int64),
        "frame_mask_rle": _rle_encode(fr.mask),
    }


def model_to_bytes(model: AamModel) -> bytes:
    arrays = _model_arrays(model)
    specs, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = "<f8" if arr.dtype.kind == "f" else "<i8"
        data = arr.astype(dt).tobytes(order="C")
        specs.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "format": "aamtl-model", "layout": "row-major", "label": model.label.value,
        "n_global": model.shape.n_global, "normalize": bool(model.appearance.normalize),
        "raster_shape": list(model.appearance.frame.raster_shape),
        "dims": {"n_vertices": model.n_vertices, "n_shape_params": model.shape.n_params,
                 "L": model.appearance.frame.n_pixels,
                 "M": model.appearance.n_components},
        "arrays": specs, "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes))
    digest = hashlib.sha256(prefix + hbytes + payload).digest()
    return prefix + hbytes + payload + digest


def model_from_bytes(blob: bytes) -> AamModel:
    if len(blob) < _PREFIX.size:
        raise TruncatedFileError("file shorter than the container prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFormatError("not an aamtl model file")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"container version {version}, this build reads {FORMAT_VERSION}")
    hstart = _PREFIX.size
    if len(blob) < hstart + hlen:
        raise TruncatedFileError("file ends inside the header")
    try:
        header = json.loads(blob[hstart:hstart + hlen])
    except ValueError:
        raise ChecksumError("header is not valid JSON") from None
    pstart = hstart + hlen
    need = pstart + int(header.get("payload_bytes", 0)) + 32
    if len(blob) < need:
        raise TruncatedFileError(f"expected {need} bytes, file has {len(blob)}")
    if len(blob) > need:
        raise ModelFormatError("trailing bytes after the checksum")
    body, digest = blob[:need - 32], blob[need - 32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: the model file is corrupted")
    arrays = {}
    for spec in header["arrays"]:
        a = pstart + spec["offset"]
        arrays[spec["name"]] = np.frombuffer(
            blob[a:a + spec["nbytes"]], dtype=spec["dtype"]).reshape(spec["shape"]).astype(
            np.float64 if spec["dtype"] == "<f8" else np.int64)
    raster_shape = tuple(header["raster_shape"])
    mesh = TriMesh(arrays["frame_vertices"], arrays["frame_triangles"])
    frame = make_frame(mesh, raster_shape)
    if not np.array_equal(frame.mask, _rle_decode(arrays["frame_mask_rle"], raster_shape)):
        raise ModelFormatError("stored mask disagrees with the rasterized mesh")
    shape = ShapeModel(mean=arrays["shape_mean"], basis=arrays["shape_basis"],
                       eigenvalues=arrays["shape_eigenvalues"], n_global=header["n_global"])
    app = AppearanceModel(frame=frame, mean=arrays["appearance_mean"],
                          basis=arrays["appearance_basis"],
                          eigenvalues=arrays["appearance_eigenvalues"],
                          normalize=header["normalize"])
    return AamModel(shape=shape, appearance=app, label=Label(header["label"]))


def save_model(model: AamModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> AamModel:
    return model_from_bytes(Path(path).read_bytes())
