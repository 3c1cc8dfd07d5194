"""The combined shape + appearance model and its training pipeline."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .appearance_model import (DEFAULT_FACE_SIZE, AppearanceModel, build_reference_frame,
                               train_appearance_model)
from .exceptions import DimensionError
from .shape_model import DEFAULT_VARIANCE_FRACTION, ShapeModel, train_shape_model


class Label(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    SUT = "sut"
    ST = "st"
    SELECTED = "selected"


@dataclass(frozen=True, eq=False)
class AamModel:
    shape: ShapeModel
    appearance: AppearanceModel
    label: Label = Label.TARGET

    def __post_init__(self):
        if self.shape.n_vertices != self.appearance.frame.n_vertices:
            raise DimensionError("shape model and reference frame disagree on vertex count")

    @property
    def n_vertices(self) -> int:
        return self.shape.n_vertices

    def relabel(self, label) -> "AamModel":
        return replace(self, label=Label(label))


def train_aam(images, shapes, shape_fraction: float = DEFAULT_VARIANCE_FRACTION,
              appearance_fraction: float = DEFAULT_VARIANCE_FRACTION,
              face_size: float = DEFAULT_FACE_SIZE, label=Label.TARGET,
              normalize: bool = False) -> AamModel:
    """Train shape and appearance models from matched images and landmark shapes."""
    images = list(images)
    shapes = [np.asarray(s, dtype=float).reshape(-1) for s in shapes]
    shape = train_shape_model(shapes, shape_fraction)
    frame = build_reference_frame(shape.mean, face_size)
    appearance = train_appearance_model(images, shapes, frame, appearance_fraction, normalize)
    return AamModel(shape=shape, appearance=appearance, label=Label(label))
