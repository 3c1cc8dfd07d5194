"""Active appearance models with subspace-selection transfer from a source domain."""
from .aam import AamModel, Label, train_aam
from .appearance_model import AppearanceModel, ReferenceFrame, build_reference_frame
from .dataset_io import load_model, parse_pts, read_manifest, save_model, trim_68_to_66, write_pts
from .estimators import ActiveAppearanceModel, PointDistributionModel, SubspaceSelectionAAM
from .evaluation import (CONVERGENCE_THRESHOLD, DEFAULT_D_APPEARANCE, DEFAULT_D_SHAPE, TestSet,
                         convergence_curve, cross_validate_d, evaluate_model, normalized_rms,
                         ordering_sweep, run_comparison)
from .fitting import FitConfig, FitResult, fit_single, fit_with_restarts
from .shape_model import ShapeModel, train_shape_model
from .transfer import (Ordering, TransferConfig, baseline_source, baseline_st, baseline_sut,
                       baseline_target, projected_variance, select_subspace, transfer)

__version__ = "0.1.0"

__all__ = [
    "AamModel", "Label", "train_aam", "AppearanceModel", "ReferenceFrame", "build_reference_frame",
    "load_model", "parse_pts", "read_manifest", "save_model", "trim_68_to_66", "write_pts",
    "ActiveAppearanceModel", "PointDistributionModel", "SubspaceSelectionAAM",
    "CONVERGENCE_THRESHOLD", "DEFAULT_D_APPEARANCE", "DEFAULT_D_SHAPE", "TestSet",
    "convergence_curve", "cross_validate_d", "evaluate_model", "normalized_rms", "ordering_sweep",
    "run_comparison", "FitConfig", "FitResult", "fit_single", "fit_with_restarts", "ShapeModel",
    "train_shape_model", "Ordering", "TransferConfig", "baseline_source", "baseline_st",
    "baseline_sut", "baseline_target", "projected_variance", "select_subspace", "transfer",
]
