"""Fitting-accuracy metrics, model comparisons and cross-validation of ``d``."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aam import AamModel, train_aam
from .exceptions import DegenerateInputError, DimensionError
from .fitting import FitConfig, fit_with_restarts, get_fitter
from .geometry import as_points, bounding_box, face_size
from .transfer import Ordering, TransferConfig, transfer

CONVERGENCE_THRESHOLD = 0.05
DEFAULT_D_SHAPE = 3
DEFAULT_D_APPEARANCE = 30
CV_TIE_TOLERANCE = 1e-3


def default_tolerances(n: int = 64, lo: float = 0.005, hi: float = 0.2) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


def normalized_rms(fitted, truth) -> float:
    """Root-mean-square point distance divided by the face size of ``truth``."""
    a = as_points(fitted)
    b = as_points(truth)
    if a.shape != b.shape:
        raise DimensionError(f"{len(a)} fitted points vs {len(b)} ground-truth points")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))) / face_size(b))


def convergence_curve(errors, tolerances=None) -> list:
    """``[(t, fraction of errors <= t)]`` for each tolerance ``t``."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise DegenerateInputError("no errors to summarise")
    tolerances = default_tolerances() if tolerances is None else np.asarray(tolerances, dtype=float)
    if np.any(np.diff(tolerances) < 0):
        raise ValueError("tolerances must be sorted ascending")
    s = np.sort(errors)
    counts = np.searchsorted(s, tolerances, side="right")
    return [(float(t), float(c) / errors.size) for t, c in zip(tolerances, counts)]


@dataclass
class TestSet:
    """Images with ground-truth shapes and the boxes used to initialize fits."""
    __test__ = False  # not a pytest class despite the name
    images: list
    shapes: list
    ids: list = None
    bboxes: list = None

    def __post_init__(self):
        self.shapes = [np.asarray(s, dtype=float).reshape(-1) for s in self.shapes]
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.images))]
        if self.bboxes is None:
            self.bboxes = [bounding_box(s) for s in self.shapes]

    def __len__(self):
        return len(self.images)


@dataclass
class EvalReport:
    label: str
    per_example: list                 # (id, normalized_rms, iterations)
    convergence_curve: list           # (tolerance, fraction)
    mean_rms_over_converged: float
    fraction_at_threshold: float
    mean_cost_trace: list = field(default_factory=list)
    fitter_converged: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def rms(self) -> np.ndarray:
        return np.array([r for _, r, _ in self.per_example])

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_examples": len(self.per_example),
            "fraction_at_0.05": self.fraction_at_threshold,
            "mean_rms_over_converged": self.mean_rms_over_converged,
            "mean_cost_trace": [float(c) for c in self.mean_cost_trace],
            "errors": list(self.errors),
        }

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tolerance", "fraction"])
        for t, f in self.convergence_curve:
            w.writerow([repr(float(t)), repr(float(f))])
        return buf.getvalue()

    def examples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "rms", "cost_iters"])
        for i, r, n in self.per_example:
            w.writerow([i, repr(float(r)), n])
        return buf.getvalue()


def _mean_trace(traces) -> list:
    if not traces:
        return []
    n = max(len(t) for t in traces)
    padded = np.array([list(t) + [t[-1]] * (n - len(t)) for t in traces])
    return list(padded.mean(axis=0))


def _fit_one(model, img, gt, box, fit_config):
    try:
        res = fit_with_restarts(model, img, box, fit_config)
    except Exception as exc:  # recorded per example, not fatal
        return None, str(exc)
    return res, normalized_rms(res.shape, gt)


def evaluate_model(model: AamModel, test_set: TestSet, fit_config: FitConfig | None = None,
                   tolerances=None, threshold: float = CONVERGENCE_THRESHOLD,
                   label: str | None = None, workers: int = 1) -> EvalReport:
    """Fit ``model`` to every test image from its box and summarise the errors.

    With ``workers > 1`` examples are fitted on a thread pool; results are
    collected in test-set order so the report does not depend on scheduling.
    """
    fit_config = fit_config or FitConfig()
    get_fitter(model)
    jobs = list(zip(test_set.images, test_set.shapes, test_set.bboxes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda j: _fit_one(model, *j, fit_config), jobs))
    else:
        outcomes = [_fit_one(model, *j, fit_config) for j in jobs]
    per, traces, flags, errors = [], [], [], []
    for ident, (res, e) in zip(test_set.ids, outcomes):
        if res is None:
            errors.append(f"{ident}: {e}")
            per.append((ident, float("inf"), 0))
            flags.append(False)
            continue
        per.append((ident, e, res.n_iterations))
        flags.append(bool(res.converged))
        if e < threshold:
            traces.append(res.cost_trace)
    errs = np.array([r for _, r, _ in per])
    curve = convergence_curve(errs, tolerances)
    ok = errs[errs <= threshold]
    return EvalReport(
        label=label or model.label.value, per_example=per, convergence_curve=curve,
        mean_rms_over_converged=float(ok.mean()) if ok.size else float("nan"),
        fraction_at_threshold=float(np.mean(errs <= threshold)),
        mean_cost_trace=_mean_trace(traces), fitter_converged=flags, errors=errors)


def run_comparison(models, test_set: TestSet, fit_config: FitConfig | None = None,
                   tolerances=None, labels=None, workers: int = 1) -> list:
    """Fit every model to every test image; one report per model."""
    models = list(models)
    if len({m.n_vertices for m in models}) > 1:
        raise DimensionError("models use different landmark schemes")
    labels = labels or [None] * len(models)
    return [evaluate_model(m, test_set, fit_config, tolerances, label=lab, workers=workers)
            for m, lab in zip(models, labels)]


@dataclass
class TrainingData:
    images: list
    shapes: list

    def __len__(self):
        return len(self.images)

    def without(self, i: int) -> "TrainingData":
        keep = [k for k in range(len(self)) if k != i]
        return TrainingData([self.images[k] for k in keep], [self.shapes[k] for k in keep])


@dataclass
class CrossValidationResult:
    d_shape: int
    d_appearance: int
    shape_scores: dict
    appearance_scores: dict


def _pick(scores: dict, tie_tolerance: float) -> int:
    best = min(scores.values())
    return min(d for d, s in scores.items() if s <= best + tie_tolerance)


def _loo_score(target: TrainingData, source: AamModel, d_shape, d_app, ordering, fit_config,
               shape_fraction, appearance_fraction, face_size_px) -> float:
    errs = []
    for i in range(len(target)):
        train = target.without(i)
        tm = train_aam(train.images, train.shapes, shape_fraction, appearance_fraction,
                       face_size_px)
        k_s = source.shape.n_local
        k_a = source.appearance.n_components
        cfg = TransferConfig(min(d_shape, k_s), min(d_app, k_a), ordering)
        model = transfer(tm, source, train.images, train.shapes, cfg)
        gt = np.asarray(target.shapes[i], dtype=float).reshape(-1)
        res = fit_with_restarts(model, target.images[i], bounding_box(gt), fit_config)
        errs.append(normalized_rms(res.shape, gt))
    return float(np.mean(errs))


def cross_validate_d(target_train: TrainingData, source_model: AamModel, d_grid,
                     fit_config: FitConfig | None = None, appearance_grid=None,
                     ordering=Ordering.TARGET_VARIANCE, shape_fraction: float = 0.98,
                     appearance_fraction: float = 0.98, face_size_px: float = 150.0,
                     tie_tolerance: float = CV_TIE_TOLERANCE) -> CrossValidationResult:
    """Leave-one-out choice of ``d`` for shape, then appearance.

    Each held-out target image is fitted with a model transferred from the
    remaining target examples; the score is the mean normalized RMS. Scores
    within ``tie_tolerance`` of the best count as ties and the smallest ``d``
    wins. The shape search holds the appearance ``d`` at the grid median.
    """
    fit_config = fit_config or FitConfig()
    d_grid = sorted(int(d) for d in d_grid)
    appearance_grid = d_grid if appearance_grid is None else sorted(int(d) for d in appearance_grid)
    if not d_grid or not appearance_grid:
        raise ValueError("empty d grid")
    if len(target_train) < 2:
        raise DegenerateInputError("cross-validation needs at least 2 target examples")
    if d_grid[-1] > source_model.shape.n_local:
        raise ValueError(f"d={d_grid[-1]} exceeds the {source_model.shape.n_local} "
                         "source shape components")
    if appearance_grid[-1] > source_model.appearance.n_components:
        raise ValueError(f"d={appearance_grid[-1]} exceeds the "
                         f"{source_model.appearance.n_components} source appearance components")
    args = (ordering, fit_config, shape_fraction, appearance_fraction, face_size_px)
    d_app_fixed = appearance_grid[(len(appearance_grid) - 1) // 2]
    shape_scores = {d: _loo_score(target_train, source_model, d, d_app_fixed, *args)
                    for d in d_grid}
    d_shape = _pick(shape_scores, tie_tolerance)
    app_scores = {d: _loo_score(target_train, source_model, d_shape, d, *args)
                  for d in appearance_grid}
    d_app = _pick(app_scores, tie_tolerance)
    return CrossValidationResult(d_shape, d_app, shape_scores, app_scores)


def ordering_sweep(target_model: AamModel, source_model: AamModel, target_train: TrainingData,
                   test_set: TestSet, d_values, fit_config: FitConfig | None = None,
                   d_appearance: int = 0, threshold: float = CONVERGENCE_THRESHOLD,
                   workers: int = 1) -> list:
    """Rows ``(d, ordering, fraction converged at threshold)`` for both orderings.

    ``d`` varies the shape selection; the appearance selection is held at
    ``d_appearance``.
    """
    rows = []
    for d in d_values:
        for ordering in (Ordering.TARGET_VARIANCE, Ordering.SOURCE_EIGENVALUE):
            cfg = TransferConfig(int(d), d_appearance, ordering)
            model = transfer(target_model, source_model, target_train.images,
                             target_train.shapes, cfg)
            rep = evaluate_model(model, test_set, fit_config, threshold=threshold, workers=workers)
            rows.append((int(d), ordering.value, rep.fraction_at_threshold))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["d", "ordering", "fraction_at_0.05"])
    for d, o, f in rows:
        w.writerow([d, o, repr(float(f))])
    return buf.getvalue()
