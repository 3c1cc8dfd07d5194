"""``aamtl`` command line: train, transfer, fit, eval, sweep-d, synth.

Each subcommand reads an optional YAML/JSON config file; flags override it
and ``AAMTL_SEED`` / ``AAMTL_WORKERS`` override the seed and worker count
from the file. The effective config is written to ``config.json`` in the
output directory and can be fed back with ``--config``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .aam import Label, train_aam
from .appearance_model import appearance_matrix
from .dataset_io import (DEFAULT_SUBJECT_PATTERN, INNER_MOUTH_CORNERS, load_entries, load_image,
                         load_model, read_manifest, read_pts, save_model, save_pts, trim_68_to_66,
                         write_manifest)
from .evaluation import (CONVERGENCE_THRESHOLD, TestSet, ordering_sweep, run_comparison,
                         sweep_csv, TrainingData)
from .exceptions import (AAMError, ConfigError, DegenerateGeometryError, DegenerateInputError,
                         DimensionError, ModelFormatError, ParseError)
from .fitting import FitConfig, fit_with_restarts
from .geometry import bounding_box, procrustes_align
from .transfer import Ordering, TransferConfig, transfer

log = logging.getLogger("aamtl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FIT_KEYS = ("max_iterations", "rel_cost_tolerance", "n_restarts", "noise_scale",
            "noise_translation", "noise_rotation", "step_halving", "max_halvings")

COMMON = {"out": None, "seed": 0, "workers": 1, "fit": {}}
TRAINING = {"face_size": 150.0, "shape_fraction": 0.98, "appearance_fraction": 0.98,
            "normalize": False, "trim_68": True, "mouth_corners": list(INNER_MOUTH_CORNERS),
            "subject_pattern": DEFAULT_SUBJECT_PATTERN}

DEFAULTS = {
    "train": {**COMMON, **TRAINING, "manifest": None, "label": "target"},
    "transfer": {**COMMON, **TRAINING, "source_model": None, "target_manifest": None,
                 "d_shape": 3, "d_appearance": 30, "ordering": "target_variance",
                 "renormalize_warped": True},
    "fit": {**COMMON, "model": None, "image": None, "bbox": None, "init_landmarks": None,
            "trim_68": True, "mouth_corners": list(INNER_MOUTH_CORNERS)},
    "eval": {**COMMON, "models": [], "test_manifest": None, "trim_68": True,
             "mouth_corners": list(INNER_MOUTH_CORNERS), "subject_pattern": DEFAULT_SUBJECT_PATTERN,
             "threshold": CONVERGENCE_THRESHOLD},
    "sweep-d": {**COMMON, **TRAINING, "source_model": None, "target_manifest": None,
                "d_values": [0, 1, 2, 3, 4], "d_appearance": 0},
    "synth": {**COMMON, "scenario": "planted", "n_source": 100, "n_target": 5, "n_test": 40,
              "n_samples": 20, "motions": ["smile", "mouth_open"], "stddevs": [10.0, 10.0],
              "face_px": 80.0, "image_size": [128, 128], "noise_stddev": 0.01},
}

PATH_KEYS = {"manifest", "source_model", "target_manifest", "model", "image", "init_landmarks",
             "test_manifest"}


# configuration ---------------------------------------------------------------------

def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(command: str, file_cfg: dict, flags: dict, env=os.environ) -> dict:
    """Defaults < config file < environment < flags; unknown keys are rejected."""
    defaults = DEFAULTS[command]
    file_cfg = dict(file_cfg)
    declared = file_cfg.pop("command", command)
    if declared != command:
        raise ConfigError(f"config is for '{declared}', not '{command}'")
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = json.loads(json.dumps(defaults))
    cfg.update(file_cfg)
    if "AAMTL_SEED" in env:
        cfg["seed"] = _env_int(env, "AAMTL_SEED")
    if "AAMTL_WORKERS" in env:
        cfg["workers"] = _env_int(env, "AAMTL_WORKERS")
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    bad_fit = sorted(set(cfg["fit"]) - set(FIT_KEYS))
    if bad_fit:
        raise ConfigError(f"unknown fit keys: {', '.join(bad_fit)}")
    if cfg["out"] is None:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    if int(cfg["workers"]) < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _env_int(env, name) -> int:
    try:
        return int(env[name])
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {env[name]!r}") from None


def validate_paths(cfg: dict) -> None:
    for k in sorted(PATH_KEYS & set(cfg)):
        if cfg[k] is not None and not Path(cfg[k]).is_file():
            raise ConfigError(f"{k}: file not found: {cfg[k]}")
    for p in cfg.get("models", []):
        if not Path(p).is_file():
            raise ConfigError(f"models: file not found: {p}")


def fit_config(cfg: dict) -> FitConfig:
    try:
        return FitConfig(rng_seed=int(cfg["seed"]), **cfg["fit"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fit: {exc}") from None


# outputs ----------------------------------------------------------------------------

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n")


def write_outputs(out: Path, command: str, cfg: dict, summary: dict) -> None:
    """Echo the effective config and write the summary; the timestamp is the only varying field."""
    write_json(out / "config.json", {"command": command, **cfg})
    summary = {**summary, "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    write_json(out / "summary.json", summary)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_split(manifest, split, cfg):
    entries = [e for e in read_manifest(manifest, cfg.get("subject_pattern", DEFAULT_SUBJECT_PATTERN))
               if e.split == split]
    images, shapes = load_entries(entries, trim=cfg["trim_68"], drop=tuple(cfg["mouth_corners"]))
    return entries, images, shapes


def _retained(eigenvalues, residual) -> float:
    total = float(np.sum(residual**2) / max(residual.shape[1] - 1, 1))
    return float(np.sum(eigenvalues) / total) if total > 0 else 1.0


def _train_model(images, shapes, cfg, label):
    return train_aam(images, shapes, float(cfg["shape_fraction"]),
                     float(cfg["appearance_fraction"]), float(cfg["face_size"]),
                     label=label, normalize=bool(cfg["normalize"]))


# commands -------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> dict:
    entries, images, shapes = _load_split(cfg["manifest"], "train", cfg)
    if len(entries) < 2:
        raise DegenerateInputError(
            f"{cfg['manifest']}: training needs at least 2 train entries, found {len(entries)}")
    model = _train_model(images, shapes, cfg, cfg["label"])
    save_model(model, out / "model.aam")
    aligned = procrustes_align(shapes)
    G = model.shape.global_basis
    X = aligned.shapes - model.shape.mean[:, None]
    X = X - G @ (G.T @ X)
    A = appearance_matrix(model.appearance.frame, images, shapes, model.appearance.normalize)
    A = A - model.appearance.mean[:, None]
    return {
        "n_train": len(entries), "K": model.shape.n_local, "M": model.appearance.n_components,
        "L": model.appearance.frame.n_pixels, "V": model.n_vertices,
        "retained_shape_variance": _retained(model.shape.eigenvalues, X),
        "retained_appearance_variance": _retained(model.appearance.eigenvalues, A),
        "model_sha256": _sha256(out / "model.aam"),
    }


def _transfer_inputs(cfg):
    source = load_model(cfg["source_model"])
    entries, images, shapes = _load_split(cfg["target_manifest"], "train", cfg)
    if len(entries) < 2:
        raise DegenerateInputError(f"{cfg['target_manifest']}: need at least 2 target train entries")
    if source.n_vertices != shapes[0].size // 2:
        raise DimensionError(f"source model has {source.n_vertices} landmarks, "
                             f"target data has {shapes[0].size // 2}")
    target = _train_model(images, shapes, cfg, Label.TARGET)
    return source, target, images, shapes


def cmd_transfer(cfg: dict, out: Path) -> dict:
    source, target, images, shapes = _transfer_inputs(cfg)
    d_s, d_a = int(cfg["d_shape"]), int(cfg["d_appearance"])
    if d_s > source.shape.n_local:
        raise ConfigError(f"d_shape={d_s} exceeds the {source.shape.n_local} source shape components")
    if d_a > source.appearance.n_components:
        raise ConfigError(f"d_appearance={d_a} exceeds the {source.appearance.n_components} "
                          "source appearance components")
    tcfg = TransferConfig(d_s, d_a, Ordering(cfg["ordering"]), bool(cfg["renormalize_warped"]))
    model, report = transfer(target, source, images, shapes, tcfg, return_report=True)
    save_model(model, out / "model.aam")
    save_model(target, out / "target_model.aam")
    write_json(out / "report.json", report.to_dict())
    return {"K": model.shape.n_local, "M": model.appearance.n_components,
            "selected_shape": [int(i) for i in report.shape_selected],
            "selected_appearance": [int(i) for i in report.appearance_selected],
            "model_sha256": _sha256(out / "model.aam")}


def cmd_fit(cfg: dict, out: Path) -> dict:
    model = load_model(cfg["model"])
    image = load_image(cfg["image"])
    if cfg["bbox"] is not None:
        bbox = [float(v) for v in cfg["bbox"]]
        if len(bbox) != 4:
            raise ConfigError("bbox needs 4 numbers: x_min y_min x_max y_max")
    elif cfg["init_landmarks"] is not None:
        s = read_pts(cfg["init_landmarks"])
        if cfg["trim_68"] and s.size == 136:
            s = trim_68_to_66(s, tuple(cfg["mouth_corners"]))
        bbox = [float(v) for v in bounding_box(s)]
    else:
        raise ConfigError("fit needs either bbox or init_landmarks")
    res = fit_with_restarts(model, image, bbox, fit_config(cfg))
    if not np.isfinite(res.final_cost):
        raise FloatingPointError("every restart diverged")
    save_pts(out / "fit.pts", res.shape)
    fit = {"shape": [float(v) for v in res.shape], "cost_trace": [float(c) for c in res.cost_trace],
           "converged": bool(res.converged), "status": res.status,
           "restart_index": int(res.restart_index), "n_iterations": res.n_iterations,
           "appearance_params": [float(v) for v in res.appearance_params]}
    write_json(out / "fit.json", fit)
    return {"status": res.status, "n_iterations": res.n_iterations,
            "final_cost": float(res.final_cost)}


def _test_set(cfg):
    entries, images, shapes = _load_split(cfg["test_manifest"], "test", cfg)
    if not entries:
        raise DegenerateInputError(f"{cfg['test_manifest']}: no test entries")
    ids = [Path(e.image).stem for e in entries]
    return TestSet(images, shapes, ids)


def _labels(models) -> list:
    """Model labels, suffixed with their position when two models share one."""
    raw = [m.label.value for m in models]
    return [f"{lab}_{i}" if raw.count(lab) > 1 else lab for i, lab in enumerate(raw)]


def cmd_eval(cfg: dict, out: Path) -> dict:
    if not cfg["models"]:
        raise ConfigError("eval needs at least one model")
    models = [load_model(p) for p in cfg["models"]]
    test = _test_set(cfg)
    if len({m.n_vertices for m in models} | {test.shapes[0].size // 2}) > 1:
        raise DimensionError("models and test landmarks use different landmark counts")
    labels = _labels(models)
    reports = run_comparison(models, test, fit_config(cfg), labels=labels,
                             workers=int(cfg["workers"]))
    completed = False
    for rep in reports:
        (out / f"curve_{rep.label}.csv").write_text(rep.curve_csv())
        (out / f"examples_{rep.label}.csv").write_text(rep.examples_csv())
        completed |= len(rep.errors) < len(rep.per_example)
    if not completed:
        raise FloatingPointError("no test example could be fitted")
    return {"n_test": len(test), "models": {r.label: r.to_dict() for r in reports}}


def cmd_sweep_d(cfg: dict, out: Path) -> dict:
    source, target, images, shapes = _transfer_inputs(cfg)
    cfg2 = dict(cfg, test_manifest=cfg["target_manifest"])
    test = _test_set(cfg2)
    d_values = [int(d) for d in cfg["d_values"]]
    if max(d_values) > source.shape.n_local:
        raise ConfigError(f"d={max(d_values)} exceeds the {source.shape.n_local} source shape components")
    rows = ordering_sweep(target, source, TrainingData(images, shapes), test, d_values,
                          fit_config(cfg), int(cfg["d_appearance"]), workers=int(cfg["workers"]))
    (out / "sweep.csv").write_text(sweep_csv(rows))
    return {"rows": [{"d": d, "ordering": o, "fraction_at_0.05": f} for d, o, f in rows]}


def cmd_synth(cfg: dict, out: Path) -> dict:
    seed = int(cfg["seed"])
    if cfg["scenario"] == "planted":
        sc = synth.planted_transfer_scenario(
            seed, n_source=int(cfg["n_source"]), n_target=int(cfg["n_target"]),
            n_test=int(cfg["n_test"]), face_px=float(cfg["face_px"]),
            image_size=tuple(cfg["image_size"]), noise_stddev=float(cfg["noise_stddev"]))
        manifests = synth.write_scenario(sc, out)
        return {"scenario": "planted", "manifests": {k: str(Path(v).relative_to(out))
                                                     for k, v in manifests.items()},
                "n_source": len(sc.source), "n_target": len(sc.target), "n_test": len(sc.target_test)}
    if cfg["scenario"] != "generic":
        raise ConfigError(f"scenario must be 'planted' or 'generic', got {cfg['scenario']!r}")
    if len(cfg["motions"]) != len(cfg["stddevs"]):
        raise ConfigError("motions and stddevs must have the same length")
    base = synth.base_face(float(cfg["face_px"]))
    D = synth.deformation_directions(base, list(cfg["motions"]))
    spec = synth.SynthSpec(base_shape=base,
                           shape_factors=tuple((D[:, i], float(sd)) for i, sd in enumerate(cfg["stddevs"])),
                           base_texture=synth.FACE_FEATURES, pose_jitter=(0.05, 0.05, 4.0),
                           noise_stddev=float(cfg["noise_stddev"]), n_samples=int(cfg["n_samples"]),
                           rng_seed=seed, image_size=tuple(cfg["image_size"]))
    ds = synth.generate(spec)
    n_train = max(len(ds) - max(len(ds) // 4, 1), 2) if len(ds) > 2 else len(ds)
    entries = (synth.write_dataset(ds.subset(range(n_train)), out, "train")
               + synth.write_dataset(ds.subset(range(n_train, len(ds))), out, "test"))
    (out / "manifest.tsv").write_text(write_manifest(entries, out))
    return {"scenario": "generic", "manifests": {"dataset": "manifest.tsv"}, "n_samples": len(ds),
            "n_train": n_train}


COMMANDS = {"train": cmd_train, "transfer": cmd_transfer, "fit": cmd_fit, "eval": cmd_eval,
            "sweep-d": cmd_sweep_d, "synth": cmd_synth}


# argument parsing -----------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--max-iterations", type=int, dest="fit_max_iterations")
    p.add_argument("--n-restarts", type=int, dest="fit_n_restarts")


def _add_training(p):
    p.add_argument("--face-size", type=float)
    p.add_argument("--shape-fraction", type=float)
    p.add_argument("--appearance-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aamtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an AAM from a manifest's train split")
    _add_common(p)
    _add_training(p)
    p.add_argument("--manifest")
    p.add_argument("--label", choices=[l.value for l in Label])

    p = sub.add_parser("transfer", help="select source subspaces for a target domain")
    _add_common(p)
    _add_training(p)
    p.add_argument("--source-model")
    p.add_argument("--target-manifest")
    p.add_argument("--d-shape", type=int)
    p.add_argument("--d-appearance", type=int)
    p.add_argument("--ordering", choices=[o.value for o in Ordering])

    p = sub.add_parser("fit", help="fit a model to one image")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--image")
    p.add_argument("--bbox", type=float, nargs=4, metavar=("XMIN", "YMIN", "XMAX", "YMAX"))
    p.add_argument("--init-landmarks")

    p = sub.add_parser("eval", help="compare models on a test split")
    _add_common(p)
    p.add_argument("--models", nargs="+")
    p.add_argument("--test-manifest")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("sweep-d", help="fraction converged against d for both orderings")
    _add_common(p)
    _add_training(p)
    p.add_argument("--source-model")
    p.add_argument("--target-manifest")
    p.add_argument("--d-values", type=int, nargs="+")
    p.add_argument("--d-appearance", type=int)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("--scenario", choices=["planted", "generic"])
    p.add_argument("--n-source", type=int)
    p.add_argument("--n-target", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-samples", type=int)
    return parser


def _flags(ns) -> tuple:
    skip = {"command", "config", "verbose"}
    flags = {k: v for k, v in vars(ns).items() if k not in skip and not k.startswith("fit_")}
    fit = {k[4:]: v for k, v in vars(ns).items() if k.startswith("fit_") and v is not None}
    return flags, fit


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    command = ns.command
    try:
        file_cfg = load_config_file(ns.config) if ns.config else {}
        flags, fit_flags = _flags(ns)
        cfg = resolve_config(command, file_cfg, flags)
        cfg["fit"] = {**cfg["fit"], **fit_flags}
        validate_paths(cfg)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        log.info("%s: writing to %s", command, out)
        summary = COMMANDS[command](cfg, out)
        write_outputs(out, command, cfg, {"command": command, **summary})
    except ConfigError as exc:
        print(f"aamtl {command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ModelFormatError, DegenerateInputError, DimensionError,
            FileNotFoundError, OSError) as exc:
        print(f"aamtl {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateGeometryError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"aamtl {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AAMError as exc:
        print(f"aamtl {command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
