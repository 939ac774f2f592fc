# main.py
"""
SFFormer command-line entry point.

Usage:
    python main.py synth --output data/synth --subjects 200 --clusters 64 --target volume=1 --noise 0.3
    python main.py features --input data/synth --clusters 64 --output data/features
    python main.py cv --features data/features --feature volume
    python main.py cv --features data/features --feature volume --fusion cross --helper diameter
    python main.py search --features data/features --feature branch_volume --trials 20
    python main.py select-helper --features data/features
    python main.py table --features data/features --helper volume
    python main.py train --features data/features --feature volume --output runs/volume
    python main.py predict --model runs/volume --features data/features --output predictions.csv
    python main.py gradcheck

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

import config
import sfformer_model
import tensor_core
from bundle_io import load_subject, subject_dirs
from errors import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, DataError, PipelineError, UsageError
from feature_matrix import SHAPE_FEATURES, FeatureKind, extract_features, load_dataset, matrix_filename, write_features_dir
from sfformer_model import FusionMode, Readout
from shape_features import ShapeOptions
from synthetic_data import GeometryFamily, SynthSpec, cmd_synth, parse_weights
from training_eval import (
    REPORT_FILE,
    EarlyStopSplit,
    Experiment,
    HyperParams,
    HyperRanges,
    TrainSettings,
    cross_validate,
    fit_final,
    format_fusion_table,
    fusion_table,
    hyperparam_search,
    load_trained,
    save_trained,
    select_helper_feature,
)

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
FEATURE_NAMES = [k.value for k in FeatureKind]
FUSION_FLAGS = {"self": FusionMode.SELF_BASELINE, "cross": FusionMode.CROSS_FUSION}


def banner(title: str) -> None:
    print("=" * 70)
    print(title)
    print("=" * 70)


def write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_command(args) -> int:
    spec = SynthSpec(
        subjects=args.subjects,
        clusters=args.clusters,
        streamlines=args.streamlines,
        points=args.points,
        family=args.family,
        jitter=args.jitter,
        missing_rate=args.missing_rate,
        weights=parse_weights(args.target),
        noise=args.noise,
        with_maps=args.with_maps,
        spacing=args.spacing,
        assessment=args.assessment,
        seed=args.seed,
    )
    cmd_synth(spec, args.output)
    print(f"subjects={spec.subjects} clusters={spec.clusters} family={spec.family.value} output={args.output}")
    return EXIT_OK


def cmd_features(args) -> int:
    """Per-subject failures are reported and skipped; the exit code is nonzero if any occurred."""
    options = ShapeOptions(
        spacing=args.spacing,
        raster_mode=args.raster_mode,
        cylinder_diameter=args.cylinder_diameter,
        surface_faces=args.surface_faces,
    )
    directories = subject_dirs(args.input)
    if not directories:
        raise DataError(f"No subject directories under {args.input}")

    features, failed = [], []
    for directory in directories:
        try:
            subject = load_subject(directory, args.clusters)
            features.append(extract_features(subject, options, threads=args.threads))
            logger.info(f"Extracted features for {subject.subject_id}")
        except PipelineError as e:
            logger.warning(f"Subject {directory.name} failed: {e.detail}")
            failed.append(directory.name)

    if not features:
        raise DataError(f"All {len(directories)} subjects failed")
    kinds = write_features_dir(features, Path(args.output))
    print(f"subjects={len(features)} failed={len(failed)} matrices={len(kinds)} output={args.output}")
    for name in failed:
        print(f"FAILED {name}")
    return EXIT_DATA if failed else EXIT_OK


def _experiment(args) -> Experiment:
    fusion = FUSION_FLAGS[args.fusion]
    helper = FeatureKind(args.helper) if args.helper else None
    if helper is not None and not (Path(args.features) / matrix_filename(helper)).is_file():
        raise UsageError(f"--helper {helper.value}: no {matrix_filename(helper)} in {args.features}")
    return Experiment(
        feature=FeatureKind(args.feature),
        helper=helper,
        fusion_mode=fusion,
        readout=args.readout,
        helper_evolves=args.helper_evolves,
        share_tokenizer=args.share_tokenizer,
        settings=_settings(args),
    )


def _settings(args) -> TrainSettings:
    return TrainSettings(
        max_epochs=args.max_epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        early_stop=args.early_stop,
    )


def _hyper(args) -> HyperParams:
    return HyperParams(
        lr=args.lr,
        weight_decay=args.weight_decay,
        token_dim=args.token_dim,
        n_layers=args.layers,
        dropout_attn=args.dropout_attn,
        dropout_ffn=args.dropout_ffn,
        dropout_residual=args.dropout_residual,
    )


def _dataset(args, experiment: Experiment):
    kinds = [experiment.feature] + ([experiment.helper] if experiment.helper else [])
    return load_dataset(Path(args.features), args.assessment, kinds)


def _print_report(report) -> None:
    label = report.feature.value + (f" + {report.helper.value}" if report.helper else "")
    print(f"feature={label} fusion={report.fusion_mode.value} assessment={report.assessment}")
    for fold in report.folds:
        print(f"fold {fold.fold}: r={fold.r:.3f} best_epoch={fold.best_epoch} n_val={len(fold.val_subject_ids)}")
    print(f"r = {report.summary}")


def cmd_cv(args) -> int:
    experiment = _experiment(args)
    report = cross_validate(_dataset(args, experiment), experiment, _hyper(args), args.seed, args.threads)
    _print_report(report)
    if args.report:
        write_text(Path(args.report), report.to_json())
    return EXIT_OK


def cmd_search(args) -> int:
    experiment = _experiment(args)
    ranges = HyperRanges(
        trials=args.trials,
        token_dim=tuple(args.token_range),
        n_layers=tuple(args.layer_range),
    )
    result = hyperparam_search(_dataset(args, experiment), experiment, ranges, args.seed, args.threads)
    for trial in result.trials:
        score = "failed" if trial.r_mean is None else f"{trial.r_mean:.3f}±{trial.r_std:.3f}"
        h = trial.hyperparams
        print(f"trial {trial.trial:2d}: r={score} lr={h.lr:.2e} wd={h.weight_decay:.2e} d={h.token_dim} layers={h.n_layers}")
    print(f"best trial {result.best_trial}")
    _print_report(result.report)
    if args.report:
        write_text(Path(args.report), result.report.to_json())
    return EXIT_OK


def cmd_select_helper(args) -> int:
    dataset = load_dataset(Path(args.features), args.assessment, SHAPE_FEATURES)
    best, scores = select_helper_feature(dataset, _hyper(args), args.seed, _settings(args), args.threads)
    banner("Helper selection (self-attention baseline, mean r)")
    for kind, r in scores.items():
        print(f"{kind.value:<24} r={r:.3f}" if math.isfinite(r) else f"{kind.value:<24} r=n/a")
    print(f"helper={best.value}")
    return EXIT_OK


def cmd_table(args) -> int:
    dataset = load_dataset(Path(args.features), args.assessment)
    helper = FeatureKind(args.helper)
    if helper not in dataset.matrices:
        raise UsageError(f"--helper {helper.value}: no {matrix_filename(helper)} in {args.features}")
    rows = fusion_table(dataset, helper, _hyper(args), args.seed, _settings(args), threads=args.threads)
    banner(f"Baseline vs cross fusion with helper {helper.value}")
    for line in format_fusion_table(rows, helper):
        print(line)
    return EXIT_OK


def cmd_train(args) -> int:
    """Cross-validated report plus a final model fitted on every subject, both under --output."""
    experiment = _experiment(args)
    dataset, hyper = _dataset(args, experiment), _hyper(args)
    report = cross_validate(dataset, experiment, hyper, args.seed, args.threads)
    _print_report(report)
    model = fit_final(dataset, experiment, hyper, args.seed)
    save_trained(model, Path(args.output))
    write_text(Path(args.output) / REPORT_FILE, report.to_json())
    write_text(Path(args.output) / "history.json", model.history.model_dump_json(indent=2) + "\n")
    print(f"feature={experiment.label} epochs={model.history.epochs_run} best_epoch={model.history.best_epoch} "
          f"val_mse={model.history.best_val_loss:.6f} output={args.output}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_trained(args.model)
    kinds = [model.feature] + ([model.helper] if model.helper else [])
    dataset = load_dataset(Path(args.features), args.assessment, kinds)
    helper = dataset.matrices[model.helper] if model.helper else None
    scores = model.predict_scores(dataset.matrices[model.feature], helper)
    frame = pd.DataFrame(
        {"predicted": scores, "actual": dataset.target},
        index=pd.Index(list(dataset.subject_ids), name="subject_id"),
    )
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.output)
    print(f"subjects={dataset.size} output={args.output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    """Finite-difference check of every differentiable op and the tiny SFFormer; one line per case."""
    rng = np.random.default_rng(args.seed)
    cases = tensor_core.op_gradcheck_cases(rng) + sfformer_model.model_gradcheck_cases(rng)
    names = {name for name, _, _ in cases}
    if args.corrupt_op and args.corrupt_op not in names:
        raise UsageError(f"--corrupt-op {args.corrupt_op}: unknown case")

    failures = 0
    for name, fn, inputs in cases:
        corrupt = 1.5 if name == args.corrupt_op else 1.0
        error = tensor_core.gradcheck(fn, inputs, corrupt=corrupt)
        ok = error < args.tolerance
        failures += not ok
        print(f"{name:<24} max_rel_err={error:.3e} {'PASS' if ok else 'FAIL'}")
    print(f"{len(cases) - failures}/{len(cases)} passed")
    return EXIT_NUMERIC if failures else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=config.SEED)
    parser.add_argument("--threads", type=int, default=config.THREADS, help="worker threads (1 = bit-deterministic)")


def _training(parser: argparse.ArgumentParser, feature: bool = True) -> None:
    _common(parser)
    parser.add_argument("--features", required=True, help="directory written by the features command")
    parser.add_argument("--assessment", default=config.ASSESSMENT)
    if feature:
        parser.add_argument("--feature", default=FeatureKind.VOLUME.value, choices=FEATURE_NAMES)
        parser.add_argument("--fusion", default="self", choices=sorted(FUSION_FLAGS))
        parser.add_argument("--helper", choices=FEATURE_NAMES, help="helper feature for --fusion cross")
        parser.add_argument("--readout", default=Readout.CLS.value, choices=[r.value for r in Readout])
        parser.add_argument("--helper-evolves", action="store_true", help="update the helper stream in every layer")
        parser.add_argument("--share-tokenizer", action="store_true")
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--weight-decay", type=float, default=1e-5)
    parser.add_argument("--token-dim", type=int, default=64)
    parser.add_argument("--layers", type=int, default=1)
    parser.add_argument("--dropout-attn", type=float, default=0.0)
    parser.add_argument("--dropout-ffn", type=float, default=0.0)
    parser.add_argument("--dropout-residual", type=float, default=0.0)
    parser.add_argument("--max-epochs", type=int, default=config.MAX_EPOCHS)
    parser.add_argument("--patience", type=int, default=config.PATIENCE)
    parser.add_argument("--batch-size", type=int, default=config.BATCH_SIZE)
    parser.add_argument("--early-stop", default=EarlyStopSplit.HELD_OUT.value, choices=[s.value for s in EarlyStopSplit],
                        help="validation set for early stopping")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Fiber cluster shape features and SFFormer score prediction",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure",
    )
    parser.add_argument("--log-level", default=config.LOG_LEVEL)
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic subject tree")
    _common(p)
    p.add_argument("--output", required=True)
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--streamlines", type=int, default=12)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--family", default=GeometryFamily.MIXED.value, choices=[f.value for f in GeometryFamily])
    p.add_argument("--jitter", type=float, default=0.2)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--target", action="append", help="feature=weight term of the target rule (repeatable)")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--with-maps", action="store_true", help="also write FA/MD maps")
    p.add_argument("--spacing", type=float, default=config.VOXEL_SPACING)
    p.add_argument("--assessment", default=config.ASSESSMENT)
    p.set_defaults(handler=cmd_synth_command)

    p = sub.add_parser("features", help="compute feature matrices for every subject")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--clusters", type=int, default=config.CLUSTER_COUNT)
    p.add_argument("--spacing", type=float, default=config.VOXEL_SPACING)
    p.add_argument("--raster-mode", default=config.RASTER_MODE, choices=["traversal", "points"])
    p.add_argument("--cylinder-diameter", action="store_true", default=config.CYLINDER_DIAMETER)
    p.add_argument("--surface-faces", action="store_true", default=config.SURFACE_FACES)
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser("cv", help="3-fold cross-validation")
    _training(p)
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(handler=cmd_cv)

    p = sub.add_parser("search", help="random hyper-parameter search")
    _training(p)
    p.add_argument("--trials", type=int, default=config.TRIALS)
    p.add_argument("--token-range", type=int, nargs=2, default=[64, 512], metavar=("LOW", "HIGH"))
    p.add_argument("--layer-range", type=int, nargs=2, default=[1, 4], metavar=("LOW", "HIGH"))
    p.add_argument("--report", help="write the JSON report of the best trial here")
    p.set_defaults(handler=cmd_search)

    p = sub.add_parser("select-helper", help="best shape feature under the baseline model")
    _training(p, feature=False)
    p.set_defaults(handler=cmd_select_helper)

    p = sub.add_parser("table", help="baseline vs cross fusion for every feature")
    _training(p, feature=False)
    p.add_argument("--helper", required=True, choices=FEATURE_NAMES)
    p.set_defaults(handler=cmd_table)

    p = sub.add_parser("train", help="cross-validate, then fit one model on all subjects and save both")
    _training(p)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", help="score subjects with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--assessment", default=config.ASSESSMENT)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=config.SEED)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging(args.log_level, args.log_file)
    try:
        return args.handler(args)
    except PipelineError as e:
        print(f"ERROR: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
