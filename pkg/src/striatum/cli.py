"""Batch command-line interface.

Subcommands: generate-phantoms, crossval, train, predict, hyperopt,
eval-swedd, report. Exit codes: 0 success, 2 usage/config error, 1 runtime
failure. Flags win over the optional --config JSON file (keys are flag
names with underscores), which wins over built-in defaults. STRIATUM_SEED
serves as the fallback global seed when --seed is absent.

Human-readable tables go to stdout; machine-readable artifacts are written
only where --report/--out/--best point.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import evaluation, models, phantom, tpe
from .errors import ConfigError, StriatumError
from .ingest import (
    AVERAGE_SLICES,
    HOLDOUT,
    SINGLE_SLICE,
    TRAIN_EVAL,
    Label,
    load_dataset,
    normalize,
    read_manifest,
    select_slices,
)
from .nifti import read_nifti
from .rng import derive_seed

_PREPROC_FLAG = {"average": AVERAGE_SLICES, "single": SINGLE_SLICE}


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("STRIATUM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"STRIATUM_SEED must be an integer, got {env!r}") from None
    return 0


def _apply_config_file(args: argparse.Namespace) -> None:
    """Fill still-unset (None) options from the --config JSON document."""
    if getattr(args, "config", None) is None:
        return
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {args.config}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {args.config} must hold a JSON object")
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)


def _train_config(args, seed: int) -> models.TrainConfig:
    return models.TrainConfig(
        optimizer=args.optimizer if args.optimizer is not None else "adam",
        learning_rate=args.lr if args.lr is not None else 1e-3,
        batch_size=args.batch_size if args.batch_size is not None else 32,
        max_epochs=args.epochs if args.epochs is not None else 100,
        early_stop_patience=args.patience if args.patience is not None else 10,
        validation_fraction=args.val_fraction if args.val_fraction is not None else 0.1,
        seed=seed,
    )


def _model_spec(args, seed: int) -> models.ModelSpec:
    spec = models.default_spec(args.model, seed=seed)
    if getattr(args, "reg_c", None) is not None:
        if spec.family not in (models.LOGREG, models.SVM):
            raise ConfigError("--reg-c applies only to logreg and svm")
        spec = models.ModelSpec(spec.family, seed=seed, reg_c=args.reg_c)
    return spec


def _load_split(args, mode: str):
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    offset = args.slice_offset if args.slice_offset is not None else 0
    samples = load_dataset(rows, mode, base_dir=manifest_path.parent, slice_offset=offset)
    train_eval = [s for s in samples if s.cohort_role == TRAIN_EVAL]
    holdout = [s for s in samples if s.cohort_role == HOLDOUT]
    return train_eval, holdout


def _pct(x) -> str:
    return "undef" if x is None else f"{100.0 * x:.2f}%"


def _print_report(report: evaluation.EvalReport) -> None:
    cm = report.confusion
    print(f"confusion [[tp fn][fp tn]] = [[{cm.tp} {cm.fn}][{cm.fp} {cm.tn}]]  (n={cm.total})")
    print(
        f"accuracy {_pct(report.accuracy)}  auc {_pct(report.auc)}  apr {_pct(report.apr)}  "
        f"precision {_pct(report.precision)}  recall {_pct(report.recall)}  "
        f"specificity {_pct(report.specificity)}"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_phantoms(args) -> int:
    _apply_config_file(args)
    seed = _resolve_seed(args)
    counts = {
        "normal": args.normal if args.normal is not None else 0,
        "pd": args.pd if args.pd is not None else 0,
        "swedd": args.swedd if args.swedd is not None else 0,
    }
    if sum(counts.values()) == 0:
        raise ConfigError("nothing to generate: all of --normal/--pd/--swedd are zero")
    noise = args.noise_sigma if args.noise_sigma is not None else 0.02
    severity = args.severity if args.severity is not None else 0.7
    samples = []
    for offset, cls in enumerate(("normal", "pd", "swedd")):
        if counts[cls] == 0:
            continue
        cfg = phantom.PhantomConfig(
            phantom_class=cls,
            n=counts[cls],
            seed=derive_seed(seed, offset),
            noise_sigma=noise,
            severity=severity,
            emit=phantom.EMIT_VOLUME,
        )
        samples.extend(phantom.generate(cfg))
    manifest_path = phantom.emit_manifest(samples, args.out)
    print(
        f"wrote {len(samples)} volumes + {manifest_path.name} to {args.out} "
        f"(normal={counts['normal']} pd={counts['pd']} swedd={counts['swedd']})"
    )
    return 0


def cmd_crossval(args) -> int:
    _apply_config_file(args)
    seed = _resolve_seed(args)
    mode = _PREPROC_FLAG[args.preproc]
    train_eval, _ = _load_split(args, mode)
    if not train_eval:
        raise ConfigError("manifest contains no train/eval (normal or pd) rows")
    k = args.k if args.k is not None else 10
    plan = evaluation.stratified_kfold([s.label for s in train_eval], k, seed)
    spec = _model_spec(args, seed)
    cfg = _train_config(args, seed)
    jobs = args.jobs if args.jobs is not None else 1
    report = evaluation.crossval(spec, cfg, train_eval, plan, jobs=jobs)
    report.config["preproc"] = mode
    _print_report(report)
    if args.report is not None:
        evaluation.emit_report(report, args.report)
        print(f"report written to {args.report}")
    if args.scores_csv is not None:
        evaluation.write_scores_csv(report, args.scores_csv)
        print(f"scores written to {args.scores_csv}")
    return 0


def cmd_train(args) -> int:
    _apply_config_file(args)
    seed = _resolve_seed(args)
    mode = _PREPROC_FLAG[args.preproc]
    train_eval, _ = _load_split(args, mode)
    if not train_eval:
        raise ConfigError("manifest contains no train/eval (normal or pd) rows")
    spec = _model_spec(args, seed)
    cfg = _train_config(args, seed)
    model = models.fit(spec, cfg, train_eval)
    models.save_model(model, args.out)
    meta = model.train_meta
    print(
        f"trained {spec.family} on {len(train_eval)} samples "
        f"({meta['epochs_run']} epochs, final loss {meta['final_train_loss']:.6f}); "
        f"saved to {args.out}"
    )
    return 0


def cmd_predict(args) -> int:
    _apply_config_file(args)
    model = models.load_model(args.model_file)
    if args.preproc is not None:
        requested = _PREPROC_FLAG[args.preproc]
        if requested != model.preproc_tag:
            raise ConfigError(
                f"model was trained on {model.preproc_tag!r} but --preproc asks for {requested!r}"
            )
    offset = args.slice_offset if args.slice_offset is not None else 0
    for file in args.files:
        volume = read_nifti(file)
        raw = select_slices(volume, model.preproc_tag, offset=offset)
        image = normalize(raw, preproc_tag=model.preproc_tag, source_id=str(file))
        s = models.score(model, image)
        label = models.predict_from_score(model, s)
        print(f"{file}\t{label.value}\t{s:.6f}")
    return 0


def cmd_eval_swedd(args) -> int:
    _apply_config_file(args)
    model = models.load_model(args.model_file)
    manifest_path = Path(args.manifest)
    rows = read_manifest(manifest_path)
    offset = args.slice_offset if args.slice_offset is not None else 0
    samples = load_dataset(rows, model.preproc_tag, base_dir=manifest_path.parent, slice_offset=offset)
    swedd = [s for s in samples if s.label == Label.SWEDD]
    if not swedd:
        raise ConfigError("manifest contains no swedd rows")
    result = evaluation.evaluate_holdout([model], swedd)[0]
    print(f"tn={result['tn']} fp={result['fp']}")
    print(f"holdout accuracy {_pct(result['accuracy'])} ({result['tn']} of {len(swedd)})")
    return 0


def cmd_hyperopt(args) -> int:
    _apply_config_file(args)
    seed = _resolve_seed(args)
    if args.model not in (models.CNN, models.MLP):
        raise ConfigError("hyperparameter search applies to cnn and mlp only")
    budget = args.budget
    if budget is None or budget < 1:
        raise ConfigError("--budget must be >= 1")
    mode = _PREPROC_FLAG[args.preproc]
    train_eval, _ = _load_split(args, mode)
    if not train_eval:
        raise ConfigError("manifest contains no train/eval (normal or pd) rows")
    k = args.k if args.k is not None else 10
    plan = evaluation.stratified_kfold([s.label for s in train_eval], k, seed)
    cfg = _train_config(args, seed)
    space = tpe.default_search_spaces()[args.model]

    def objective(assignment: dict) -> float:
        if args.model == models.CNN:
            spec = models.cnn_spec_from_assignment(assignment, seed=seed)
        else:
            spec = models.mlp_spec_from_assignment(assignment, seed=seed)
        report = evaluation.crossval(spec, cfg, train_eval, plan)
        return -report.accuracy

    history = []
    history_path = Path(args.history) if args.history is not None else None
    if history_path is not None and history_path.exists():
        history = tpe.load_history(history_path)
        print(f"resuming from {len(history)} recorded trials in {history_path}")
    if len(history) >= budget:
        print(f"history already holds {len(history)} >= {budget} trials; nothing to run")
    on_trial = (lambda t: tpe.append_trial(t, history_path)) if history_path else None
    tpe_cfg = tpe.TpeConfig(
        n_startup=args.n_startup if args.n_startup is not None else 10,
        gamma=args.gamma if args.gamma is not None else 0.25,
        n_candidates=args.n_candidates if args.n_candidates is not None else 24,
        seed=seed,
    )
    best, history = tpe.optimize(
        objective, space, budget, tpe_cfg, history=history, on_trial=on_trial
    )
    print(f"best objective {best.objective:.6f} (cv accuracy {-best.objective:.4f})")
    print(f"best assignment: {json.dumps(best.assignment, sort_keys=True)}")
    if args.best is not None:
        with open(args.best, "w", encoding="utf-8") as f:
            json.dump(
                {"assignment": best.assignment, "objective": best.objective},
                f,
                sort_keys=True,
                indent=2,
            )
            f.write("\n")
    return 0


def cmd_report(args) -> int:
    _apply_config_file(args)
    try:
        with open(args.infile, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read report {args.infile}: {e}") from None
    report = evaluation.report_from_dict(doc)
    _print_report(report)
    if args.check:
        recomputed = evaluation.metrics_from_confusion(report.confusion)
        stored = {
            "accuracy": report.accuracy,
            "precision": report.precision,
            "recall": report.recall,
            "specificity": report.specificity,
        }
        for key, value in recomputed.items():
            if stored[key] is None and value is None:
                continue
            if stored[key] is None or value is None or abs(stored[key] - value) > 1e-12:
                raise StriatumError(
                    f"stored {key} {stored[key]} disagrees with confusion matrix ({value})"
                )
        print("metrics consistent with confusion matrix")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (default: $STRIATUM_SEED or 0)")
    p.add_argument("--config", default=None, help="JSON file with default flag values")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None, help="default adam")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-3)")
    p.add_argument("--batch-size", type=int, default=None, help="default 32")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default 100)")
    p.add_argument("--patience", type=int, default=None, help="early-stop patience (default 10)")
    p.add_argument("--val-fraction", type=float, default=None, help="validation split (default 0.1)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--preproc", choices=["average", "single"], required=True)
    p.add_argument("--slice-offset", type=int, default=None, help="shift slice indices (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="striatum",
        description="SPECT striatal image classification pipeline (phantom data end to end)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantoms", help="write synthetic NIfTI volumes + manifest")
    p.add_argument("--normal", type=int, default=None)
    p.add_argument("--pd", type=int, default=None)
    p.add_argument("--swedd", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--noise-sigma", type=float, default=None, help="noise level (default 0.02)")
    p.add_argument("--severity", type=float, default=None, help="PD severity (default 0.7)")
    _add_common(p)
    p.set_defaults(func=cmd_generate_phantoms)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--model", choices=list(models.FAMILIES), required=True)
    _add_data_flags(p)
    p.add_argument("--k", type=int, default=None, help="folds (default 10)")
    p.add_argument("--reg-c", type=float, default=None, help="regularisation parameter")
    p.add_argument("--report", default=None, help="write report JSON here")
    p.add_argument("--scores-csv", default=None, help="dump pooled (id, score, label) rows")
    p.add_argument("--jobs", type=int, default=None, help="parallel fold workers (default 1)")
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("train", help="fit one model on all train/eval rows")
    p.add_argument("--model", choices=list(models.FAMILIES), required=True)
    _add_data_flags(p)
    p.add_argument("--reg-c", type=float, default=None)
    p.add_argument("--out", required=True, help="model file to write")
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score NIfTI files with a trained model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--preproc", choices=["average", "single"], default=None)
    p.add_argument("--slice-offset", type=int, default=None)
    p.add_argument("files", nargs="+", help="NIfTI volumes to classify")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("hyperopt", help="TPE search over cnn/mlp architectures")
    p.add_argument("--model", choices=[models.CNN, models.MLP], required=True)
    _add_data_flags(p)
    p.add_argument("--budget", type=int, default=None, help="total trials")
    p.add_argument("--k", type=int, default=None, help="CV folds inside the objective (default 10)")
    p.add_argument("--history", default=None, help="JSONL trial log (resumes if present)")
    p.add_argument("--best", default=None, help="write the best trial JSON here")
    p.add_argument("--n-startup", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--n-candidates", type=int, default=None)
    _add_training_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_hyperopt)

    p = sub.add_parser("eval-swedd", help="hold-out evaluation on swedd rows")
    p.add_argument("--model-file", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--slice-offset", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval_swedd)

    p = sub.add_parser("report", help="pretty-print a report JSON")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--check", action="store_true", help="verify metrics against the matrix")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (StriatumError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
