#!/usr/bin/env python3
"""Full phantom study: cross-validate all four classifiers, then score the
SWEDD-like hold-out with the final CNN.

Mirrors the published evaluation protocol at phantom scale: a 210/443
normal/early-PD cohort, stratified 10-fold cross-validation with pooled
out-of-fold metrics, and an 80-scan normal-looking hold-out. Runs in
roughly 10-15 minutes on one CPU core (the CNN dominates).

Usage:
    python scripts/run_phantom_study.py [--seed 7] [--out report_dir]
"""

import argparse
import json
import time
from pathlib import Path

from striatum.evaluation import crossval, emit_report, evaluate_holdout, stratified_kfold
from striatum.models import TrainConfig, default_spec, fit
from striatum.phantom import phantom_dataset

TRAIN_SETTINGS = {
    "cnn": dict(learning_rate=3e-3, batch_size=16, max_epochs=1,
                early_stop_patience=0, validation_fraction=0.0),
    "mlp": dict(learning_rate=3e-3, max_epochs=20,
                early_stop_patience=0, validation_fraction=0.0),
    "logreg": dict(max_epochs=200),
    "svm": dict(max_epochs=200),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--normal", type=int, default=210)
    ap.add_argument("--pd", type=int, default=443)
    ap.add_argument("--swedd", type=int, default=80)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--out", default=None, help="directory for report JSONs")
    args = ap.parse_args()

    print(f"generating {args.normal}+{args.pd} train/eval and {args.swedd} swedd phantoms ...")
    data = phantom_dataset(args.normal, args.pd, seed=args.seed, n_swedd=args.swedd)
    train_eval = [s for s in data if s.cohort_role == "train_eval"]
    swedd = [s for s in data if s.cohort_role == "holdout"]
    plan = stratified_kfold([s.label for s in train_eval], args.k, seed=args.seed)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    print(f"\n{'model':8s} {'acc':>8s} {'auc':>8s} {'apr':>8s} {'prec':>8s} {'rec':>8s} {'spec':>8s} {'time':>7s}")
    for family in ("logreg", "svm", "mlp", "cnn"):
        spec = default_spec(family, seed=args.seed + 4)
        cfg = TrainConfig(seed=args.seed + 4, **TRAIN_SETTINGS[family])
        t0 = time.time()
        report = crossval(spec, cfg, train_eval, plan)
        row = [report.accuracy, report.auc, report.apr, report.precision, report.recall, report.specificity]
        cells = " ".join(f"{100*v:7.2f}%" if v is not None else "   undef" for v in row)
        print(f"{family:8s} {cells} {time.time()-t0:6.0f}s")
        if out_dir:
            emit_report(report, out_dir / f"crossval_{family}.json")

    print("\ntraining the final cnn on the full cohort for the hold-out ...")
    cfg = TrainConfig(seed=args.seed + 4, **TRAIN_SETTINGS["cnn"])
    cnn = fit(default_spec("cnn", seed=args.seed + 4), cfg, train_eval)
    result = evaluate_holdout([cnn], swedd)[0]
    print(f"swedd hold-out: tn={result['tn']} fp={result['fp']} "
          f"accuracy={100*result['accuracy']:.2f}% ({result['tn']} of {len(swedd)})")
    if out_dir:
        with open(out_dir / "swedd_holdout.json", "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
            f.write("\n")


if __name__ == "__main__":
    main()
