"""Acceptance suite: one test (or parametrized group) per criterion A1-A10.

Conventions: criteria run at their stated tolerances, fixed seeds, no
calibration knobs. A handful of A1 cells are strict-xfail because the
published table they check against is internally inconsistent there (the
printed matrix contradicts the printed percentages); the xfail reasons
carry the arithmetic. Everything else must pass outright.
"""

import hashlib
import itertools
import json
import math
import time

import numpy as np
import pytest

from striatum import models, tensor
from striatum.cli import main as cli_main
from striatum.evaluation import (
    ConfusionMatrix,
    auc,
    average_precision,
    crossval,
    evaluate_holdout,
    metrics_from_confusion,
    stratified_kfold,
)
from striatum.ingest import (
    AVERAGE_SLICES,
    SINGLE_SLICE,
    SLICE_WINDOW,
    Label,
    normalize,
    select_slices,
)
from striatum.models import TrainConfig, default_spec, fit
from striatum.nifti import INTENSITY_MAX, Volume, read_nifti, write_nifti
from striatum.phantom import phantom_dataset
from striatum.rng import Xoshiro256pp
from striatum.tpe import (
    Categorical,
    Integer,
    LogUniform,
    ParamSpace,
    TpeConfig,
    Uniform,
    optimize,
    sample_prior,
)

# ===========================================================================
# A1: metric arithmetic against the published evaluation tables
# ===========================================================================
# Rows are (method, panel, [[tp, fn], [fp, tn]] exactly as printed, printed
# percentages for accuracy/precision/recall/specificity). The cohort holds
# 653 train/eval subjects, so every matrix should sum to 653; the two rows
# flagged below sum to 650 as printed, and the unique tn restoring the 653
# total also reproduces the printed specificity, so those tn cells are
# misprints. Three further percentage cells disagree with their own matrix
# by more than half an ULP of the printed 2-decimal value (truncation or
# typo at source). Those six cells are strict xfails; the other 26 must
# match within 0.005 percentage points.

TABLE_ROWS = [
    # method, panel, matrix, (acc, prec, rec, spec)
    ("logreg", "average", (431, 12, 12, 198), (96.32, 97.29, 97.29, 94.29)),
    ("svm", "average", (429, 14, 9, 198), (96.47, 97.95, 96.84, 95.71)),
    ("mlp", "average", (426, 17, 5, 202), (96.63, 98.84, 96.16, 97.62)),
    ("cnn", "average", (433, 10, 1, 209), (98.32, 99.77, 97.74, 99.52)),
    ("logreg", "single", (431, 12, 12, 198), (96.32, 97.29, 97.29, 94.29)),
    ("svm", "single", (429, 14, 12, 198), (96.02, 97.28, 96.83, 94.29)),
    ("mlp", "single", (430, 13, 8, 202), (96.79, 98.17, 97.07, 96.19)),
    ("cnn", "single", (439, 4, 2, 208), (99.08, 99.55, 99.10, 99.05)),
]

METRIC_NAMES = ("accuracy", "precision", "recall", "specificity")

# cells where the printed matrix and the printed percentage contradict each
# other; value = computed-from-matrix %, for the xfail reason
_PRINTED_INCONSISTENT = {
    ("svm", "average", "accuracy"): 96.4615,  # (429+198)/650; printed 96.47
    ("svm", "average", "specificity"): 95.6522,  # 198/207; printed 95.71 = 201/210
    ("mlp", "average", "accuracy"): 96.6154,  # (426+202)/650; printed 96.63
    ("mlp", "average", "specificity"): 97.5845,  # 202/207; printed 97.62 = 205/210
    ("svm", "single", "recall"): 96.8397,  # 429/443 rounds to 96.84; printed 96.83
    ("mlp", "single", "accuracy"): 96.7841,  # 632/653 rounds to 96.78; printed 96.79
}


def _a1_params():
    params = []
    for method, panel, matrix, printed in TABLE_ROWS:
        for name, value in zip(METRIC_NAMES, printed):
            key = (method, panel, name)
            marks = ()
            if key in _PRINTED_INCONSISTENT:
                marks = pytest.mark.xfail(
                    strict=True,
                    reason=(
                        f"published table misprint: {method}/{panel} {name} prints "
                        f"{value} but its printed matrix gives {_PRINTED_INCONSISTENT[key]}"
                    ),
                )
            params.append(pytest.param(matrix, name, value, id=f"{method}-{panel}-{name}", marks=marks))
    return params


@pytest.mark.parametrize("matrix,metric,printed", _a1_params())
def test_a1_metric_arithmetic_vs_published_tables(matrix, metric, printed):
    tp, fn, fp, tn = matrix
    computed = metrics_from_confusion(ConfusionMatrix(tp, fn, fp, tn))[metric]
    assert abs(100.0 * computed - printed) <= 0.005


_CORRECTED = {
    # tn restored so the matrix sums to 653 and matches printed specificity
    ("svm", "average"): (429, 14, 9, 201),
    ("mlp", "average"): (426, 17, 5, 205),
}


def _a1_corrected_params():
    params = []
    for (method, panel), matrix in _CORRECTED.items():
        printed = dict(zip(METRIC_NAMES, next(r[3] for r in TABLE_ROWS if r[0] == method and r[1] == panel)))
        for name in METRIC_NAMES:
            marks = ()
            if method == "svm" and name == "accuracy":
                # (429+201)/653 = 96.478%, printed 96.47: truncated at source
                marks = pytest.mark.xfail(
                    strict=True, reason="printed 96.47 is a truncation of 96.478"
                )
            params.append(
                pytest.param(matrix, name, printed[name], id=f"{method}-{panel}-{name}-corrected", marks=marks)
            )
    return params


@pytest.mark.parametrize("matrix,metric,printed", _a1_corrected_params())
def test_a1_sum_corrected_matrices_match(matrix, metric, printed):
    """After restoring the 653 totals, the corrected rows agree except one
    truncated accuracy cell, pinning the misprints to the tn entries."""
    tp, fn, fp, tn = matrix
    assert tp + fn + fp + tn == 653
    computed = metrics_from_confusion(ConfusionMatrix(tp, fn, fp, tn))[metric]
    assert abs(100.0 * computed - printed) <= 0.005


# ===========================================================================
# A2: architecture fidelity
# ===========================================================================

def test_a2_default_cnn_reproduces_shape_chain():
    net = models.build_cnn(default_spec("cnn", seed=0))
    shapes = tensor.layer_output_shapes(net, (109, 91, 1))
    chain = [
        (105, 87, 64),
        (52, 43, 64),
        (50, 41, 32),
        (25, 20, 32),
        (16000,),
        (16,),
        (2,),
    ]
    # the chain must appear in order, layer by layer, with no other shape
    # interleaving except shape-preserving activations/dropout
    it = iter(shapes)
    for expected in chain:
        assert any(got == expected for got in it), f"missing {expected} in {shapes}"
    # and a real forward pass agrees
    x = Xoshiro256pp(1).normals(109 * 91).reshape(109, 91, 1)
    logits, _ = tensor.forward_batch(net, x[None], mode="infer")
    assert logits.shape == (1, 2)


# ===========================================================================
# A3: gradient correctness
# ===========================================================================

def test_a3_layerwise_gradients():
    rng = Xoshiro256pp(21)
    x = rng.normals(9 * 7).reshape(9, 7, 1)
    nets = {
        "conv": [
            tensor.conv2d_layer(rng.normals(3 * 9).reshape(3, 1, 3, 3) * 0.5, rng.normals(3) * 0.1),
            tensor.flatten_layer(),
            tensor.dense_layer(rng.normals(2 * 105).reshape(2, 105) * 0.2, np.zeros(2)),
            tensor.softmax_ce_layer(),
        ],
        "dense": [
            tensor.dense_layer(rng.normals(4 * 63).reshape(4, 63) * 0.2, rng.normals(4) * 0.1),
            tensor.softmax_ce_layer(),
        ],
        "relu": [
            tensor.dense_layer(rng.normals(6 * 63).reshape(6, 63) * 0.2, rng.normals(6) * 0.1),
            tensor.relu_layer(),
            tensor.dense_layer(rng.normals(2 * 6).reshape(2, 6) * 0.5, np.zeros(2)),
            tensor.softmax_ce_layer(),
        ],
        "maxpool": [
            tensor.conv2d_layer(rng.normals(2 * 4).reshape(2, 1, 2, 2) * 0.5, np.zeros(2)),
            tensor.maxpool2d_layer(),
            tensor.flatten_layer(),
            tensor.dense_layer(rng.normals(2 * 24).reshape(2, 24) * 0.3, np.zeros(2)),
            tensor.softmax_ce_layer(),
        ],
        "dropout_infer": [
            tensor.dense_layer(rng.normals(4 * 63).reshape(4, 63) * 0.2, np.zeros(4)),
            tensor.dropout_layer(0.3),
            tensor.dense_layer(rng.normals(2 * 4).reshape(2, 4) * 0.5, np.zeros(2)),
            tensor.softmax_ce_layer(),
        ],
    }
    for name, net in nets.items():
        inp = x if name in ("conv", "maxpool") else x.reshape(-1)
        res = tensor.grad_check(net, inp, label=1, eps=1e-3)
        assert res.max_rel_error <= 1e-4, f"{name}: {res.max_rel_error}"


def test_a3_full_default_cnn_sampled_parameters():
    start = time.time()
    net = models.build_cnn(default_spec("cnn", seed=2))
    x = Xoshiro256pp(3).uniforms(109 * 91).reshape(109, 91, 1)
    res = tensor.grad_check(net, x, label=1, eps=1e-3, sample=200, rng=Xoshiro256pp(4))
    assert res.n_checked == 200
    assert res.max_rel_error <= 1e-4
    assert time.time() - start <= 120.0


# ===========================================================================
# A4 / A5: end-to-end phantom cohort
# ===========================================================================

COHORT_SEED = 7
PLAN_SEED = 7
MODEL_SEED = 11


@pytest.fixture(scope="module")
def cohort():
    data = phantom_dataset(210, 443, seed=COHORT_SEED, n_swedd=80)
    train_eval = [s for s in data if s.cohort_role == "train_eval"]
    swedd = [s for s in data if s.cohort_role == "holdout"]
    assert len(train_eval) == 653 and len(swedd) == 80
    return train_eval, swedd


def _cv(family, train_eval, **cfg_kw):
    spec = default_spec(family, seed=MODEL_SEED)
    cfg = TrainConfig(seed=MODEL_SEED, **cfg_kw)
    plan = stratified_kfold([s.label for s in train_eval], 10, seed=PLAN_SEED)
    return crossval(spec, cfg, train_eval, plan)


def test_a4_cnn_crossval(cohort):
    train_eval, _ = cohort
    report = _cv(
        "cnn",
        train_eval,
        learning_rate=3e-3,
        batch_size=16,
        max_epochs=1,
        early_stop_patience=0,
        validation_fraction=0.0,
    )
    print(
        f"\nA4 cnn: accuracy={report.accuracy:.4f} auc={report.auc:.5f} "
        f"apr={report.apr:.5f} confusion={report.confusion.as_rows()}"
    )
    assert report.confusion.total == 653
    assert report.accuracy >= 0.95
    assert report.auc >= 0.98


def test_a4_logreg_crossval(cohort):
    train_eval, _ = cohort
    report = _cv("logreg", train_eval, max_epochs=200)
    print(f"\nA4 logreg: accuracy={report.accuracy:.4f} auc={report.auc:.5f}")
    assert report.accuracy >= 0.90


def test_a4_svm_crossval(cohort):
    train_eval, _ = cohort
    report = _cv("svm", train_eval, max_epochs=200)
    print(f"\nA4 svm: accuracy={report.accuracy:.4f} auc={report.auc:.5f}")
    assert report.accuracy >= 0.90


def test_a4_mlp_crossval(cohort):
    train_eval, _ = cohort
    report = _cv(
        "mlp",
        train_eval,
        learning_rate=3e-3,
        max_epochs=20,
        early_stop_patience=0,
        validation_fraction=0.0,
    )
    print(f"\nA4 mlp: accuracy={report.accuracy:.4f} auc={report.auc:.5f}")
    assert report.accuracy >= 0.90


@pytest.fixture(scope="module")
def full_cohort_cnn(cohort):
    train_eval, _ = cohort
    cfg = TrainConfig(
        learning_rate=3e-3,
        batch_size=16,
        max_epochs=1,
        early_stop_patience=0,
        validation_fraction=0.0,
        seed=MODEL_SEED,
    )
    return fit(default_spec("cnn", seed=MODEL_SEED), cfg, train_eval)


def test_a5_swedd_holdout_flow(cohort, full_cohort_cnn):
    _, swedd = cohort
    result = evaluate_holdout([full_cohort_cnn], swedd)[0]
    line = f"tn={result['tn']} fp={result['fp']}"
    print(f"\nA5 cnn swedd holdout: {line} accuracy={result['accuracy']:.4f}")
    assert result["tn"] + result["fp"] == 80
    assert result["accuracy"] >= 0.90
    assert line.startswith("tn=") and " fp=" in line


# ===========================================================================
# A6: TPE efficacy
# ===========================================================================

A6_SPACE = ParamSpace(
    (
        Uniform("x", 0.0, 1.0),
        LogUniform("lr", 1e-4, 1e-1),
        Integer("units", 8, 64),
        Categorical("act", ("relu", "tanh")),
    )
)


def _a6_objective(a):
    return (
        0.05
        + (a["x"] - 0.3) ** 2
        + 0.15 * ((math.log10(a["lr"]) + 2.5) / 1.5) ** 2
        + 0.3 * ((a["units"] - 33) / 28.0) ** 2
        + (0.2 if a["act"] == "tanh" else 0.0)
    )


def test_a6_tpe_beats_paired_random_search():
    start = time.time()
    tpe_best, rs_best = [], []
    for seed in range(20):
        best, _ = optimize(_a6_objective, A6_SPACE, 40, TpeConfig(n_startup=10, seed=seed))
        tpe_best.append(best.objective)
        rng = Xoshiro256pp(seed)
        rs_best.append(
            min(_a6_objective(sample_prior(A6_SPACE, rng)) for _ in range(40))
        )
    print(f"\nA6: tpe median {np.median(tpe_best):.5f} vs random {np.median(rs_best):.5f}")
    assert np.median(tpe_best) <= np.median(rs_best)
    assert time.time() - start <= 60.0


def test_a6_startup_equals_budget_degenerates_to_random():
    budget = 25
    best, history = optimize(
        _a6_objective, A6_SPACE, budget, TpeConfig(n_startup=budget, seed=77)
    )
    rng = Xoshiro256pp(77)
    reference = [sample_prior(A6_SPACE, rng) for _ in range(budget)]
    assert [t.assignment for t in history] == reference


# ===========================================================================
# A7: ingestion correctness
# ===========================================================================

def test_a7_nifti_round_trips(tmp_path):
    rng = Xoshiro256pp(31)
    combos = list(itertools.product(["uint8", "int16", "float32"], ["little", "big"]))
    for i in range(50):
        dims = (2 + rng.randint(6), 2 + rng.randint(6), 2 + rng.randint(6))
        n = dims[0] * dims[1] * dims[2]
        for datatype, endianness in combos:
            top = 255 if datatype == "uint8" else INTENSITY_MAX
            vox = np.floor(rng.uniforms(n) * (top + 1)).astype(np.int32).reshape(dims)
            vol = Volume(voxels=vox)
            path = tmp_path / f"v{i}_{datatype}_{endianness}.nii"
            write_nifti(vol, path, datatype=datatype, endianness=endianness)
            back = read_nifti(path)
            assert np.array_equal(back.voxels, vox), (i, datatype, endianness)
            path.unlink()


def test_a7_normalize_endpoints_exact():
    raw = np.zeros((109, 91))
    raw[0, 0] = 32767.0
    img = normalize(raw, SINGLE_SLICE)
    assert img.pixels[0, 0] == 1.0
    assert img.pixels[5, 5] == 0.0


def test_a7_slice_identities():
    rng = np.random.default_rng(8)
    vol = Volume(voxels=rng.integers(0, INTENSITY_MAX, (91, 109, 91)).astype(np.int32))
    lo, hi = SLICE_WINDOW
    singles = np.stack(
        [select_slices(vol, SINGLE_SLICE, single=z) for z in range(lo, hi + 1)]
    )
    assert np.array_equal(select_slices(vol, AVERAGE_SLICES), singles.mean(axis=0))
    # constant volume: both modes return the constant
    const = Volume(voxels=np.full((91, 109, 91), 321, dtype=np.int32))
    assert np.all(select_slices(const, AVERAGE_SLICES) == 321)
    assert np.all(select_slices(const, SINGLE_SLICE) == 321)


# ===========================================================================
# A8: stratified fold counts
# ===========================================================================

def test_a8_exact_fold_composition_by_exhaustive_count():
    labels = [Label.EARLY_PD] * 443 + [Label.NORMAL] * 210
    for seed in (0, 7, 123):
        plan = stratified_kfold(labels, 10, seed=seed)
        comps = []
        for fold in range(10):
            idx = plan.fold_indices(fold)
            comps.append(
                (
                    sum(labels[i] == Label.EARLY_PD for i in idx),
                    sum(labels[i] == Label.NORMAL for i in idx),
                )
            )
        assert sorted(comps, reverse=True) == [(45, 21)] * 3 + [(44, 21)] * 7
        assert sum(len(plan.fold_indices(f)) for f in range(10)) == 653


# ===========================================================================
# A9: CLI determinism
# ===========================================================================

def _sha_tree(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_a9_cli_generate_deterministic(tmp_path):
    trees = []
    for sub in ("one", "two"):
        out = tmp_path / sub
        rc = cli_main(
            ["generate-phantoms", "--normal", "3", "--pd", "3", "--swedd", "2",
             "--seed", "13", "--out", str(out)]
        )
        assert rc == 0
        trees.append(_sha_tree(out))
    assert trees[0] == trees[1]


def test_a9_cli_crossval_and_train_deterministic(tmp_path):
    out = tmp_path / "data"
    rc = cli_main(
        ["generate-phantoms", "--normal", "4", "--pd", "5", "--seed", "3", "--out", str(out)]
    )
    assert rc == 0
    manifest = str(out / "manifest.csv")

    report_docs, model_hashes, history_texts = [], [], []
    for run in ("x", "y"):
        report = tmp_path / f"r{run}.json"
        rc = cli_main(
            ["crossval", "--model", "logreg", "--preproc", "single",
             "--manifest", manifest, "--seed", "7", "--k", "2",
             "--epochs", "60", "--report", str(report)]
        )
        assert rc == 0
        doc = json.loads(report.read_text())
        doc.pop("timestamp")
        report_docs.append(json.dumps(doc, sort_keys=True))

        model = tmp_path / f"m{run}.json"
        rc = cli_main(
            ["train", "--model", "logreg", "--preproc", "single",
             "--manifest", manifest, "--seed", "7", "--epochs", "40",
             "--out", str(model)]
        )
        assert rc == 0
        model_hashes.append(hashlib.sha256(model.read_bytes()).hexdigest())

        history = tmp_path / f"h{run}.jsonl"
        rc = cli_main(
            ["hyperopt", "--model", "mlp", "--preproc", "single",
             "--manifest", manifest, "--seed", "7", "--k", "2",
             "--budget", "2", "--epochs", "1", "--patience", "0",
             "--val-fraction", "0", "--history", str(history)]
        )
        assert rc == 0
        history_texts.append(history.read_text())

    assert report_docs[0] == report_docs[1]
    assert model_hashes[0] == model_hashes[1]
    assert history_texts[0] == history_texts[1]


# ===========================================================================
# A10: metric properties
# ===========================================================================

def test_a10_auc_monotone_transform_invariance():
    rng = Xoshiro256pp(41)
    for _ in range(50):
        n = 4 + rng.randint(12)
        scores = [round(rng.uniform(), 3) for _ in range(n)]
        labels = [rng.randint(2) for _ in range(n)]
        if len(set(labels)) < 2:
            labels[0], labels[-1] = 0, 1
        base = auc(scores, labels)
        for f in (
            lambda s: 3.0 * s + 1.0,
            lambda s: math.exp(s),
            lambda s: math.atan(4.0 * s),
            lambda s: s**3 + s,
        ):
            assert auc([f(s) for s in scores], labels) == pytest.approx(base, abs=1e-12)


def test_a10_constant_scores_auc_half():
    assert auc([0.42] * 10, [0, 1] * 5) == 0.5


def _threshold_scan_ap(scores, labels):
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def test_a10_average_precision_exhaustive_small_datasets():
    """Exhaustive rank-pattern enumeration against an independent oracle.

    n <= 5: every ordering-with-ties (score alphabet {1..n}) x every
    labelling with >= 1 positive. n in 6..8: every two-level tie pattern.
    """
    start = time.time()
    checked = 0
    for n in range(1, 9):
        alphabet = range(1, n + 1) if n <= 5 else (1, 2)
        for scores in itertools.product(alphabet, repeat=n):
            for labels in itertools.product((0, 1), repeat=n):
                if sum(labels) == 0:
                    continue
                got = average_precision([float(s) for s in scores], list(labels))
                want = _threshold_scan_ap(scores, labels)
                assert got == pytest.approx(want, abs=1e-12), (scores, labels)
                checked += 1
    assert checked > 100_000
    print(f"\nA10: {checked} enumerated datasets in {time.time() - start:.1f}s")
