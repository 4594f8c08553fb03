"""The four classifier families behind one fit/score/predict contract.

CNN and MLP are trained by minibatch gradient descent (Adam or SGD) on
softmax cross-entropy with dropout active; the L1-regularised logistic
regression and linear SVM are trained full-batch by proximal (sub)gradient
descent with soft-thresholding and a monotone backtracking step rule.

Scores are positive-class (early-PD) probabilities for CNN/MLP/LogReg and
the raw signed margin for the SVM. Trained models serialise to a versioned
JSON container with base64 little-endian float64 parameter blobs (see
docs/file_formats.md).
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor
from .errors import ConfigError, DataFormatError, TrainingError
from .ingest import IMAGE_SHAPE, Label, LabeledSample, SliceImage
from .rng import Xoshiro256pp, derive_seed
from .tensor import LayerParams

CNN = "cnn"
MLP = "mlp"
LOGREG = "logreg"
SVM = "svm"
FAMILIES = (CNN, MLP, LOGREG, SVM)

# class index 1 is the positive (early-PD) class everywhere
CLASS_ORDER = (Label.NORMAL, Label.EARLY_PD)

N_INPUT_FEATURES = IMAGE_SHAPE[0] * IMAGE_SHAPE[1]

MODEL_FORMAT = "striatum-model"
MODEL_VERSION_MAJOR = 1
MODEL_VERSION_MINOR = 0


@dataclass(frozen=True)
class CnnArchitecture:
    """Two conv/pool stages, one hidden dense layer, dropout, 2-way output."""

    conv1_filters: int = 64
    conv1_kernel: int = 5
    conv2_filters: int = 32
    conv2_kernel: int = 3
    dense_units: int = 16
    dropout: float = 0.2


@dataclass(frozen=True)
class MlpArchitecture:
    """One hidden dense layer on the flattened image, dropout, 2-way output."""

    hidden_units: int = 32
    dropout: float = 0.4


@dataclass(frozen=True)
class ModelSpec:
    family: str
    seed: int = 0
    architecture: Optional[object] = None
    reg_c: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.family in (LOGREG, SVM):
            if self.reg_c is None or self.reg_c <= 0:
                raise ConfigError(f"{self.family} needs a positive reg_c, got {self.reg_c}")
        if self.family == CNN and not isinstance(self.architecture, CnnArchitecture):
            raise ConfigError("cnn spec needs a CnnArchitecture")
        if self.family == MLP and not isinstance(self.architecture, MlpArchitecture):
            raise ConfigError("mlp spec needs an MlpArchitecture")


def default_spec(family: str, seed: int = 0) -> ModelSpec:
    """Published defaults per family: CNN/MLP optima, reg_c 1.0 / 0.5."""
    if family == CNN:
        return ModelSpec(CNN, seed=seed, architecture=CnnArchitecture())
    if family == MLP:
        return ModelSpec(MLP, seed=seed, architecture=MlpArchitecture())
    if family == LOGREG:
        return ModelSpec(LOGREG, seed=seed, reg_c=1.0)
    if family == SVM:
        return ModelSpec(SVM, seed=seed, reg_c=0.5)
    raise ConfigError(f"unknown model family {family!r}")


def cnn_spec_from_assignment(assignment: dict, seed: int = 0) -> ModelSpec:
    arch = CnnArchitecture(
        conv1_filters=int(assignment["conv1_filters"]),
        conv1_kernel=int(assignment["conv1_kernel"]),
        conv2_filters=int(assignment["conv2_filters"]),
        conv2_kernel=int(assignment["conv2_kernel"]),
        dense_units=int(assignment["dense_units"]),
        dropout=float(assignment["dropout"]),
    )
    return ModelSpec(CNN, seed=seed, architecture=arch)


def mlp_spec_from_assignment(assignment: dict, seed: int = 0) -> ModelSpec:
    arch = MlpArchitecture(
        hidden_units=int(assignment["hidden_units"]),
        dropout=float(assignment["dropout"]),
    )
    return ModelSpec(MLP, seed=seed, architecture=arch)


@dataclass
class TrainConfig:
    """Training schedule. learning_rate/batch_size drive the CNN/MLP
    optimisers; the linear trainers auto-tune their step by backtracking."""

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be a positive integer")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ConfigError("validation_fraction must be in [0, 0.5]")


@dataclass
class TrainedModel:
    """Learned parameters plus the preprocessing fingerprint they expect."""

    spec: ModelSpec
    preproc_tag: str
    layers: Optional[list[LayerParams]] = None  # cnn/mlp
    weights: Optional[np.ndarray] = None  # logreg/svm
    intercept: float = 0.0
    train_meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# network builders
# ---------------------------------------------------------------------------

def _he_conv(rng: Xoshiro256pp, cout: int, cin: int, k: int) -> LayerParams:
    std = math.sqrt(2.0 / (cin * k * k))
    w = rng.normals(cout * cin * k * k).reshape(cout, cin, k, k) * std
    return tensor.conv2d_layer(w, np.zeros(cout))


def _he_dense(rng: Xoshiro256pp, out_units: int, in_units: int) -> LayerParams:
    std = math.sqrt(2.0 / in_units)
    w = rng.normals(out_units * in_units).reshape(out_units, in_units) * std
    return tensor.dense_layer(w, np.zeros(out_units))


def build_cnn(spec: ModelSpec) -> list[LayerParams]:
    """He-initialised network for *spec*; raises if the shape chain breaks."""
    if spec.family != CNN:
        raise ConfigError(f"build_cnn got a {spec.family} spec")
    arch: CnnArchitecture = spec.architecture
    rng = Xoshiro256pp(spec.seed)
    h, w = IMAGE_SHAPE
    layers = [
        _he_conv(rng, arch.conv1_filters, 1, arch.conv1_kernel),
        tensor.relu_layer(),
        tensor.maxpool2d_layer(),
        _he_conv(rng, arch.conv2_filters, arch.conv1_filters, arch.conv2_kernel),
        tensor.relu_layer(),
        tensor.maxpool2d_layer(),
        tensor.flatten_layer(),
    ]
    h1, w1 = h - arch.conv1_kernel + 1, w - arch.conv1_kernel + 1
    h2, w2 = h1 // 2, w1 // 2
    h3, w3 = h2 - arch.conv2_kernel + 1, w2 - arch.conv2_kernel + 1
    h4, w4 = h3 // 2, w3 // 2
    if min(h1, w1, h3, w3) < 1 or min(h4, w4) < 1:
        raise ConfigError(f"architecture {arch} collapses the {h}x{w} input to nothing")
    flat = h4 * w4 * arch.conv2_filters
    layers += [
        _he_dense(rng, arch.dense_units, flat),
        tensor.relu_layer(),
        tensor.dropout_layer(arch.dropout),
        _he_dense(rng, 2, arch.dense_units),
        tensor.softmax_ce_layer(),
    ]
    tensor.layer_output_shapes(layers, (h, w, 1))  # raises on inconsistency
    return layers


def build_mlp(spec: ModelSpec) -> list[LayerParams]:
    if spec.family != MLP:
        raise ConfigError(f"build_mlp got a {spec.family} spec")
    arch: MlpArchitecture = spec.architecture
    rng = Xoshiro256pp(spec.seed)
    return [
        tensor.flatten_layer(),
        _he_dense(rng, arch.hidden_units, N_INPUT_FEATURES),
        tensor.relu_layer(),
        tensor.dropout_layer(arch.dropout),
        _he_dense(rng, 2, arch.hidden_units),
        tensor.softmax_ce_layer(),
    ]


# ---------------------------------------------------------------------------
# small pieces shared by the linear trainers
# ---------------------------------------------------------------------------

def l1_prox(w, threshold: float):
    """Soft-thresholding: sign(w) * max(|w| - threshold, 0). Elementwise on arrays."""
    if threshold < 0:
        raise ValueError(f"prox threshold must be >= 0, got {threshold}")
    w = np.asarray(w, dtype=np.float64)
    out = np.sign(w) * np.maximum(np.abs(w) - threshold, 0.0)
    return float(out) if out.ndim == 0 else out


def hinge_loss(margin: float) -> tuple[float, float]:
    """Hinge loss max(0, 1 - margin) and its subgradient w.r.t. the margin.

    The margin is y*s for y in {-1,+1}; by the chain rule the subgradient
    w.r.t. the score s is y times the returned value. At margin == 1 the
    subgradient is taken as 0.
    """
    if margin < 1.0:
        return 1.0 - margin, -1.0
    return 0.0, 0.0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _check_samples(samples: Sequence[LabeledSample]) -> str:
    if not samples:
        raise ValueError("cannot fit on an empty dataset")
    tags = {s.image.preproc_tag for s in samples}
    if len(tags) != 1:
        raise ValueError(f"mixed preprocessing tags in training data: {sorted(tags)}")
    labels = {s.label for s in samples}
    if Label.SWEDD in labels:
        raise ValueError("SWEDD samples are hold-out only and cannot be trained on")
    if len(labels) < 2:
        raise ValueError(f"training data contains a single class: {labels}")
    for s in samples:
        px = s.image.pixels
        if px.shape != IMAGE_SHAPE:
            raise ValueError(f"sample {s.image.source_id}: image shape {px.shape} != {IMAGE_SHAPE}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"sample {s.image.source_id}: pixel values outside [0, 1]")
    return tags.pop()


def _design_matrix(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image.pixels.reshape(-1) for s in samples])
    y = np.array([1 if s.label == Label.EARLY_PD else 0 for s in samples])
    return x, y


def _stratified_split(y: np.ndarray, fraction: float, rng: Xoshiro256pp):
    """Per-class shuffled validation split; val may be empty for tiny classes."""
    train_idx, val_idx = [], []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        perm = rng.permutation(len(members))
        n_val = int(len(members) * fraction)
        val_idx.extend(members[perm[:n_val]])
        train_idx.extend(members[perm[n_val:]])
    return np.sort(np.array(train_idx, dtype=int)), np.sort(np.array(val_idx, dtype=int))


class _Adam:
    def __init__(self, lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: list[LayerParams], grads) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, layer in enumerate(params):
            for slot, g in zip(("weights", "bias"), grads[i]):
                if g.size == 0:
                    continue
                key = (i, slot)
                m = self.m.setdefault(key, np.zeros_like(g))
                v = self.v.setdefault(key, np.zeros_like(g))
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                arr = getattr(layer, slot)
                arr -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[LayerParams], grads) -> None:
        for i, layer in enumerate(params):
            for slot, g in zip(("weights", "bias"), grads[i]):
                if g.size == 0:
                    continue
                getattr(layer, slot)[...] -= self.lr * g


def _snapshot(layers: list[LayerParams]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(l.weights.copy(), l.bias.copy()) for l in layers]


def _restore(layers: list[LayerParams], snap) -> None:
    for layer, (w, b) in zip(layers, snap):
        layer.weights[...] = w
        layer.bias[...] = b


def _fit_network(spec: ModelSpec, cfg: TrainConfig, samples, preproc_tag: str) -> TrainedModel:
    layers = build_cnn(spec) if spec.family == CNN else build_mlp(spec)
    x, y = _design_matrix(samples)
    x = x.reshape(-1, *IMAGE_SHAPE, 1)

    rng = Xoshiro256pp(derive_seed(cfg.seed, spec.seed))
    use_early_stop = cfg.early_stop_patience > 0 and cfg.validation_fraction > 0.0
    if use_early_stop:
        train_idx, val_idx = _stratified_split(y, cfg.validation_fraction, rng)
        if len(val_idx) == 0:
            use_early_stop = False
            train_idx = np.arange(len(y))
    else:
        train_idx = np.arange(len(y))
    xt, yt = x[train_idx], y[train_idx]
    if len(np.unique(yt)) < 2:
        raise ValueError("validation split left a single class in the training part")

    opt = _Adam(cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(cfg.learning_rate)
    best_val = math.inf
    best_snap = None
    strikes = 0
    epochs_run = 0
    train_loss = math.nan

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(yt))
        losses = []
        for start in range(0, len(yt), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads, _ = tensor.network_loss(layers, xt[idx], yt[idx], mode="train", rng=rng)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}; "
                    f"try a smaller learning rate than {cfg.learning_rate}"
                )
            losses.append(loss)
            opt.step(layers, grads)
        train_loss = float(np.mean(losses))
        epochs_run = epoch + 1

        if use_early_stop:
            logits, _ = tensor.forward_batch(layers, x[val_idx], mode="infer")
            vl, _ = tensor._softmax_ce_batch(logits, y[val_idx])
            val_loss = float(vl.mean())
            if val_loss < best_val:
                best_val = val_loss
                best_snap = _snapshot(layers)
                strikes = 0
            else:
                strikes += 1
                if strikes >= cfg.early_stop_patience:
                    break

    if best_snap is not None:
        _restore(layers, best_snap)
    meta = {
        "epochs_run": epochs_run,
        "final_train_loss": train_loss,
        "trained_labels": sorted(l.value for l in {s.label for s in samples}),
    }
    return TrainedModel(spec=spec, preproc_tag=preproc_tag, layers=layers, train_meta=meta)


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def _logistic_loss_mean(scores: np.ndarray, y01: np.ndarray) -> float:
    signed = np.where(y01 == 1, scores, -scores)
    return float(np.logaddexp(0.0, -signed).mean())


def _hinge_loss_mean(margins: np.ndarray) -> float:
    return float(np.maximum(0.0, 1.0 - margins).mean())


def _fit_linear(spec: ModelSpec, cfg: TrainConfig, samples, preproc_tag: str) -> TrainedModel:
    x, y01 = _design_matrix(samples)
    n, d = x.shape
    # objective: mean loss + penalty * ||w||_1, penalty = 1 / (reg_c * n);
    # the intercept is never penalised
    penalty = 1.0 / (spec.reg_c * n)
    w = np.zeros(d)
    b = 0.0
    ysvm = np.where(y01 == 1, 1.0, -1.0)

    def objective(w_, b_):
        s = x @ w_ + b_
        if spec.family == LOGREG:
            data = _logistic_loss_mean(s, y01)
        else:
            data = _hinge_loss_mean(ysvm * s)
        return data + penalty * np.abs(w_).sum()

    def gradient(w_, b_):
        s = x @ w_ + b_
        if spec.family == LOGREG:
            p = _sigmoid(s)
            r = (p - y01) / n
        else:
            active = (ysvm * s) < 1.0
            r = -(ysvm * active) / n
        return x.T @ r, float(r.sum())

    step = 1.0
    obj = objective(w, b)
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        gw, gb = gradient(w, b)
        accepted = False
        # monotone backtracking: only steps that do not increase the
        # objective are kept, which covers the nonsmooth hinge case too
        for _ in range(40):
            w_new = l1_prox(w - step * gw, step * penalty)
            b_new = b - step * gb
            obj_new = objective(w_new, b_new)
            if obj_new <= obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improved = obj - obj_new
        w, b, obj = w_new, b_new, obj_new
        epochs_run = epoch + 1
        step *= 1.25
        if improved <= 1e-14 * max(1.0, abs(obj)):
            break
    if not math.isfinite(obj):
        raise TrainingError("linear training produced a non-finite objective")

    meta = {
        "epochs_run": epochs_run,
        "final_train_loss": obj,
        "trained_labels": sorted(l.value for l in {s.label for s in samples}),
    }
    return TrainedModel(spec=spec, preproc_tag=preproc_tag, weights=w, intercept=b, train_meta=meta)


def fit(spec: ModelSpec, cfg: TrainConfig, samples: Sequence[LabeledSample]) -> TrainedModel:
    """Train a model of spec.family on labelled slice images."""
    preproc_tag = _check_samples(samples)
    if spec.family in (CNN, MLP):
        return _fit_network(spec, cfg, samples, preproc_tag)
    return _fit_linear(spec, cfg, samples, preproc_tag)


def linear_objective(model: TrainedModel, samples: Sequence[LabeledSample]) -> float:
    """Regularised mean objective of a linear model on a dataset (for diagnostics)."""
    x, y01 = _design_matrix(samples)
    n = x.shape[0]
    s = x @ model.weights + model.intercept
    if model.spec.family == LOGREG:
        data = _logistic_loss_mean(s, y01)
    else:
        data = _hinge_loss_mean(np.where(y01 == 1, 1.0, -1.0) * s)
    return data + np.abs(model.weights).sum() / (model.spec.reg_c * n)


# ---------------------------------------------------------------------------
# score / predict
# ---------------------------------------------------------------------------

def _check_image(model: TrainedModel, image: SliceImage) -> None:
    if image.preproc_tag != model.preproc_tag:
        raise ValueError(
            f"model expects {model.preproc_tag!r} preprocessing, image carries {image.preproc_tag!r}"
        )
    if image.pixels.shape != IMAGE_SHAPE:
        raise ValueError(f"image shape {image.pixels.shape} != {IMAGE_SHAPE}")


def score(model: TrainedModel, image: SliceImage) -> float:
    """Positive-class probability (CNN/MLP/LogReg) or signed margin (SVM)."""
    _check_image(model, image)
    return float(score_batch(model, image.pixels[None])[0])


def score_batch(model: TrainedModel, pixels: np.ndarray) -> np.ndarray:
    """Scores for a stack of raw (N, H, W) pixel arrays; no tag check."""
    if model.spec.family in (CNN, MLP):
        logits, _ = tensor.forward_batch(
            model.layers, pixels.reshape(-1, *IMAGE_SHAPE, 1), mode="infer"
        )
        return tensor.softmax(logits)[:, 1]
    s = pixels.reshape(len(pixels), -1) @ model.weights + model.intercept
    if model.spec.family == LOGREG:
        return _sigmoid(s)
    return s


def is_margin_score(model: TrainedModel) -> bool:
    return model.spec.family == SVM


def predict(model: TrainedModel, image: SliceImage) -> Label:
    """Thresholded score: probability > 0.5 or margin > 0 means early PD; ties normal."""
    return predict_from_score(model, score(model, image))


def predict_from_score(model: TrainedModel, s: float) -> Label:
    threshold = 0.0 if is_margin_score(model) else 0.5
    return Label.EARLY_PD if s > threshold else Label.NORMAL


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(d["shape"])) if d["shape"] else 1
    if a.size != expected:
        raise DataFormatError(f"parameter blob holds {a.size} values, shape says {expected}")
    return a.reshape(d["shape"])


def _spec_to_dict(spec: ModelSpec) -> dict:
    d = {"family": spec.family, "seed": spec.seed}
    if spec.architecture is not None:
        d["architecture"] = vars(spec.architecture)
    if spec.reg_c is not None:
        d["reg_c"] = spec.reg_c
    return d


def _spec_from_dict(d: dict) -> ModelSpec:
    family = d["family"]
    arch = None
    if "architecture" in d:
        arch = (CnnArchitecture if family == CNN else MlpArchitecture)(**d["architecture"])
    return ModelSpec(family=family, seed=d["seed"], architecture=arch, reg_c=d.get("reg_c"))


def save_model(model: TrainedModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": {"major": MODEL_VERSION_MAJOR, "minor": MODEL_VERSION_MINOR},
        "spec": _spec_to_dict(model.spec),
        "preproc_tag": model.preproc_tag,
        "train_meta": model.train_meta,
    }
    if model.layers is not None:
        doc["layers"] = [
            {
                "kind": l.kind,
                "hyper": l.hyper,
                "weights": _encode_array(l.weights),
                "bias": _encode_array(l.bias),
            }
            for l in model.layers
        ]
    else:
        doc["linear"] = {"weights": _encode_array(model.weights), "intercept": model.intercept}
    with open(path, "w", encoding="ascii") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_model(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataFormatError(f"{path}: not a valid model file ({e})") from e
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"{path}: missing {MODEL_FORMAT!r} format marker")
    version = doc.get("version", {})
    if version.get("major") != MODEL_VERSION_MAJOR:
        raise DataFormatError(
            f"{path}: model format major version {version.get('major')} "
            f"!= supported {MODEL_VERSION_MAJOR}"
        )
    try:
        spec = _spec_from_dict(doc["spec"])
        model = TrainedModel(
            spec=spec,
            preproc_tag=doc["preproc_tag"],
            train_meta=doc.get("train_meta", {}),
        )
        if "layers" in doc:
            model.layers = [
                LayerParams(
                    kind=l["kind"],
                    weights=_decode_array(l["weights"]),
                    bias=_decode_array(l["bias"]),
                    hyper=l["hyper"],
                )
                for l in doc["layers"]
            ]
        else:
            model.weights = _decode_array(doc["linear"]["weights"])
            model.intercept = float(doc["linear"]["intercept"])
    except (KeyError, ValueError, TypeError) as e:
        raise DataFormatError(f"{path}: malformed model container ({e})") from e
    return model
