"""Dense-tensor layer operations with hand-written reverse-mode gradients.

Tensors are float64 numpy arrays in C (row-major) order; a tensor's contract
is its shape plus that flat layout, nothing more. Five layer types are
supported: valid-mode 2-D cross-correlation (stride 1, no padding), 2x2 max
pooling, dense affine maps, ReLU, and inverted dropout, plus a flatten
reshape and a softmax cross-entropy head.

Every forward op has a matching backward that consumes the forward cache,
and :func:`grad_check` verifies any network's analytic gradients against
central finite differences.

The public single-image ops take an (H, W, C) array. Internally everything
runs batched over a leading N axis; the single-image surface wraps the
batched kernels, so there is one code path to get right.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Xoshiro256pp

CONV2D = "conv2d"
MAXPOOL2D = "maxpool2d"
DENSE = "dense"
RELU = "relu"
DROPOUT = "dropout"
FLATTEN = "flatten"
SOFTMAX_CE = "softmax_ce"

_EMPTY = np.zeros(0)


@dataclass
class LayerParams:
    """One layer of a network: kind tag, parameter arrays, hyperparameters.

    ``weights``/``bias`` are empty arrays for parameterless kinds. ``hyper``
    holds kind-specific settings (kernel extents, pool size, dropout rate).
    """

    kind: str
    weights: np.ndarray = field(default_factory=lambda: _EMPTY)
    bias: np.ndarray = field(default_factory=lambda: _EMPTY)
    hyper: dict = field(default_factory=dict)

    def n_params(self) -> int:
        return self.weights.size + self.bias.size


def conv2d_layer(weights: np.ndarray, bias: np.ndarray) -> LayerParams:
    """Conv layer; weights (out_channels, in_channels, kH, kW), bias (out_channels,)."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4:
        raise ValueError(f"conv2d weights must be 4-D, got shape {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(
            f"conv2d bias length {bias.shape} does not match {weights.shape[0]} output channels"
        )
    return LayerParams(CONV2D, weights, bias, {"kh": weights.shape[2], "kw": weights.shape[3]})


def dense_layer(weights: np.ndarray, bias: np.ndarray) -> LayerParams:
    """Dense layer; weights (out_units, in_units), bias (out_units,)."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 2:
        raise ValueError(f"dense weights must be 2-D, got shape {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"dense bias length {bias.shape} does not match {weights.shape[0]} units")
    return LayerParams(DENSE, weights, bias)


def maxpool2d_layer() -> LayerParams:
    return LayerParams(MAXPOOL2D, hyper={"pool": 2, "stride": 2})


def relu_layer() -> LayerParams:
    return LayerParams(RELU)


def dropout_layer(rate: float) -> LayerParams:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return LayerParams(DROPOUT, hyper={"rate": float(rate)})


def flatten_layer() -> LayerParams:
    return LayerParams(FLATTEN)


def softmax_ce_layer() -> LayerParams:
    return LayerParams(SOFTMAX_CE)


# ---------------------------------------------------------------------------
# conv2d: valid cross-correlation, stride 1
# ---------------------------------------------------------------------------

def _conv_patches(x: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """im2col: (N,H,W,C) -> patch matrix (N*OH*OW, C*kh*kw), plus (OH, OW)."""
    n, h, w, c = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (N,OH,OW,C,kh,kw)
    return windows.reshape(n * oh * ow, c * kh * kw), oh, ow


def _conv2d_forward_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    n, h, w, cin = x.shape
    cout, wcin, kh, kw = weights.shape
    if cin != wcin:
        raise ValueError(
            f"conv2d input has {cin} channels but filters expect {wcin}"
        )
    if h < kh or w < kw:
        raise ValueError(
            f"conv2d input {h}x{w} smaller than {kh}x{kw} kernel (valid mode, no padding)"
        )
    patches, oh, ow = _conv_patches(x, kh, kw)
    wmat = weights.reshape(cout, cin * kh * kw)
    out = patches @ wmat.T
    out += bias
    cache = (patches, x.shape, weights, oh, ow)
    return out.reshape(n, oh, ow, cout), cache


def _conv2d_backward_batch(grad_out: np.ndarray, cache, need_grad_input: bool = True):
    patches, x_shape, weights, oh, ow = cache
    n, h, w, cin = x_shape
    cout, _, kh, kw = weights.shape
    if grad_out.shape != (n, oh, ow, cout):
        raise ValueError(
            f"conv2d grad_out shape {grad_out.shape} != forward output {(n, oh, ow, cout)}"
        )
    g = grad_out.reshape(n * oh * ow, cout)
    grad_b = g.sum(axis=0)
    grad_w = (g.T @ patches).reshape(cout, cin, kh, kw)
    if not need_grad_input:
        return None, grad_w, grad_b
    # grad wrt input = full correlation of grad_out with channel-swapped,
    # spatially flipped filters; realised as one more valid correlation on a
    # zero-padded grad_out so the same im2col kernel serves both directions.
    gpad = np.zeros((n, oh + 2 * (kh - 1), ow + 2 * (kw - 1), cout))
    gpad[:, kh - 1 : kh - 1 + oh, kw - 1 : kw - 1 + ow, :] = grad_out
    wt = np.ascontiguousarray(weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gpatches, gh, gw_ = _conv_patches(gpad, kh, kw)
    grad_x = (gpatches @ wt.reshape(cin, cout * kh * kw).T).reshape(n, gh, gw_, cin)
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Valid cross-correlation of one (H, W, Cin) image; output (H-kH+1, W-kW+1, Cout)."""
    x = np.asarray(x, dtype=np.float64)
    out, _ = _conv2d_forward_batch(x[None], params.weights, params.bias)
    return out[0]


def conv2d_backward(grad_out: np.ndarray, cache):
    """Gradients (grad_input, grad_weights, grad_bias) for a single-image forward."""
    grad_x, grad_w, grad_b = _conv2d_backward_batch(np.asarray(grad_out)[None], cache)
    return grad_x[0], grad_w, grad_b


def conv2d_forward_cached(x: np.ndarray, params: LayerParams):
    """Single-image forward that also returns the backward cache."""
    x = np.asarray(x, dtype=np.float64)
    out, cache = _conv2d_forward_batch(x[None], params.weights, params.bias)
    return out[0], cache


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2
# ---------------------------------------------------------------------------

# offsets of the 2x2 window corners in row-major order; first maximal corner
# in this order receives the full gradient (documented tie rule)
_POOL_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_views(x: np.ndarray, oh: int, ow: int):
    return [x[:, di : di + 2 * oh : 2, dj : dj + 2 * ow : 2, :] for di, dj in _POOL_CORNERS]


def _maxpool_forward_batch(x: np.ndarray):
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2d needs at least 2x2 input, got {h}x{w}")
    oh, ow = h // 2, w // 2  # trailing odd row/column dropped
    views = _pool_views(x, oh, ow)
    out = views[0].copy()
    idx = np.zeros((n, oh, ow, c), dtype=np.int8)
    for k in (1, 2, 3):
        better = views[k] > out  # strict: earlier corners win ties
        np.copyto(out, views[k], where=better)
        idx[better] = k
    return out, (idx, x.shape)


def _maxpool_backward_batch(grad_out: np.ndarray, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    oh, ow = h // 2, w // 2
    if grad_out.shape != (n, oh, ow, c):
        raise ValueError(
            f"maxpool2d grad_out shape {grad_out.shape} != forward output {(n, oh, ow, c)}"
        )
    grad_x = np.zeros(x_shape)
    views = _pool_views(grad_x, oh, ow)
    for k in range(4):
        np.copyto(views[k], grad_out, where=(idx == k))
    return grad_x


def maxpool2d_forward(x: np.ndarray):
    """2x2/stride-2 max pool of one (H, W, C) image; returns (output, cache)."""
    out, cache = _maxpool_forward_batch(np.asarray(x, dtype=np.float64)[None])
    return out[0], cache


def maxpool2d_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    return _maxpool_backward_batch(np.asarray(grad_out)[None], cache)[0]


# ---------------------------------------------------------------------------
# dense, relu, dropout, flatten
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Affine map W @ x + b of a length-n vector."""
    x = np.asarray(x, dtype=np.float64)
    m, n = params.weights.shape
    if x.shape != (n,):
        raise ValueError(f"dense expects input of length {n}, got shape {x.shape}")
    return params.weights @ x + params.bias


def dense_backward(grad_out: np.ndarray, x: np.ndarray, params: LayerParams):
    """Gradients (grad_input, grad_weights, grad_bias) of the affine map."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (params.weights.shape[0],):
        raise ValueError(
            f"dense grad_out shape {grad_out.shape} != output length {params.weights.shape[0]}"
        )
    return params.weights.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Backward of ReLU; the derivative at exactly 0 is taken as 0."""
    return np.asarray(grad_out) * (np.asarray(x) > 0)


def dropout(
    x: np.ndarray, rate: float, mode: str, rng: Optional[Xoshiro256pp] = None
) -> np.ndarray:
    """Inverted dropout: train mode scales survivors by 1/(1-rate); infer is identity."""
    out, _ = _dropout_with_mask(np.asarray(x, dtype=np.float64), rate, mode, rng)
    return out


def _dropout_with_mask(x, rate, mode, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x.copy(), None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.uniforms(x.size) >= rate).reshape(x.shape)
    return x * keep / (1.0 - rate), keep


# ---------------------------------------------------------------------------
# softmax cross-entropy head
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against a class index.

    Returns ``(loss, grad_logits)`` where ``grad = softmax(logits) - one_hot``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if logits.ndim != 1:
        raise ValueError(f"softmax_ce expects a logit vector, got shape {logits.shape}")
    if not 0 <= label < k:
        raise ValueError(f"label {label} out of range for {k} classes")
    shifted = logits - logits.max()
    logsumexp = np.log(np.exp(shifted).sum())
    loss = float(logsumexp - shifted[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def _softmax_ce_batch(logits: np.ndarray, labels: np.ndarray):
    """Per-sample losses (N,) and unscaled grads (N, k) for batched logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    losses = logsumexp - shifted[np.arange(n), labels]
    grads = softmax(logits)
    grads[np.arange(n), labels] -= 1.0
    return losses, grads


# ---------------------------------------------------------------------------
# whole-network forward/backward over a LayerParams list
# ---------------------------------------------------------------------------

def _require_softmax_tail(layers: list[LayerParams]) -> None:
    if not layers or layers[-1].kind != SOFTMAX_CE:
        raise ValueError("network must end in a softmax_ce layer")


def forward_batch(
    layers: list[LayerParams],
    x: np.ndarray,
    mode: str = "infer",
    rng: Optional[Xoshiro256pp] = None,
) -> tuple[np.ndarray, list]:
    """Run a batch (N, ...) through all layers before the loss head.

    Returns the logits (N, k) and per-layer caches for :func:`backward_batch`.
    """
    _require_softmax_tail(layers)
    h = np.asarray(x, dtype=np.float64)
    caches = []
    for layer in layers[:-1]:
        if layer.kind == CONV2D:
            h, cache = _conv2d_forward_batch(h, layer.weights, layer.bias)
            caches.append(cache)
        elif layer.kind == MAXPOOL2D:
            h, cache = _maxpool_forward_batch(h)
            caches.append(cache)
        elif layer.kind == DENSE:
            caches.append(h)
            h = h @ layer.weights.T + layer.bias
        elif layer.kind == RELU:
            caches.append(h)
            h = np.maximum(h, 0.0)
        elif layer.kind == DROPOUT:
            h, keep = _dropout_with_mask(h, layer.hyper["rate"], mode, rng)
            caches.append(keep)
        elif layer.kind == FLATTEN:
            caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return h, caches


def backward_batch(
    layers: list[LayerParams], caches: list, grad_logits: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate logit gradients; returns (grad_weights, grad_bias) per layer."""
    _require_softmax_tail(layers)
    grads: list[tuple[np.ndarray, np.ndarray]] = [(_EMPTY, _EMPTY)] * len(layers)
    g = grad_logits
    for i in range(len(layers) - 2, -1, -1):
        layer, cache = layers[i], caches[i]
        if layer.kind == CONV2D:
            # the input gradient of the very first layer feeds nothing; for a
            # wide first conv it is by far the most expensive array in the net
            g, gw, gb = _conv2d_backward_batch(g, cache, need_grad_input=i > 0)
            grads[i] = (gw, gb)
        elif layer.kind == MAXPOOL2D:
            g = _maxpool_backward_batch(g, cache)
        elif layer.kind == DENSE:
            x = cache
            grads[i] = (g.T @ x, g.sum(axis=0))
            g = g @ layer.weights
        elif layer.kind == RELU:
            g = g * (cache > 0)
        elif layer.kind == DROPOUT:
            keep = cache
            if keep is not None:
                g = g * keep / (1.0 - layer.hyper["rate"])
        elif layer.kind == FLATTEN:
            g = g.reshape(cache)
    return grads


def network_loss(
    layers: list[LayerParams],
    x: np.ndarray,
    labels: np.ndarray,
    mode: str = "infer",
    rng: Optional[Xoshiro256pp] = None,
):
    """Mean loss, per-layer parameter grads of the mean, and logits for a batch."""
    logits, caches = forward_batch(layers, x, mode, rng)
    labels = np.asarray(labels)
    losses, grad_logits = _softmax_ce_batch(logits, labels)
    n = x.shape[0]
    grads = backward_batch(layers, caches, grad_logits / n)
    return float(losses.mean()), grads, logits


def layer_output_shapes(
    layers: list[LayerParams], input_shape: tuple[int, ...]
) -> list[tuple[int, ...]]:
    """Shape after each layer (loss head excluded) for a single-sample input."""
    _require_softmax_tail(layers)
    shape = tuple(input_shape)
    out = []
    for layer in layers[:-1]:
        if layer.kind == CONV2D:
            h, w, _ = shape
            cout, cin, kh, kw = layer.weights.shape
            if shape[2] != cin:
                raise ValueError(f"channel mismatch at conv layer: {shape[2]} vs {cin}")
            if h < kh or w < kw:
                raise ValueError(f"conv kernel {kh}x{kw} larger than input {h}x{w}")
            shape = (h - kh + 1, w - kw + 1, cout)
        elif layer.kind == MAXPOOL2D:
            h, w, c = shape
            if h < 2 or w < 2:
                raise ValueError(f"maxpool input {h}x{w} too small")
            shape = (h // 2, w // 2, c)
        elif layer.kind == DENSE:
            m, n = layer.weights.shape
            if shape != (n,):
                raise ValueError(f"dense expects ({n},), got {shape}")
            shape = (m,)
        elif layer.kind == FLATTEN:
            shape = (int(np.prod(shape)),)
        out.append(shape)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    """Worst relative disagreement between analytic and numeric gradients."""

    max_rel_error: float
    worst_index: int
    n_checked: int


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _forward_frozen(layers: list[LayerParams], x: np.ndarray, patterns: list) -> np.ndarray:
    """Forward pass with ReLU masks and pool argmax pinned to ``patterns``.

    Evaluates the smooth piece of the piecewise-linear network selected at
    the base point, which is exactly the function whose derivative backprop
    computes; finite differences of it stay valid across kink boundaries.
    """
    h = x
    for layer, pattern in zip(layers[:-1], patterns):
        if layer.kind == CONV2D:
            h, _ = _conv2d_forward_batch(h, layer.weights, layer.bias)
        elif layer.kind == MAXPOOL2D:
            idx, in_shape = pattern
            n, hgt, wid, c = in_shape
            oh, ow = hgt // 2, wid // 2
            views = _pool_views(h, oh, ow)
            out = views[0].copy()
            for k in (1, 2, 3):
                np.copyto(out, views[k], where=(idx == k))
            h = out
        elif layer.kind == DENSE:
            h = h @ layer.weights.T + layer.bias
        elif layer.kind == RELU:
            h = h * (pattern > 0)
        elif layer.kind == DROPOUT:
            pass  # infer mode: identity
        elif layer.kind == FLATTEN:
            h = h.reshape(h.shape[0], -1)
    return h


def grad_check(
    layers: list[LayerParams],
    x: np.ndarray,
    label: int,
    eps: float = 1e-3,
    sample: Optional[int] = None,
    rng: Optional[Xoshiro256pp] = None,
    freeze_pattern: bool = True,
) -> GradCheckResult:
    """Compare analytic parameter gradients against central finite differences.

    Every parameter (or a random subsample of ``sample`` of them) is perturbed
    by +/- ``eps``; relative error uses denominator max(|a|, |b|, 1e-8). The
    network is evaluated in infer mode so the map being differentiated is
    deterministic. ``worst_index`` is the flat index into the concatenation of
    each layer's [weights, bias] in layer order.

    With ``freeze_pattern`` (default) the perturbed evaluations reuse the base
    point's ReLU sign pattern and pool argmax choices, so the differences
    probe the smooth piece backprop differentiates instead of being polluted
    when a wide layer's perturbation sweeps some activation across its kink.
    Disable it for fully independent differencing on smooth regions.
    """
    _require_softmax_tail(layers)
    x = np.asarray(x, dtype=np.float64)
    xb = x[None]
    yb = np.array([label])

    logits, caches = forward_batch(layers, xb, mode="infer")
    _, grad_logits = _softmax_ce_batch(logits, yb)
    grads = backward_batch(layers, caches, grad_logits)

    patterns = []
    for layer, cache in zip(layers[:-1], caches):
        if layer.kind == RELU:
            patterns.append(cache > 0)
        elif layer.kind == MAXPOOL2D:
            patterns.append(cache)
        else:
            patterns.append(None)

    if freeze_pattern:

        def loss_at() -> float:
            frozen_logits = _forward_frozen(layers, xb, patterns)
            frozen_losses, _ = _softmax_ce_batch(frozen_logits, yb)
            return float(frozen_losses[0])

    else:

        def loss_at() -> float:
            free_logits, _ = forward_batch(layers, xb, mode="infer")
            free_losses, _ = _softmax_ce_batch(free_logits, yb)
            return float(free_losses[0])

    # flat index map: (layer, array, local index) in declaration order
    slots = []
    for li, layer in enumerate(layers):
        for name, arr in (("weights", layer.weights), ("bias", layer.bias)):
            for j in range(arr.size):
                slots.append((li, name, j))
    if not slots:
        return GradCheckResult(0.0, -1, 0)

    if sample is not None and sample < len(slots):
        if rng is None:
            rng = Xoshiro256pp(0)
        picked: set[int] = set()
        while len(picked) < sample:
            picked.add(rng.randint(len(slots)))
        chosen = sorted(picked)
    else:
        chosen = list(range(len(slots)))

    max_err, worst = 0.0, -1
    for flat_idx in chosen:
        li, name, j = slots[flat_idx]
        arr = getattr(layers[li], name)
        flat = arr.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = loss_at()
        flat[j] = orig - eps
        f_minus = loss_at()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grads[li][0 if name == "weights" else 1].reshape(-1)[j]
        err = _rel_error(analytic, numeric)
        if err > max_err:
            max_err = err
            worst = flat_idx
    return GradCheckResult(max_err, worst, len(chosen))
