"""Differentiable classifiers with hand-rolled reverse-mode gradients.

Four architecture kinds cover the toolkit's needs, from linear probes to
a tiny per-pixel predictor:

* ``softmax_linear`` -- flatten, single dense layer to class logits.
* ``mlp``            -- flatten, dense+rectifier hidden layers, dense head.
* ``conv``           -- 3x3 same-padding conv stages (rectifier, optional
                        2x2 average pool), global average pool, dense head.
* ``dense_predictor``-- 3x3 conv encoder plus a 1x1 classifier head that
                        emits logits for every pixel.

Gradients of the mean thresholded cross-entropy are computed with respect
to both the input batch and every parameter, in the dtype of the inputs
(float32 for experiments, float64 for finite-difference verification).
The rectifier subgradient at 0 is 0, and decisions sitting on the loss
threshold plateau contribute zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .tensor import NonFiniteError, ShapeMismatch, require_finite

ARCH_KINDS = ("softmax_linear", "mlp", "conv", "dense_predictor")

# Cross-entropy cap that stops the adversary from pushing the correct-class
# probability below 0.2.
DEFAULT_KAPPA = -math.log(0.2)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameters live separately in a Params dict.

    ``hidden`` holds dense widths for ``mlp`` and channel widths for the
    conv kinds. ``pool`` marks which conv stages are followed by a 2x2
    average pool (``conv`` only).
    """

    kind: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = ()
    pool: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture kind: {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(w <= 0 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.kind in ("conv", "dense_predictor"):
            if len(self.input_shape) != 3:
                raise ValueError(f"{self.kind} needs [H, W, C] inputs, got {self.input_shape}")
            if not self.hidden:
                raise ValueError(f"{self.kind} needs at least one channel width")
        if self.kind == "conv":
            pool = self.pool or (False,) * len(self.hidden)
            if len(pool) != len(self.hidden):
                raise ValueError("pool plan length must match channel widths")
            object.__setattr__(self, "pool", tuple(pool))
            h, w = self.input_shape[0], self.input_shape[1]
            for p in pool:
                if p:
                    if h % 2 or w % 2:
                        raise ValueError("pool plan does not divide the spatial extent")
                    h, w = h // 2, w // 2
        elif self.pool:
            raise ValueError("pool plan only applies to the conv kind")

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def logits_shape(self, batch: int) -> tuple[int, ...]:
        if self.kind == "dense_predictor":
            h, w, _ = self.input_shape
            return (batch, h, w, self.num_classes)
        return (batch, self.num_classes)


@dataclass(frozen=True)
class LossConfig:
    """Loss options: label-smoothing coefficient and the threshold kappa.

    ``kappa=None`` disables thresholding (used for targeted attacks).
    """

    smoothing: float = 0.1
    kappa: float | None = DEFAULT_KAPPA

    def __post_init__(self):
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing coefficient must be in [0, 1)")
        if self.kappa is not None and self.kappa <= 0:
            raise ValueError("kappa must be positive when present")


@dataclass
class GradientBundle:
    """Gradients of the mean thresholded loss plus the per-decision losses."""

    dx: np.ndarray
    dparams: Params
    losses: np.ndarray
    mean_loss: float


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter name -> shape map for an architecture."""
    c = spec.num_classes
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "softmax_linear":
        shapes["w"] = (spec.flat_dim, c)
        shapes["b"] = (c,)
    elif spec.kind == "mlp":
        dims = (spec.flat_dim,) + spec.hidden + (c,)
        for i in range(len(dims) - 1):
            shapes[f"w{i}"] = (dims[i], dims[i + 1])
            shapes[f"b{i}"] = (dims[i + 1],)
    else:
        cin = spec.input_shape[2]
        for i, cout in enumerate(spec.hidden):
            shapes[f"conv{i}_w"] = (3, 3, cin, cout)
            shapes[f"conv{i}_b"] = (cout,)
            cin = cout
        shapes["head_w"] = (cin, c)
        shapes["head_b"] = (c,)
    return shapes


def init_params(spec: ModelSpec, rng: RngStream, dtype=np.float32) -> Params:
    """Fan-in-scaled uniform weight init, zero biases; deterministic per stream."""
    params: Params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith("_b") or name.startswith("b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(shape, -bound, bound, dtype=dtype)
    return params


def param_count(params: Params) -> int:
    return sum(int(p.size) for p in params.values())


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


def _check_params(spec: ModelSpec, params: Params):
    expected = param_shapes(spec)
    if list(params.keys()) != list(expected.keys()):
        raise ShapeMismatch(f"parameter names {list(params)} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        require_finite(params[name], f"parameter {name}")


# ---------------------------------------------------------------------------
# layer primitives (forward returns what backward needs, nothing more)

def _conv3x3_fwd(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((d, h, w, k.shape[3]), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            out += xp[:, di:di + h, dj:dj + w, :] @ k[di, dj]
    return out + b, xp


def _conv3x3_bwd(g: np.ndarray, xp: np.ndarray, k: np.ndarray):
    d, h, w, _ = g.shape
    gk = np.zeros_like(k)
    gxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            win = xp[:, di:di + h, dj:dj + w, :]
            gk[di, dj] = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))
            gxp[:, di:di + h, dj:dj + w, :] += g @ k[di, dj].T
    gb = g.sum(axis=(0, 1, 2))
    return gxp[:, 1:1 + h, 1:1 + w, :], gk, gb


def _avgpool2_fwd(x: np.ndarray) -> np.ndarray:
    d, h, w, c = x.shape
    return x.reshape(d, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _avgpool2_bwd(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / g.dtype.type(4)


def _forward_cached(spec: ModelSpec, params: Params, x: np.ndarray):
    """Run the network, keeping pre-activations for the backward pass."""
    d = x.shape[0]
    cache: dict = {"x": x}
    if spec.kind in ("softmax_linear", "mlp"):
        flat = x.reshape(d, -1)
        n_layers = 1 if spec.kind == "softmax_linear" else len(spec.hidden) + 1
        acts = [flat]
        pre = []
        h = flat
        for i in range(n_layers):
            w = params["w" if spec.kind == "softmax_linear" else f"w{i}"]
            b = params["b" if spec.kind == "softmax_linear" else f"b{i}"]
            z = h @ w + b
            pre.append(z)
            if i < n_layers - 1:
                h = np.maximum(z, 0)
                acts.append(h)
        cache.update(acts=acts, pre=pre)
        logits = pre[-1]
    else:
        feats = [x]
        pads = []
        pooled_from = []
        h = x
        for i in range(len(spec.hidden)):
            z, xp = _conv3x3_fwd(h, params[f"conv{i}_w"], params[f"conv{i}_b"])
            pads.append(xp)
            a = np.maximum(z, 0)
            feats.append(z)
            if spec.kind == "conv" and spec.pool[i]:
                pooled_from.append(a.shape)
                a = _avgpool2_fwd(a)
            else:
                pooled_from.append(None)
            feats.append(a)
            h = a
        cache.update(pads=pads, feats=feats, pooled_from=pooled_from)
        if spec.kind == "conv":
            gap = h.mean(axis=(1, 2))
            cache["gap_in_shape"] = h.shape
            cache["gap"] = gap
            logits = gap @ params["head_w"] + params["head_b"]
        else:
            cache["head_in"] = h
            logits = h @ params["head_w"] + params["head_b"]
    return logits, cache


def forward(spec: ModelSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Per-decision logits: [d, C] for classification, [d, H, W, C] dense."""
    _check_params(spec, params)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ShapeMismatch(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    require_finite(x, "input batch")
    logits, _ = _forward_cached(spec, params, x)
    require_finite(logits, "logits")
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def smooth_labels(y: np.ndarray, num_classes: int, coeff: float, dtype=np.float32) -> np.ndarray:
    """Soft targets: (1 - coeff) on the true class plus coeff/C everywhere."""
    if not 0.0 <= coeff < 1.0:
        raise ValueError("smoothing coefficient must be in [0, 1)")
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError("labels out of range")
    scalar = np.dtype(dtype).type
    eye = np.eye(num_classes, dtype=dtype)
    return eye[y] * scalar(1.0 - coeff) + scalar(coeff / num_classes)


def cross_entropy(logits: np.ndarray, soft_targets: np.ndarray) -> np.ndarray:
    """Per-decision cross-entropy with max-subtraction stabilization."""
    if logits.shape != soft_targets.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {soft_targets.shape}")
    sums = soft_targets.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("target rows must sum to 1")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return lse - (soft_targets * z).sum(axis=-1)


def adv_loss(losses: np.ndarray, kappa: float | None) -> np.ndarray:
    """Per-decision thresholded loss min(L, kappa); identity when kappa is None."""
    if kappa is None:
        return losses
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return np.minimum(losses, losses.dtype.type(kappa))


def backward(spec: ModelSpec, params: Params, x: np.ndarray, soft_targets: np.ndarray,
             loss_cfg: LossConfig) -> GradientBundle:
    """Gradients of mean-over-decisions thresholded cross-entropy wrt x and params."""
    _check_params(spec, params)
    require_finite(x, "input batch")
    logits, cache = _forward_cached(spec, params, x)
    require_finite(logits, "logits")

    raw = cross_entropy(logits, soft_targets)
    losses = adv_loss(raw, loss_cfg.kappa)
    n_dec = losses.size
    mean_loss = float(losses.mean())

    # d(mean adv loss)/dlogits; decisions on the kappa plateau get zero.
    dlogits = (softmax(logits) - soft_targets) / x.dtype.type(n_dec)
    if loss_cfg.kappa is not None:
        mask = (raw < loss_cfg.kappa).astype(x.dtype)
        dlogits = dlogits * mask[..., None]

    dparams: Params = {}
    d = x.shape[0]
    if spec.kind in ("softmax_linear", "mlp"):
        n_layers = 1 if spec.kind == "softmax_linear" else len(spec.hidden) + 1
        g = dlogits
        for i in reversed(range(n_layers)):
            wname = "w" if spec.kind == "softmax_linear" else f"w{i}"
            bname = "b" if spec.kind == "softmax_linear" else f"b{i}"
            h_in = cache["acts"][i]
            dparams[wname] = h_in.T @ g
            dparams[bname] = g.sum(axis=0)
            g = g @ params[wname].T
            if i > 0:
                g = g * (cache["pre"][i - 1] > 0)
        dx = g.reshape(x.shape)
    else:
        if spec.kind == "conv":
            g_gap = dlogits @ params["head_w"].T
            dparams["head_w"] = cache["gap"].T @ dlogits
            dparams["head_b"] = dlogits.sum(axis=0)
            _, fh, fw, _ = cache["gap_in_shape"]
            g = np.broadcast_to(g_gap[:, None, None, :], cache["gap_in_shape"]).copy()
            g /= x.dtype.type(fh * fw)
        else:
            h_in = cache["head_in"]
            dparams["head_w"] = np.tensordot(h_in, dlogits, axes=([0, 1, 2], [0, 1, 2]))
            dparams["head_b"] = dlogits.sum(axis=(0, 1, 2))
            g = dlogits @ params["head_w"].T
        for i in reversed(range(len(spec.hidden))):
            if spec.kind == "conv" and cache["pooled_from"][i] is not None:
                g = _avgpool2_bwd(g)
            g = g * (cache["feats"][2 * i + 1] > 0)
            g, gk, gb = _conv3x3_bwd(g, cache["pads"][i], params[f"conv{i}_w"])
            dparams[f"conv{i}_w"] = gk
            dparams[f"conv{i}_b"] = gb
        dx = g

    dparams = {name: dparams[name] for name in params}
    for name, grad in dparams.items():
        require_finite(grad, f"gradient of {name}")
    require_finite(dx, "input gradient")
    return GradientBundle(dx=dx, dparams=dparams, losses=losses, mean_loss=mean_loss)


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax class per decision, ties broken toward the lowest index."""
    return logits.argmax(axis=-1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of decisions whose argmax matches the label."""
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    return float((predict(logits) == labels).mean())


def pixel_accuracy(pred_map: np.ndarray, target_map: np.ndarray) -> float:
    """Mean per-pixel agreement between two label maps."""
    pred_map = np.asarray(pred_map)
    target_map = np.asarray(target_map)
    if pred_map.shape != target_map.shape:
        raise ShapeMismatch(f"maps differ: {pred_map.shape} vs {target_map.shape}")
    return float((pred_map == target_map).mean())


def mean_iou(pred_map: np.ndarray, target_map: np.ndarray, num_classes: int) -> float:
    """Class-wise intersection-over-union averaged over classes present."""
    ious = []
    for c in range(num_classes):
        p = pred_map == c
        t = target_map == c
        union = np.logical_or(p, t).sum()
        if union:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 1.0
