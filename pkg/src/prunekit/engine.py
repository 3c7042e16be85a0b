"""Forward/backward passes over a :class:`NetworkIR` and a small SGD trainer.

All arithmetic runs in float64; activations handed between layers are stored
in ``dtype`` (float32 unless a caller asks otherwise, e.g. for gradient checks).
Max-type ties (MaxPool, MFM) route the gradient to the first candidate in scan
order.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netir import NetworkIR, require_valid

log = logging.getLogger(__name__)

LOSSES = ("mse", "xent")


class LossMismatchError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError(f"images must be n×C×H×W with n ≥ 1, got {self.images.shape}")

    def __len__(self):
        return len(self.images)


def _images(batch) -> np.ndarray:
    return batch.images if isinstance(batch, Batch) else np.asarray(batch)


def _check_input(net: NetworkIR, x: np.ndarray) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != net.input_shape or len(x) < 1:
        raise ValueError(f"batch shape {x.shape} does not match network input {net.input_shape}")


# --------------------------------------------------------------------------
# per-kind kernels
# --------------------------------------------------------------------------

def _windows(xp, k, s):
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def conv2d(x, w, b, stride, padding):
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, w.shape[2], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(dout, x, w, stride, padding):
    p, k, s = padding, w.shape[2], stride
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = _windows(xp, k, s)
    ho, wo = dout.shape[2:]
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros(xp.shape)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return dx, dw, db


def maxpool2d(x, window, stride, padding):
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
    win = _windows(xp, window, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(dout, arg, x_shape, window, stride, padding):
    p, s = padding, stride
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    ho, wo = dout.shape[2:]
    for idx in range(window * window):
        i, j = divmod(idx, window)
        dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dout * (arg == idx)
    return dxp[:, :, p:p + h, p:p + w]


def mfm(x):
    o = x.shape[1] // 2
    first = x[:, :o] >= x[:, o:]
    return np.where(first, x[:, :o], x[:, o:]), first


def mfm_backward(dout, first):
    return np.concatenate([dout * first, dout * ~first], axis=1)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _param(params, name):
    a = params.get(name)
    return None if a is None else np.asarray(a, dtype=np.float64)


def _run(net, x, params, masks, dtype, keep_cache, stop_at=None):
    outs, caches = [], []
    h = np.asarray(x, dtype=dtype)
    for spec in net.layers:
        hin = h.astype(np.float64)
        cache = None
        if spec.kind == "Conv2D":
            y = conv2d(hin, _param(params, f"{spec.id}.weight"), _param(params, f"{spec.id}.bias"),
                       spec.stride, spec.padding)
            cache = hin
        elif spec.kind == "ReLU":
            y = np.maximum(hin, 0.0)
            cache = hin > 0
        elif spec.kind == "MaxPool2D":
            y, arg = maxpool2d(hin, spec.window, spec.stride, spec.padding)
            cache = (arg, hin.shape)
        elif spec.kind == "MFM":
            y, cache = mfm(hin)
        elif spec.kind == "GAP":
            y = hin.mean(axis=(2, 3))
            cache = hin.shape
        elif spec.kind == "Linear":
            y = hin @ _param(params, f"{spec.id}.weight").T
            b = _param(params, f"{spec.id}.bias")
            if b is not None:
                y = y + b
            cache = hin
        else:  # pragma: no cover - validate() rejects unknown kinds
            raise ValueError(spec.kind)
        if masks and spec.id in masks:
            keep = np.asarray(masks[spec.id], dtype=bool)
            shape = (1, -1) + (1,) * (y.ndim - 2)
            y = y * keep.reshape(shape)
        h = y.astype(dtype)
        outs.append(h)
        caches.append(cache if keep_cache else None)
        if stop_at is not None and spec.id == stop_at:
            break
    return outs, caches


def forward(net: NetworkIR, batch, capture: Iterable[str] = (), *,
            params: Mapping[str, np.ndarray] | None = None,
            masks: Mapping[str, np.ndarray] | None = None,
            dtype=np.float32, stop_at: str | None = None):
    """Run ``net`` on a batch; returns ``(outputs, trace)``.

    ``trace`` maps each requested layer id to that layer's output.  ``masks``
    multiplies the named layers' outputs by a per-channel 0/1 vector, which is
    how the pruning tests build their zeroed-channel reference.  ``stop_at``
    ends the pass after the given layer.
    """
    require_valid(net)
    x = _images(batch)
    _check_input(net, x)
    capture = set(capture)
    missing = capture - set(net.ids)
    if missing:
        raise KeyError(f"cannot capture unknown layers {sorted(missing)}")
    outs, _ = _run(net, x, params if params is not None else net.params, masks, dtype, False, stop_at)
    ids = net.ids[:len(outs)]
    trace = {lid: o for lid, o in zip(ids, outs) if lid in capture}
    return outs[-1], trace


def predict(net: NetworkIR, images, chunk: int = 256, **kw) -> np.ndarray:
    """Forward in fixed-size chunks, concatenated in input order."""
    images = np.asarray(images)
    parts = [forward(net, images[i:i + chunk], **kw)[0] for i in range(0, len(images), chunk)]
    return np.concatenate(parts, axis=0)


def _loss(out, labels, loss_kind):
    n = out.shape[0]
    if loss_kind == "mse":
        y = np.asarray(labels, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape != out.shape:
            raise LossMismatchError(f"MSE labels {y.shape} do not match outputs {out.shape}")
        diff = out - y
        return float((diff ** 2).sum() / n), 2.0 * diff / n
    if loss_kind == "xent":
        y = np.asarray(labels)
        if out.ndim != 2 or out.shape[1] < 2:
            raise LossMismatchError("cross-entropy needs a 2-D output with ≥ 2 classes")
        if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= out.shape[1]:
            raise LossMismatchError("cross-entropy needs integer class labels in range")
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(n), y].mean()
        g = np.exp(logp)
        g[np.arange(n), y] -= 1.0
        return float(loss), g / n
    raise LossMismatchError(f"unknown loss {loss_kind!r}")


def loss_value(net, images, labels, loss_kind, params=None, dtype=np.float32):
    out, _ = forward(net, images, params=params, dtype=dtype)
    return _loss(out.astype(np.float64), labels, loss_kind)[0]


def backward(net: NetworkIR, batch, loss_kind: str, labels=None, *,
             params: Mapping[str, np.ndarray] | None = None, dtype=np.float32, lowest: int = 0):
    """Loss and gradients for every parameter, shaped like the parameters (float64).

    ``lowest`` stops backpropagation at that layer index; layers below it get
    no gradients (used when they are frozen).
    """
    require_valid(net)
    x = _images(batch)
    if labels is None:
        labels = batch.labels
    _check_input(net, x)
    params = params if params is not None else net.params
    outs, caches = _run(net, x, params, None, dtype, True)
    loss, g = _loss(outs[-1].astype(np.float64), labels, loss_kind)
    grads = {}
    for i in range(len(net.layers) - 1, lowest - 1, -1):
        spec, cache = net.layers[i], caches[i]
        if spec.kind == "Conv2D":
            g, dw, db = conv2d_backward(g, cache, _param(params, f"{spec.id}.weight"),
                                        spec.stride, spec.padding)
            grads[f"{spec.id}.weight"] = dw
            if spec.has_bias:
                grads[f"{spec.id}.bias"] = db
        elif spec.kind == "ReLU":
            g = g * cache
        elif spec.kind == "MaxPool2D":
            arg, shape = cache
            g = maxpool2d_backward(g, arg, shape, spec.window, spec.stride, spec.padding)
        elif spec.kind == "MFM":
            g = mfm_backward(g, cache)
        elif spec.kind == "GAP":
            n, c, h, w = cache
            g = np.broadcast_to(g[:, :, None, None] / (h * w), cache).copy()
        elif spec.kind == "Linear":
            grads[f"{spec.id}.weight"] = g.T @ cache
            if spec.has_bias:
                grads[f"{spec.id}.bias"] = g.sum(axis=0)
            g = g @ _param(params, f"{spec.id}.weight")
    return loss, grads


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    frozen: frozenset = field(default_factory=frozenset)
    loss: str = "xent"
    keep_best: bool = False
    target_metric: float | None = None
    optimizer: str = "sgd"
    beta2: float = 0.999
    eps: float = 1e-8


def _metric(out, labels, loss_kind):
    if loss_kind == "xent":
        return float((out.argmax(axis=1) == np.asarray(labels)).mean())
    y = np.asarray(labels, dtype=np.float64).reshape(out.shape)
    return float(np.sqrt(((out - y) ** 2).mean()))


def evaluate(net, images, labels, loss_kind, chunk=256):
    """(loss, metric) over a dataset; metric is accuracy for xent, RMSE for mse."""
    out = predict(net, images, chunk=chunk).astype(np.float64)
    return _loss(out, labels, loss_kind)[0], _metric(out, labels, loss_kind)


def train_sgd(net: NetworkIR, images, labels, config: TrainConfig, val=None):
    """Minibatch training.  Returns ``(trained_net, history)``.

    ``config.optimizer`` is "sgd" (heavy-ball momentum) or "adam" (``momentum``
    acts as β1, with bias correction).

    ``history`` rows are dicts with keys epoch, split, loss, metric; epoch 0 is
    the untrained network.  Layers in ``config.frozen`` keep their parameters
    bit-for-bit.  With ``keep_best`` and a ``val=(images, labels)`` pair the
    returned network is the epoch with the lowest validation loss (epoch 0
    included).  ``target_metric`` stops early once the training metric reaches
    it (accuracy ≥ target for xent, RMSE ≤ target for mse); the validation
    metric is used instead when ``val`` is given.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if config.loss not in LOSSES:
        raise LossMismatchError(f"unknown loss {config.loss!r}")
    if config.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {config.optimizer!r}")
    unknown = set(config.frozen) - set(net.ids)
    if unknown:
        raise KeyError(f"frozen set names unknown layers {sorted(unknown)}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(config.seed)
    frozen = {k for k in net.params if k.rsplit(".", 1)[0] in config.frozen}
    work = {k: np.array(v, dtype=np.float64) for k, v in net.params.items()}
    vel = {k: np.zeros_like(v) for k, v in work.items() if k not in frozen}
    sq = {k: np.zeros_like(v) for k in vel for v in [work[k]]}
    step = 0
    history = []
    trainable = [i for i, s in enumerate(net.layers) if s.id not in config.frozen
                 and any(k.rsplit(".", 1)[0] == s.id for k in net.params)]
    lowest = min(trainable, default=len(net.layers))

    def snapshot():
        return net.evolve(params={k: (net.params[k] if k in frozen else v) for k, v in work.items()})

    def record(epoch, cur):
        tl, tm = evaluate(cur, images, labels, config.loss)
        if not math.isfinite(tl):
            raise NumericalError(f"non-finite training loss at epoch {epoch}")
        history.append({"epoch": epoch, "split": "train", "loss": tl, "metric": tm})
        if val is not None:
            vl, vm = evaluate(cur, val[0], val[1], config.loss)
            history.append({"epoch": epoch, "split": "val", "loss": vl, "metric": vm})
            return tl, vm, vl
        return tl, tm, tl

    cur = snapshot()
    _, tm, best_loss = record(0, cur)
    best = cur
    n = len(images)
    for epoch in range(1, config.epochs + 1):
        if config.target_metric is not None and _reached(tm, config):
            break
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = backward(net, images[idx], config.loss, labels[idx], params=work, lowest=lowest)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {s // config.batch_size}")
            step += 1
            if config.optimizer == "sgd":
                for k, v in vel.items():
                    v *= config.momentum
                    v -= config.lr * grads[k]
                    work[k] += v
            else:
                b1, b2 = config.momentum, config.beta2
                c1, c2 = 1 - b1 ** step, 1 - b2 ** step
                for k, m in vel.items():
                    g = grads[k]
                    m *= b1
                    m += (1 - b1) * g
                    sq[k] *= b2
                    sq[k] += (1 - b2) * g * g
                    work[k] -= config.lr * (m / c1) / (np.sqrt(sq[k] / c2) + config.eps)
        cur = snapshot()
        _, tm, sel = record(epoch, cur)
        log.info("epoch %d loss %.5f metric %.4f", epoch, history[-1]["loss"], history[-1]["metric"])
        if sel < best_loss:
            best_loss, best = sel, cur
    return (best if config.keep_best else cur), history


def _reached(metric, config):
    if config.loss == "xent":
        return metric >= config.target_metric
    return metric <= config.target_metric


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "metric"])
        w.writeheader()
        for row in history:
            w.writerow(row)
