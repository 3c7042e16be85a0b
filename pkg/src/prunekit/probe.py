"""Linear probes on GAP features of a frozen network.

A probe is an ordinary least-squares fit of a satellite target on the feature
matrix of one layer.  Continuous outputs become labels in one of four ways:

* ``binary``: threshold at a τ chosen on the validation split, output ≥ τ is
  positive;
* ``multiclass-binned``: the target is a real value and both it and the output
  are binned with the same edges (intervals closed on the right, out-of-range
  values clamped to the end bins);
* ``classification``: one least-squares column per class (one-vs-rest), argmax;
* ``multilabel``: an independent binary probe per label column, accuracy is
  the mean over labels.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine, netir
from .features import FeatureMatrix, resolve_tap, split_indices
from .netir import NetworkIR

log = logging.getLogger(__name__)

KINDS = ("binary", "multiclass-binned", "multilabel", "classification")
DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)


class ConstantTargetError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """What to predict and how to turn a regression output into a label.

    ``columns`` names the target columns of the feature matrix; every kind but
    ``multilabel`` uses exactly one.
    """

    name: str
    kind: str
    columns: tuple[str, ...] = ()
    edges: tuple[float, ...] | None = None
    n_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns) or (self.name,))
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind != "multilabel" and len(self.columns) != 1:
            raise ValueError(f"{self.kind} task takes one target column, got {self.columns}")
        if self.kind == "multiclass-binned":
            if self.edges is None or len(self.edges) < 3:
                raise ValueError("binned task needs at least 3 edges (2 bins)")
            e = np.asarray(self.edges, dtype=np.float64)
            if not np.all(np.diff(e) > 0):
                raise ValueError("bin edges must be strictly increasing")
            object.__setattr__(self, "edges", tuple(float(v) for v in e))
        elif self.edges is not None:
            raise ValueError(f"{self.kind} task takes no bin edges")
        if self.kind == "classification" and (self.n_classes is None or self.n_classes < 2):
            raise ValueError("classification task needs n_classes ≥ 2")

    @classmethod
    def binned(cls, name, lo, hi, bins, column=None):
        return cls(name, "multiclass-binned", (column or name,), tuple(np.linspace(lo, hi, bins + 1)))

    @property
    def n_bins(self) -> int | None:
        return None if self.edges is None else len(self.edges) - 1

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "columns": list(self.columns),
                "edges": None if self.edges is None else list(self.edges), "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], tuple(d["columns"]),
                   None if d.get("edges") is None else tuple(d["edges"]), d.get("n_classes"))


def bin_values(values, edges) -> np.ndarray:
    """Bin index of each value; bins are (e_i, e_{i+1}], ends clamped."""
    inner = np.asarray(edges, dtype=np.float64)[1:-1]
    return np.searchsorted(inner, np.asarray(values, dtype=np.float64), side="left")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @classmethod
    def make(cls, n: int, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> "Split":
        if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0):
            raise ValueError("split needs three fractions summing to 1")
        return cls(*split_indices(n, fractions, seed))


@dataclass
class ProbeModel:
    """Fitted probe.  ``weights`` is p×k on raw features, one column per output.

    k is 1 for binary and binned tasks, the class count for classification and
    the label count for multilabel tasks.  ``tau`` holds one threshold per
    output for binary and multilabel tasks.
    """

    task: TaskSpec
    layer: str
    weights: np.ndarray
    intercept: np.ndarray
    tau: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.weights.shape[0]

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.p:
            raise DimensionMismatchError(f"features have shape {X.shape}, probe expects {self.p} columns")
        return X @ self.weights + self.intercept

    def save(self, path) -> None:
        tensors = {"weights": self.weights, "intercept": self.intercept}
        if self.tau is not None:
            tensors["tau"] = self.tau
        netir.write_container(path, "probe", {"task": self.task.to_dict(), "layer": self.layer,
                                              "diagnostics": self.diagnostics}, tensors)

    @classmethod
    def load(cls, path) -> "ProbeModel":
        head, t = netir.read_container(path, kind="probe")
        return cls(TaskSpec.from_dict(head["task"]), head["layer"], t["weights"], t["intercept"],
                   t.get("tau"), head["diagnostics"])


def least_squares(X, Y):
    """Weights and intercept minimising ‖Y − b − XW‖² (Y is n×k).

    Rank-deficient designs get a ridge jitter ε = 10⁻⁶·trace(XᵀX)/p so the
    solution stays unique and deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    p = X.shape[1]
    if np.linalg.matrix_rank(Xc) < p:
        eps = 1e-6 * float((Xc * Xc).sum()) / p
        if eps > 0:
            Xc = np.vstack([Xc, math.sqrt(eps) * np.eye(p)])
            Yc = np.vstack([Yc, np.zeros((p, Y.shape[1]))])
    W = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
    return W, my - mx @ W


def best_threshold(scores, y) -> float:
    """τ maximising accuracy of ``scores ≥ τ`` against 0/1 labels ``y``.

    Candidates are the midpoints between consecutive distinct scores plus one
    point beyond each end; ties go to the candidate closest to 0.5.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    u = np.unique(s)
    cand = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    acc = np.array([np.mean((s >= c) == y) for c in cand])
    top = np.flatnonzero(acc == acc.max())
    return float(cand[top[np.argmin(np.abs(cand[top] - 0.5))]])


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def _design_targets(task: TaskSpec, fm: FeatureMatrix) -> np.ndarray:
    """n×k regression targets for the task."""
    try:
        cols = [np.asarray(fm.targets[c], dtype=np.float64) for c in task.columns]
    except KeyError as e:
        raise KeyError(f"feature matrix has no target column {e.args[0]!r}") from None
    if task.kind == "classification":
        y = cols[0].astype(np.int64)
        if np.any(y != cols[0]) or y.min() < 0 or y.max() >= task.n_classes:
            raise ValueError(f"classification labels must be integers in [0, {task.n_classes})")
        return np.eye(task.n_classes)[y]
    if task.kind in ("binary", "multilabel"):
        Y = np.column_stack(cols)
        if not np.all((Y == 0) | (Y == 1)):
            raise ValueError(f"{task.kind} targets must be 0/1")
        return Y
    return cols[0][:, None]


def true_labels(task: TaskSpec, fm: FeatureMatrix) -> np.ndarray:
    Y = _design_targets(task, fm)
    if task.kind == "classification":
        return Y.argmax(axis=1)
    if task.kind == "multiclass-binned":
        return bin_values(Y[:, 0], task.edges)
    if task.kind == "binary":
        return Y[:, 0].astype(np.int64)
    return Y.astype(np.int64)


def fit_probe(features: FeatureMatrix, task: TaskSpec, split: Split | None = None, *,
              seed: int = 0, fractions=DEFAULT_FRACTIONS, strict: bool = True) -> ProbeModel:
    """Least-squares probe for ``task`` on ``features``.

    Only the train rows enter the weights and only the validation rows the
    threshold; test rows are touched solely to report accuracy.  ``strict=False``
    skips the distinct-target precondition (used for degenerate timing runs).
    """
    if split is None:
        split = Split.make(features.n, fractions, seed)
    if len(split.train) == 0 or len(split.val) == 0:
        raise EmptySplitError("train and validation splits must be non-empty")
    Y = _design_targets(task, features)
    tr, va = features.rows(split.train), features.rows(split.val)
    Ytr, Yva = Y[split.train], Y[split.val]
    if strict:
        const = [j for j in range(Ytr.shape[1]) if np.all(Ytr[:, j] == Ytr[0, j])]
        if task.kind == "classification":
            if len(np.unique(Ytr.argmax(axis=1))) < 2:
                raise ConstantTargetError("train split holds a single class")
        elif const:
            raise ConstantTargetError(f"target column(s) {[task.columns[j] for j in const]} constant on train split")
    W, b = least_squares(tr.X, Ytr)
    model = ProbeModel(task, features.layer, W, b)
    s_va = model.scores(va.X)
    if task.kind in ("binary", "multilabel"):
        model.tau = np.array([best_threshold(s_va[:, j], Yva[:, j]) for j in range(W.shape[1])])
    model.diagnostics = {
        "rmse_train": _rmse(model.scores(tr.X), Ytr),
        "rmse_val": _rmse(s_va, Yva),
        "acc_val": accuracy(model, va),
        "n_train": int(len(split.train)), "n_val": int(len(split.val)), "n_test": int(len(split.test)),
    }
    if len(split.test):
        model.diagnostics["acc_test"] = accuracy(model, features.rows(split.test))
    return model


def predict(model: ProbeModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Continuous outputs and categorical predictions.

    Binary and binned tasks return 1-D arrays; classification returns the class
    index; multilabel returns an n×k 0/1 matrix.
    """
    X = features.X if isinstance(features, FeatureMatrix) else features
    s = model.scores(X)
    kind = model.task.kind
    if kind == "classification":
        return s, s.argmax(axis=1)
    if kind == "multiclass-binned":
        return s[:, 0], bin_values(s[:, 0], model.task.edges)
    labels = (s >= model.tau).astype(np.int64)
    return (s[:, 0], labels[:, 0]) if kind == "binary" else (s, labels)


def accuracy(model: ProbeModel, features: FeatureMatrix) -> float:
    """Fraction correct; for multilabel tasks the mean of per-label accuracies."""
    _, pred = predict(model, features)
    return float(np.mean(pred == true_labels(model.task, features)))


# --------------------------------------------------------------------------
# transfer matrix
# --------------------------------------------------------------------------

@dataclass
class TransferMatrix:
    """Probe accuracy per (primary network, satellite task).

    ``reduction[i, j]`` is the percentage drop of cell (i, j) against the
    network dedicated to task j (the row whose primary task is j); it is NaN
    when no row is dedicated to j or the cell is absent.
    """

    primaries: list[str]
    tasks: list[str]
    accuracy: np.ndarray
    reduction: np.ndarray
    absent: np.ndarray
    seconds: np.ndarray

    def to_rows(self):
        for i, p in enumerate(self.primaries):
            for j, t in enumerate(self.tasks):
                yield {"primary": p, "task": t, "accuracy": _jnum(self.accuracy[i, j]),
                       "reduction_pct": _jnum(self.reduction[i, j]), "absent": bool(self.absent[i, j]),
                       "seconds": _jnum(self.seconds[i, j])}

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["primary", "task", "accuracy", "reduction_pct", "absent", "seconds"])
            w.writeheader()
            for row in self.to_rows():
                w.writerow({k: ("" if v is None else v) for k, v in row.items()})

    def to_json(self) -> str:
        return json.dumps({"primaries": self.primaries, "tasks": self.tasks, "cells": list(self.to_rows())},
                          indent=1)


def _jnum(v):
    v = float(v)
    return None if math.isnan(v) else v


def transfer_matrix(features: Mapping[tuple[str, str], FeatureMatrix], primaries: Sequence[str],
                    tasks: Sequence[TaskSpec], primary_task: Mapping[str, str] | None = None, *,
                    seed: int = 0, fractions=DEFAULT_FRACTIONS) -> TransferMatrix:
    """Fit and test-score one probe per (primary, task) cell.

    ``features[(primary, task_name)]`` holds that network's features on that
    task's dataset; a missing entry marks the cell absent.  ``primary_task``
    maps a network to the task it was trained for, which defines the
    reference accuracy of each column.
    """
    primary_task = dict(primary_task or {})
    m, k = len(primaries), len(tasks)
    acc = np.full((m, k), np.nan)
    secs = np.full((m, k), np.nan)
    absent = np.zeros((m, k), dtype=bool)
    for i, p in enumerate(primaries):
        for j, task in enumerate(tasks):
            fm = features.get((p, task.name))
            if fm is None:
                absent[i, j] = True
                log.warning("no features for (%s, %s); cell left absent", p, task.name)
                continue
            t0 = time.perf_counter()
            model = fit_probe(fm, task, seed=seed, fractions=fractions)
            secs[i, j] = time.perf_counter() - t0
            acc[i, j] = model.diagnostics["acc_test"]
    red = np.full((m, k), np.nan)
    for j, task in enumerate(tasks):
        refs = [i for i, p in enumerate(primaries) if primary_task.get(p) == task.name]
        if refs and not absent[refs[0], j]:
            ref = acc[refs[0], j]
            red[:, j] = 100.0 * (ref - acc[:, j]) / ref
            red[refs[0], j] = 0.0
    return TransferMatrix(list(primaries), [t.name for t in tasks], acc, red, absent, secs)


# --------------------------------------------------------------------------
# timing: probe vs head-only finetuning
# --------------------------------------------------------------------------

@dataclass
class TimingResult:
    probe_seconds: float
    finetune_seconds: float
    probe_accuracy: float
    finetune_accuracy: float
    epochs: int
    reliable: bool

    @property
    def ratio(self) -> float:
        return self.finetune_seconds / self.probe_seconds if self.probe_seconds > 0 else math.inf

    def to_dict(self):
        return {"probe_seconds": self.probe_seconds, "finetune_seconds": self.finetune_seconds,
                "ratio": self.ratio, "probe_accuracy": self.probe_accuracy,
                "finetune_accuracy": self.finetune_accuracy, "epochs": self.epochs, "reliable": self.reliable}


def head_network(net: NetworkIR, layer: str, n_out: int, seed: int = 0) -> NetworkIR:
    """``net`` truncated after the tap of ``layer`` with a fresh GAP + Linear head."""
    tap = resolve_tap(net, layer)
    cut = net.index(tap) + 1
    layers = list(net.layers[:cut])
    c = net.shapes()[cut - 1][0]
    head_id = "probe_fc"
    layers += [netir.gap("probe_gap"), netir.linear(head_id, c, n_out)]
    params = {k: v for k, v in net.params.items() if k.rsplit(".", 1)[0] in {s.id for s in layers}}
    rng = np.random.default_rng(seed)
    params[f"{head_id}.weight"] = (rng.normal(size=(n_out, c)) * math.sqrt(1.0 / c)).astype(np.float32)
    params[f"{head_id}.bias"] = np.zeros(n_out, dtype=np.float32)
    return NetworkIR(tuple(layers), params, net.input_shape, dict(net.metadata))


def probe_timing(net: NetworkIR, layer: str, images, labels, *, seed: int = 0,
                 fractions=DEFAULT_FRACTIONS, tolerance: float = 0.05, max_epochs: int = 100,
                 lr: float = 0.01, batch_size: int = 32, optimizer: str = "adam") -> TimingResult:
    """Wall-clock of a binary probe (feature extraction + fit) against finetuning.

    The baseline freezes every layer of the truncated trunk and trains only a
    reinitialised GAP + Linear head with cross-entropy (Adam by default) until
    its validation accuracy is within ``tolerance`` of the probe's, or
    ``max_epochs`` pass.
    Datasets too small for a three-way split are run on all rows for every
    split and flagged unreliable.
    """
    from .features import extract_gap

    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    n = len(images)
    reliable = n >= 8 and len(np.unique(labels)) == 2
    if n >= 8:
        split = Split.make(n, fractions, seed)
    else:
        every = np.arange(n)
        split = Split(every, every, every)
    task = TaskSpec("target", "binary")

    t0 = time.perf_counter()
    fm = extract_gap(net, images, layer, targets={"target": labels})
    model = fit_probe(fm, task, split, strict=reliable)
    probe_s = time.perf_counter() - t0
    probe_acc = accuracy(model, fm.rows(split.val))

    t0 = time.perf_counter()
    head = head_network(net, layer, 2, seed)
    trunk = frozenset(s.id for s in head.layers if s.id not in ("probe_gap", "probe_fc"))
    cfg = engine.TrainConfig(lr=lr, momentum=0.9, epochs=max_epochs, batch_size=batch_size, seed=seed,
                             frozen=trunk, loss="xent", target_metric=probe_acc - tolerance,
                             optimizer=optimizer)
    trained, hist = engine.train_sgd(head, images[split.train], labels[split.train], cfg,
                                     val=(images[split.val], labels[split.val]))
    ft_s = time.perf_counter() - t0
    vals = [h for h in hist if h["split"] == "val"]
    return TimingResult(probe_s, ft_s, probe_acc, vals[-1]["metric"], vals[-1]["epoch"], reliable)


def select_layer(net: NetworkIR, images, targets: Mapping[str, np.ndarray], task: TaskSpec,
                 layers: Sequence[str], split: Split) -> tuple[str, ProbeModel, FeatureMatrix]:
    """Tap layer whose probe has the best validation accuracy (deeper wins ties)."""
    from .features import extract_gap

    best = None
    for lid in layers:
        fm = extract_gap(net, images, lid, targets=targets)
        m = fit_probe(fm, task, split)
        if best is None or m.diagnostics["acc_val"] >= best[1].diagnostics["acc_val"]:
            best = (lid, m, fm)
    return best


def network_transfer_matrix(nets: Mapping[str, NetworkIR], images, targets: Mapping[str, np.ndarray],
                            tasks: Sequence[TaskSpec], layer: str | Sequence[str] = "best", *,
                            seed: int = 0, fractions=DEFAULT_FRACTIONS):
    """Transfer matrix of whole networks on one dataset.

    ``layer`` is a tap id shared by all networks, or "best" to pick, per cell,
    the tap with the highest validation accuracy.  Each network's
    ``metadata["primary_task"]`` names its dedicated column.  Returns the
    matrix and the chosen layer per cell.
    """
    from .archs import tap_layers
    from .features import extract_gap

    split = Split.make(len(images), fractions, seed)
    feats, chosen = {}, {}
    for name, net in nets.items():
        for t in tasks:
            if layer == "best":
                lid, _, fm = select_layer(net, images, targets, t, tap_layers(net), split)
            else:
                lid, fm = layer, extract_gap(net, images, layer, targets=targets)
            feats[(name, t.name)] = fm
            chosen[(name, t.name)] = lid
    primary = {name: net.metadata.get("primary_task") for name, net in nets.items()}
    tm = transfer_matrix(feats, list(nets), tasks, primary, seed=seed, fractions=fractions)
    return tm, chosen
