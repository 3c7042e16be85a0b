"""Per-filter features from captured activations: GAP means, L2 norms, correlations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine, netir
from .netir import NetworkIR


class NotAConvLayerError(ValueError):
    pass


class DegenerateAttributeError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    """Rows are images (dataset order), column j is filter ``filter_ids[j]`` of ``layer``."""

    X: np.ndarray
    layer: str
    filter_ids: list[int]
    targets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.filter_ids = [int(f) for f in self.filter_ids]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.filter_ids):
            raise ValueError(f"X shape {self.X.shape} does not match {len(self.filter_ids)} filters")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix has non-finite entries")
        for k, v in self.targets.items():
            if len(v) != len(self.X):
                raise ValueError(f"target {k!r} has {len(v)} rows, X has {len(self.X)}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def rows(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.X[idx], self.layer, self.filter_ids,
                             {k: np.asarray(v)[idx] for k, v in self.targets.items()})

    def columns(self, cols) -> "FeatureMatrix":
        cols = list(cols)
        return FeatureMatrix(self.X[:, cols], self.layer, [self.filter_ids[c] for c in cols],
                             dict(self.targets))


def resolve_tap(net: NetworkIR, layer: str) -> str:
    """Layer whose output holds the filter responses of ``layer``.

    A Conv2D directly followed by ReLU is read after the ReLU; an MFM block is
    read at the MFM layer (its internal conv cannot be requested).
    """
    i = net.index(layer)
    spec = net.layers[i]
    nxt = net.layers[i + 1] if i + 1 < len(net.layers) else None
    if spec.kind == "MFM":
        return layer
    if spec.kind != "Conv2D":
        raise NotAConvLayerError(f"{layer!r} is a {spec.kind} layer, not convolutional")
    if nxt is not None and nxt.kind == "MFM":
        raise NotAConvLayerError(f"{layer!r} is the internal conv of MFM {nxt.id!r}; request that")
    if nxt is not None and nxt.kind == "ReLU":
        return nxt.id
    return layer


def activations(net: NetworkIR, images, layer: str, reduce, chunk: int = 256) -> np.ndarray:
    tap = resolve_tap(net, layer)
    images = np.asarray(images)
    parts = []
    for s in range(0, len(images), chunk):
        _, trace = engine.forward(net, images[s:s + chunk], capture={tap}, stop_at=tap)
        parts.append(reduce(trace[tap].astype(np.float64)))
    return np.concatenate(parts, axis=0)


def _gap(a):
    return a.mean(axis=(2, 3))


def _l2(a):
    return np.sqrt((a * a).sum(axis=(2, 3)))


def extract_gap(net: NetworkIR, images, layer: str, targets=None, chunk: int = 256) -> FeatureMatrix:
    X = activations(net, images, layer, _gap, chunk)
    return FeatureMatrix(X, layer, list(range(X.shape[1])), dict(targets or {}))


def filter_norms(net: NetworkIR, images, layer: str, chunk: int = 256) -> np.ndarray:
    """n×p matrix of per-filter L2 norms of the u×v activation maps."""
    return activations(net, images, layer, _l2, chunk)


@dataclass
class Correlation:
    coef: np.ndarray
    degenerate: np.ndarray  # filters with zero variance, reported as 0


def correlate_attribute(responses, attribute) -> Correlation:
    """Pearson correlation of each response column with ``attribute``."""
    R = np.asarray(responses, dtype=np.float64)
    a = np.asarray(attribute, dtype=np.float64)
    if R.ndim != 2 or len(a) != len(R):
        raise ValueError("responses must be n×p with one attribute value per row")
    if len(a) < 3:
        raise DegenerateAttributeError("need at least 3 observations")
    ac = a - a.mean()
    if not np.any(ac):
        raise DegenerateAttributeError("attribute has zero variance")
    Rc = R - R.mean(axis=0)
    sr = np.sqrt((Rc * Rc).sum(axis=0))
    degenerate = sr == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = (Rc.T @ ac) / (sr * np.sqrt(ac @ ac))
    coef = np.where(degenerate, 0.0, np.clip(coef, -1.0, 1.0))
    return Correlation(coef, degenerate)


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


def split_indices(n: int, fractions=(0.75, 0.25), seed: int = 0) -> list[np.ndarray]:
    """Seeded permutation cut into consecutive parts; the last part takes the remainder."""
    if n < len(fractions):
        raise ValueError("not enough rows to split")
    order = np.random.default_rng(seed).permutation(n)
    cuts, acc = [], 0
    for f in fractions[:-1]:
        acc += int(math.floor(f * n))
        cuts.append(acc)
    return [np.sort(part) for part in np.split(order, cuts)]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

_TARGET = "target:"


def write_csv(fm: FeatureMatrix, path) -> None:
    header = [f"{fm.layer}:{f}" for f in fm.filter_ids] + [_TARGET + k for k in fm.targets]
    cols = [fm.X[:, j] for j in range(fm.p)] + [np.asarray(v, dtype=np.float64) for v in fm.targets.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(fm.n):
            w.writerow([repr(float(c[i])) for c in cols])


def read_csv(path) -> FeatureMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
    feat = [i for i, h in enumerate(header) if not h.startswith(_TARGET)]
    layers = {header[i].rsplit(":", 1)[0] for i in feat}
    if len(layers) != 1:
        raise ValueError(f"feature columns come from several layers: {sorted(layers)}")
    targets = {h[len(_TARGET):]: body[:, i] for i, h in enumerate(header) if h.startswith(_TARGET)}
    return FeatureMatrix(body[:, feat], layers.pop(), [int(header[i].rsplit(":", 1)[1]) for i in feat],
                         targets)


def save_features(fm: FeatureMatrix, path) -> None:
    tensors = {"X": fm.X}
    tensors.update({_TARGET + k: np.asarray(v, dtype=np.float64) for k, v in fm.targets.items()})
    netir.write_container(path, "features", {"layer": fm.layer, "filter_ids": fm.filter_ids}, tensors)


def load_features(path) -> FeatureMatrix:
    head, t = netir.read_container(path, kind="features")
    targets = {k[len(_TARGET):]: v for k, v in t.items() if k.startswith(_TARGET)}
    return FeatureMatrix(t["X"], head["layer"], head["filter_ids"], targets)
