"""Task-specific pruning: truncate above the best probe layer, then drop filters.

Every surgery op is a pure function old net → new net built from gathers over
a sorted keep-set D.  The correctness contract is masked-forward equivalence:
the pruned network computes exactly what the original computes when the
channels outside D are zeroed right after the pruned layer.  Original filter
indices survive in ``metadata["kept"]`` so pruned channels stay traceable.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine, lassopath, netir
from .archs import tap_layers
from .features import extract_gap, resolve_tap, split_indices
from .netir import CountReport, NetworkIR, LayerSpec

log = logging.getLogger(__name__)

HEAD_GAP, HEAD = "head_gap", "head"


class PlanMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# surgery
# --------------------------------------------------------------------------

def _keep(D, width, what) -> np.ndarray:
    D = np.asarray(sorted(set(int(d) for d in D)), dtype=np.int64)
    if len(D) == 0:
        raise ValueError(f"keep-set for {what} is empty")
    if D[0] < 0 or D[-1] >= width:
        raise IndexError(f"keep-set for {what} has indices outside [0, {width})")
    return D


def _with_kept(meta, layer_id, D):
    meta = dict(meta)
    kept = {k: list(v) for k, v in meta.get("kept", {}).items()}
    prev = kept.get(layer_id)
    kept[layer_id] = [int(prev[d]) if prev is not None else int(d) for d in D]
    meta["kept"] = kept
    return meta


def _restrict_consumer(layers, params, start, D):
    """Cut the input channels of the first layer after ``start`` that reads them.

    ReLU, MaxPool and GAP are channel-agnostic and pass through; the consumer is
    the next Conv2D (input slice) or Linear (column slice).
    """
    for i in range(start + 1, len(layers)):
        spec = layers[i]
        if spec.kind in ("ReLU", "MaxPool2D", "GAP"):
            continue
        w = f"{spec.id}.weight"
        if spec.kind == "Conv2D":
            layers[i] = _replace(spec, in_channels=len(D))
            params[w] = params[w][:, D]
        elif spec.kind == "Linear":
            layers[i] = _replace(spec, in_features=len(D))
            params[w] = params[w][:, D]
        else:  # pragma: no cover - validation keeps MFM behind a conv
            raise ValueError(f"unexpected consumer {spec.kind} after pruned layer")
        return


def _replace(spec: LayerSpec, **kw) -> LayerSpec:
    d = {**spec.__dict__, **kw}
    return LayerSpec(**d)


def _rows(layers, params, i, rows):
    spec = layers[i]
    layers[i] = _replace(spec, out_channels=len(rows))
    params[f"{spec.id}.weight"] = params[f"{spec.id}.weight"][rows]
    if spec.has_bias:
        params[f"{spec.id}.bias"] = params[f"{spec.id}.bias"][rows]


def prune_conv_pair(net: NetworkIR, layer: str, D) -> NetworkIR:
    """Keep filters D of conv ``layer`` and the matching inputs of the next consumer."""
    i = net.index(layer)
    spec = net.layers[i]
    if spec.kind != "Conv2D":
        raise ValueError(f"{layer!r} is a {spec.kind} layer, not Conv2D")
    if i + 1 < len(net.layers) and net.layers[i + 1].kind == "MFM":
        raise ValueError(f"{layer!r} feeds MFM {net.layers[i + 1].id!r}; prune the MFM instead")
    D = _keep(D, spec.out_channels, layer)
    if len(D) == spec.out_channels:
        return net
    layers, params = list(net.layers), dict(net.params)
    _rows(layers, params, i, D)
    _restrict_consumer(layers, params, i, D)
    return NetworkIR(layers, params, net.input_shape, _with_kept(net.metadata, layer, D))


def prune_mfm(net: NetworkIR, layer: str, D) -> NetworkIR:
    """Keep outputs D of an MFM; its conv keeps rows D then D + o to preserve pairing."""
    i = net.index(layer)
    spec = net.layers[i]
    if spec.kind != "MFM":
        raise ValueError(f"{layer!r} is a {spec.kind} layer, not MFM")
    o = spec.out_channels
    D = _keep(D, o, layer)
    if len(D) == o:
        return net
    layers, params = list(net.layers), dict(net.params)
    _rows(layers, params, i - 1, np.concatenate([D, D + o]))
    layers[i] = _replace(spec, out_channels=len(D))
    _restrict_consumer(layers, params, i, D)
    return NetworkIR(layers, params, net.input_shape, _with_kept(net.metadata, layer, D))


def group_layers(net: NetworkIR) -> dict[str, list[str]]:
    """Group tag → its MFM layer ids in order (first is 1×1, second k×k)."""
    out: dict[str, list[str]] = {}
    for spec in net.layers:
        if spec.kind == "MFM" and spec.group:
            out.setdefault(spec.group, []).append(spec.id)
    return out


def prune_group(net: NetworkIR, group: str, D) -> NetworkIR:
    """Keep D in the group's second MFM and in the next group's first MFM.

    Pruning the second MFM already trims the next group's 1×1 conv inputs; the
    next group's first MFM is then cut to D on its output side too.  With no
    next group only the in-group edit applies.
    """
    groups = group_layers(net)
    if group not in groups or len(groups[group]) != 2:
        raise KeyError(f"no two-MFM group {group!r}")
    net = prune_mfm(net, groups[group][1], D)
    names = list(groups)
    k = names.index(group)
    if k + 1 < len(names):
        net = prune_mfm(net, groups[names[k + 1]][0], D)
    return net


def truncate(net: NetworkIR, layer: str, head_weight=None, head_bias=None) -> NetworkIR:
    """Drop everything above ``layer``'s tap and append GAP + Linear.

    Without head weights the Linear is zero-initialised with one output.
    """
    tap = resolve_tap(net, layer)
    cut = net.index(tap) + 1
    c = net.shapes()[cut - 1][0]
    W = np.zeros((1, c)) if head_weight is None else np.atleast_2d(np.asarray(head_weight, dtype=np.float64))
    b = np.zeros(W.shape[0]) if head_bias is None else np.atleast_1d(np.asarray(head_bias, dtype=np.float64))
    if W.shape[1] != c:
        raise PlanMismatchError(f"head has {W.shape[1]} inputs, {layer!r} has {c} channels")
    layers = list(net.layers[:cut]) + [netir.gap(HEAD_GAP), netir.linear(HEAD, c, W.shape[0])]
    ids = {s.id for s in layers}
    params = {k: v for k, v in net.params.items() if k.rsplit(".", 1)[0] in ids}
    params[f"{HEAD}.weight"] = W.astype(np.float32)
    params[f"{HEAD}.bias"] = b.astype(np.float32)
    meta = dict(net.metadata)
    meta["truncated_at"] = layer
    return NetworkIR(layers, params, net.input_shape, meta)


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass
class PrunePlan:
    """Truncation point, keep-sets and the knee-point regression head.

    ``keep`` maps Conv2D/MFM layer ids to sorted filter indices, ``groups``
    maps group tags to the keep-set applied by the group rule.  ``head_weight``
    is k×n over the kept filters of the truncation layer (all of them when it
    has no keep-set).  Without a truncation layer the network keeps its own
    head and only the keep-sets apply.
    """

    truncation: str | None = None
    keep: dict[str, list[int]] = field(default_factory=dict)
    groups: dict[str, list[int]] = field(default_factory=dict)
    knees: dict[str, dict] = field(default_factory=dict)
    head_weight: np.ndarray | None = None
    head_bias: np.ndarray | None = None

    def head_filters(self, net: NetworkIR) -> list[int]:
        if self.truncation in self.keep:
            return list(self.keep[self.truncation])
        g = net.layer(self.truncation).group
        groups = group_layers(net)
        if g in self.groups and groups.get(g, [None, None])[1] == self.truncation:
            return list(self.groups[g])
        return list(range(net.shapes()[net.index(resolve_tap(net, self.truncation))][0]))

    def validate(self, net: NetworkIR) -> None:
        if self.truncation is None:
            if self.head_weight is not None:
                raise PlanMismatchError("a head needs a truncation layer")
            top = len(net.layers) - 1
        elif self.truncation not in net.ids:
            raise PlanMismatchError(f"truncation layer {self.truncation!r} not in network")
        else:
            try:
                top = net.index(resolve_tap(net, self.truncation))
            except ValueError as exc:
                raise PlanMismatchError(str(exc)) from None
        shapes = net.shapes()
        for lid, D in self.keep.items():
            if lid not in net.ids:
                raise PlanMismatchError(f"keep-set names unknown layer {lid!r}")
            i = net.index(lid)
            if i > top:
                raise PlanMismatchError(f"{lid!r} lies above the truncation layer")
            spec = net.layers[i]
            if spec.kind not in ("Conv2D", "MFM"):
                raise PlanMismatchError(f"{lid!r} is a {spec.kind} layer")
            if not D or min(D) < 0 or max(D) >= shapes[i][0] or list(D) != sorted(set(D)):
                raise PlanMismatchError(f"bad keep-set for {lid!r}")
        groups = group_layers(net)
        for g, D in self.groups.items():
            if g not in groups or net.index(groups[g][1]) > top:
                raise PlanMismatchError(f"group {g!r} missing or above truncation")
            if not D or max(D) >= net.layer(groups[g][1]).out_channels:
                raise PlanMismatchError(f"bad keep-set for group {g!r}")
        if self.head_weight is not None and np.shape(self.head_weight)[-1] != len(self.head_filters(net)):
            raise PlanMismatchError("head input size differs from the kept filters of the truncation layer")

    def to_dict(self) -> dict:
        return {"truncation": self.truncation, "keep": self.keep, "groups": self.groups, "knees": self.knees,
                "head_weight": None if self.head_weight is None else np.asarray(self.head_weight).tolist(),
                "head_bias": None if self.head_bias is None else np.asarray(self.head_bias).tolist()}

    @classmethod
    def from_dict(cls, d) -> "PrunePlan":
        hw, hb = d.get("head_weight"), d.get("head_bias")
        return cls(d["truncation"], {k: list(v) for k, v in d.get("keep", {}).items()},
                   {k: list(v) for k, v in d.get("groups", {}).items()}, dict(d.get("knees", {})),
                   None if hw is None else np.asarray(hw, dtype=np.float64),
                   None if hb is None else np.asarray(hb, dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "PrunePlan":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def keep_all_plan() -> PrunePlan:
    return PrunePlan()


def knee_support(curve: lassopath.CharacteristicCurve, gamma: float) -> tuple[int, list[int]]:
    """Fit index and filter support at the knee; an empty knee falls back to the first non-empty fit."""
    knee = lassopath.kneepoint(curve, gamma)
    idx = knee.index
    if curve.fits[idx].nnz == 0:
        nz = [i for i, f in enumerate(curve.fits) if f.nnz > 0]
        if not nz:
            raise ValueError(f"curve for {curve.layer!r} never selects a filter")
        idx = nz[0]
    return idx, [curve.filter_ids[j] for j in curve.fits[idx].support]


def prunable_layers(net: NetworkIR, truncation: str) -> list[str]:
    """Tap layers at or below ``truncation``, in network order."""
    top = net.index(resolve_tap(net, truncation))
    return [l for l in tap_layers(net) if net.index(resolve_tap(net, l)) <= top]


def plan_from_curves(net: NetworkIR, truncation: str, curves: Mapping[str, lassopath.CharacteristicCurve],
                     gamma: float = 0.01) -> PrunePlan:
    """Keep-sets from each layer's knee-point; the head comes from the truncation layer's knee.

    A group's second MFM sets the keep-set for that group (and, through the group
    rule, the next group's first MFM); a first MFM that is covered this way takes
    no keep-set of its own.
    """
    groups = group_layers(net)
    names = list(groups)
    covered = {groups[names[k + 1]][0] for k in range(len(names) - 1) if groups[names[k]][1] in curves}
    plan = PrunePlan(truncation)
    for lid in prunable_layers(net, truncation):
        if lid not in curves or lid in covered:
            continue
        curve = curves[lid]
        idx, D = knee_support(curve, gamma)
        fit = curve.fits[idx]
        plan.knees[lid] = {"gamma": gamma, "index": idx, "lambda": fit.lam, "nnz": len(D),
                           "rmse": float(curve.rmse[idx])}
        spec = net.layer(lid)
        if spec.kind == "MFM" and spec.group and groups[spec.group][1] == lid:
            plan.groups[spec.group] = D
        else:
            plan.keep[lid] = D
        if lid == truncation:
            w, b = curve.head(idx)
            plan.head_weight = np.asarray(w)[fit.support][None, :]
            plan.head_bias = np.atleast_1d(b)
    return plan


def select_truncation_layer(net: NetworkIR, images, y, candidates: Sequence[str] | None = None, *,
                            seed: int = 0, fractions=(0.75, 0.25)) -> tuple[str, list[dict]]:
    """Candidate with the lowest held-out least-squares probe RMSE.

    RMSEs within 10⁻⁹ of the best count as ties, resolved towards the deepest layer.
    """
    from .probe import least_squares

    candidates = list(candidates or tap_layers(net))
    if not candidates:
        raise ValueError("no candidate layers")
    y = np.asarray(y, dtype=np.float64)
    tr, ho = split_indices(len(y), fractions, seed)
    table = []
    for lid in candidates:
        X = extract_gap(net, images, lid).X
        W, b = least_squares(X[tr], y[tr, None])
        table.append({"layer": lid, "depth": net.index(lid),
                      "rmse_train": float(np.sqrt(np.mean((X[tr] @ W[:, 0] + b[0] - y[tr]) ** 2))),
                      "rmse_heldout": float(np.sqrt(np.mean((X[ho] @ W[:, 0] + b[0] - y[ho]) ** 2)))})
    best = min(r["rmse_heldout"] for r in table)
    ties = [r for r in table if r["rmse_heldout"] - best <= 1e-9]
    return max(ties, key=lambda r: r["depth"])["layer"], table


def make_plan(net: NetworkIR, images, y, truncation: str, gamma: float = 0.01, *, seed: int = 0,
              split=None, count: int = lassopath.DEFAULT_COUNT, ratio: float = lassopath.DEFAULT_RATIO,
              gammas=lassopath.DEFAULT_GAMMAS):
    """Characteristic curve per prunable layer, then :func:`plan_from_curves`.

    ``split`` is an optional (train, held-out) index pair shared by all layers.
    """
    curves = {}
    for lid in prunable_layers(net, truncation):
        curves[lid] = lassopath.characteristic_curve(net, lid, images, y, split=split, seed=seed,
                                                     count=count, ratio=ratio,
                                                     gammas=tuple(sorted(set(gammas) | {gamma})))
        log.info("curve %s: %d fits", lid, len(curves[lid].fits))
    return plan_from_curves(net, truncation, curves, gamma), curves


def build_pruned_network(net: NetworkIR, plan: PrunePlan) -> tuple[NetworkIR, CountReport, CountReport]:
    """Apply ``plan``: truncate, attach the knee head, prune bottom-up.

    Returns the pruned network with before/after counts (after carries the
    reductions against before).  A keep-all plan without truncation returns
    ``net`` itself.
    """
    plan.validate(net)
    before = netir.count(net)
    if plan.truncation is None:
        out = net
    elif plan.head_weight is not None:
        filters = plan.head_filters(net)
        p = net.shapes()[net.index(resolve_tap(net, plan.truncation))][0]
        W = np.zeros((np.atleast_2d(plan.head_weight).shape[0], p))
        W[:, filters] = np.atleast_2d(plan.head_weight)
        out = truncate(net, plan.truncation, W, plan.head_bias)
    else:
        out = truncate(net, plan.truncation)
    groups = group_layers(net)
    ops = [(net.index(l), "layer", l, D) for l, D in plan.keep.items()]
    ops += [(net.index(groups[g][1]), "group", g, D) for g, D in plan.groups.items()]
    for _, kind, name, D in sorted(ops):
        if kind == "group":
            out = prune_group(out, name, D)
        elif out.layer(name).kind == "MFM":
            out = prune_mfm(out, name, D)
        else:
            out = prune_conv_pair(out, name, D)
    netir.require_valid(out)
    return out, before, netir.count(out).against(before)


# --------------------------------------------------------------------------
# after surgery: head refit, finetuning, reports
# --------------------------------------------------------------------------

def refit_head(net: NetworkIR, images, y) -> NetworkIR:
    """Least-squares refit of the final Linear on the GAP features feeding it."""
    from .probe import least_squares

    i = net.index(HEAD)
    tap = net.layers[i - 2].id
    _, trace = engine.forward(net, images, capture={tap}, stop_at=tap, dtype=np.float64)
    X = trace[tap].mean(axis=(2, 3))
    W, b = least_squares(X, np.asarray(y, dtype=np.float64).reshape(len(X), -1))
    params = dict(net.params)
    params[f"{HEAD}.weight"] = W.T.astype(np.float32)
    params[f"{HEAD}.bias"] = b.astype(np.float32)
    return net.evolve(params=params)


def rmse(net: NetworkIR, images, y) -> float:
    out = engine.predict(net, images).astype(np.float64)
    return float(np.sqrt(np.mean((out.reshape(len(out), -1) - np.asarray(y, dtype=np.float64).reshape(len(out), -1)) ** 2)))


def finetune(net: NetworkIR, images, y, val, config: engine.TrainConfig | None = None):
    """MSE finetuning of every layer starting from the current head; keeps the best validation epoch."""
    cfg = config or engine.TrainConfig(lr=0.01, momentum=0.9, epochs=10, batch_size=32)
    cfg = engine.TrainConfig(**{**cfg.__dict__, "loss": "mse", "keep_best": True})
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    vy = np.asarray(val[1], dtype=np.float64).reshape(len(val[1]), -1)
    return engine.train_sgd(net, images, y, cfg, val=(val[0], vy))


def inference_time(net: NetworkIR, runs: int = 5, repeat: int = 20, seed: int = 0) -> float:
    """Median over ``runs`` of the mean single-image forward time (seconds)."""
    x = np.random.default_rng(seed).normal(size=(1,) + net.input_shape).astype(np.float32)
    engine.forward(net, x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        for _ in range(repeat):
            engine.forward(net, x)
        times.append((time.perf_counter() - t0) / repeat)
    return statistics.median(times)


REPORT_COLUMNS = ("Attribute", "Arch", "RMSE", "FLOP", "% FLOP reduction", "Parameters", "% Size reduction")


def compression_report(before: CountReport, after: CountReport, rmse_before: float, rmse_after: float,
                       timing: Mapping[str, float] | None = None, *, attribute: str = "", arch: str = "") -> dict:
    """One compression-table row plus the unpruned reference and inference times."""
    after = after.against(before)
    row = {
        "Attribute": attribute, "Arch": arch, "RMSE": rmse_after,
        "FLOP": after.total_flops, "% FLOP reduction": 100.0 * after.flop_reduction,
        "Parameters": after.total_params, "% Size reduction": 100.0 * after.param_reduction,
    }
    out = {"row": row, "unpruned": {"RMSE": rmse_before, "FLOP": before.total_flops,
                                    "Parameters": before.total_params},
           "convention": before.convention}
    if timing:
        out["inference_seconds"] = dict(timing)
    return out


def write_report(reports: Sequence[dict], csv_path=None, json_path=None) -> None:
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(REPORT_COLUMNS))
            w.writeheader()
            for r in reports:
                w.writerow(r["row"])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(list(reports), fh, indent=1, sort_keys=True)
