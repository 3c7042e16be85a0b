"""Acceptance suite: one test per criterion, each registering a PASS/FAIL line.

The lines are printed in the terminal summary.  Tolerances are the stated ones;
a criterion that is not met fails here rather than being relaxed.
"""

import time

import numpy as np
import pytest

from prunekit import archs, engine, lassopath as lp, netir, probe as pr, pruner as pn
from prunekit import synthfaces as sf
from prunekit.features import Standardizer, extract_gap, split_indices
from prunekit.netir import (BlobLengthError, MalformedHeaderError, ShapeMismatchError,
                            UnsupportedVersionError)

from conftest import ACCEPTANCE
from netgen import random_group_network, random_network
from oracles import (finite_difference_grads, lasso_objective, masked_mismatch, naive_forward,
                     subgradient_lasso)


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# --------------------------------------------------------------------------
# 1-2: engine against loop oracles
# --------------------------------------------------------------------------

def test_c1_forward_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, kinds, cases = 0.0, set(), 0
    while cases < 120:
        net = random_network(rng) if cases % 3 else random_group_network(rng)
        x = rng.normal(size=(2,) + net.input_shape)
        _, got = engine.forward(net, x, capture=net.ids, dtype=np.float64)
        ref = naive_forward(net, x)
        worst = max(worst, max(float(np.max(np.abs(got[l] - ref[l]))) for l in net.ids))
        kinds |= {s.kind for s in net.layers}
        cases += 1
    secs = time.perf_counter() - t0
    want = {"Conv2D", "ReLU", "MaxPool2D", "MFM", "GAP", "Linear"}
    record(1, worst <= 1e-6 and want <= kinds and secs < 60,
           f"{cases} cases, max abs error {worst:.2e} (≤ 1e-6), kinds {sorted(kinds)}, {secs:.1f}s")


def test_c2_gradient_check():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst, kinds, shapes = 0.0, set(), 0
    while shapes < 24:
        net = random_network(rng, max_blocks=3) if shapes % 4 else random_group_network(rng, max_groups=1)
        x = rng.normal(size=(2,) + net.input_shape)
        out_dim = net.layers[-1].out_features
        loss = "xent" if out_dim > 1 and shapes % 2 else "mse"
        y = rng.integers(0, out_dim, size=2) if loss == "xent" else rng.normal(size=(2, out_dim))
        p64 = {k: np.array(v, dtype=np.float64) for k, v in net.params.items()}
        _, grads = engine.backward(net, x, loss, y, params=p64, dtype=np.float64)
        num = finite_difference_grads(
            lambda p: engine.loss_value(net, x, y, loss, params=p, dtype=np.float64), p64)
        worst = max(worst, max(rel_error(grads[k], num[k]) for k in grads))
        kinds |= {s.kind for s in net.layers}
        shapes += 1
    secs = time.perf_counter() - t0
    want = {"Conv2D", "ReLU", "MaxPool2D", "MFM", "GAP", "Linear"}
    record(2, worst < 1e-4 and want <= kinds and secs < 120,
           f"{shapes} shapes, max relative error {worst:.2e} (< 1e-4), {secs:.1f}s")


# --------------------------------------------------------------------------
# 3-5: LASSO path, curve shape, knee-points
# --------------------------------------------------------------------------

def standardized(rng, n, p):
    return Standardizer.fit(X := rng.normal(size=(n, p))).transform(X)


def test_c3_lasso():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    # (a) empty fit at λ_max
    empty = 0
    for _ in range(50):
        n, p = int(rng.integers(10, 60)), int(rng.integers(1, 20))
        X, y = standardized(rng, n, p), rng.normal(size=n)
        empty += lp.fit_lasso(X, y, lp.lambda_schedule(X, y, count=1)[0]).nnz == 0
    # (b) λ = 0 against least squares
    ols = 0.0
    for _ in range(20):
        n, p = int(rng.integers(20, 60)), int(rng.integers(1, 8))
        X, y = standardized(rng, n, p), rng.normal(size=n)
        fit = lp.fit_lasso(X, y, 0.0)
        W, b = pr.least_squares(X, y[:, None])
        ols = max(ols, float(np.max(np.abs(fit.beta - W[:, 0]))), abs(fit.intercept - b[0]))
    # (c) KKT along full paths
    kkt = 0.0
    for _ in range(10):
        n, p = int(rng.integers(30, 120)), int(rng.integers(2, 40))
        X = standardized(rng, n, p) + 0.5 * rng.normal(size=(n, 1))  # correlated columns
        y = X[:, : min(3, p)].sum(axis=1) + rng.normal(size=n)
        for f in lp.lasso_path(X, y, lp.lambda_schedule(X, y)):
            kkt = max(kkt, lp.kkt_violation(X, y, f.beta, f.lam))
    # (d) p ≤ 3 objective against an independent proximal-gradient oracle and a grid
    obj = 0.0
    for _ in range(20):
        p = int(rng.integers(1, 4))
        X, y = standardized(rng, 30, p), rng.normal(size=30)
        lam = float(rng.uniform(0.01, 0.5)) * lp.lambda_schedule(X, y, count=1)[0]
        fit = lp.fit_lasso(X, y, lam)
        got = lasso_objective(X, y, fit.intercept, fit.beta, lam)
        b0, beta = subgradient_lasso(X, y, lam)
        ref = lasso_objective(X, y, b0, beta, lam)
        axes = [np.linspace(v - 0.05, v + 0.05, 21) for v in fit.beta]
        grid = min(lasso_objective(X, y, y.mean() - X.mean(0) @ np.array(g), np.array(g), lam)
                   for g in np.array(np.meshgrid(*axes)).reshape(p, -1).T)
        obj = max(obj, abs(got - ref), max(got - grid, 0.0))
    secs = time.perf_counter() - t0
    ok = empty == 50 and ols <= 1e-6 and kkt <= 1e-6 and obj <= 1e-4 and secs < 180
    record(3, ok, f"(a) {empty}/50 empty at λ_max; (b) OLS gap {ols:.1e}; (c) max KKT {kkt:.1e}; "
                  f"(d) objective gap {obj:.1e}; {secs:.1f}s")


def planted_curve(seed, p=64, s=5, n=600):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) + 0.3 * rng.normal(size=(n, 1))
    support = rng.choice(p, s, replace=False)
    coef = rng.uniform(0.6, 1.2, s) * rng.choice([-1, 1], s)
    y = X[:, support] @ coef + 0.3 * rng.normal(size=n)
    tr, ho = split_indices(n, (0.75, 0.25), seed)
    return lp.curve_from_features(X[tr], y[tr], X[ho], y[ho]), s


@pytest.fixture(scope="module")
def planted_curves():
    return [planted_curve(seed) for seed in range(20)]


def test_c4_curve_shape(planted_curves):
    passed = 0
    for curve, s in planted_curves:
        by = curve.rmse_by_nnz()
        full = curve.rmse[-1]
        flat = all(m <= 1.05 * full for k, m in by.items() if k >= s)
        # a path that jumps past nnz = 1 is judged at its smallest non-empty support (stricter)
        first = by[min(k for k in by if k >= 1)]
        passed += flat and first >= 2 * full
    record(4, passed >= 18, f"{passed}/20 seeds: RMSE(nnz ≥ s) within 5% of full and RMSE(1) ≥ 2× full")


def test_c5_knee(planted_curves):
    rng = np.random.default_rng(505)
    curves = [c for c, _ in planted_curves]
    # plus noisy curves off random paths
    for _ in range(30):
        n, p = int(rng.integers(40, 200)), int(rng.integers(2, 30))
        X = rng.normal(size=(n, p))
        y = X[:, 0] * rng.normal() + rng.normal(size=n)
        tr, ho = split_indices(n, (0.75, 0.25), 0)
        curves.append(lp.curve_from_features(X[tr], y[tr], X[ho], y[ho], count=40))
    bad = 0
    for c in curves:
        m, k = c.rmse, c.nnz
        lo, hi = m.min(), m.max()
        prev = None
        for g in (0.1, 0.01, 0.001):
            kp = lp.kneepoint(c, g)
            if kp.flat:
                continue
            ok = m[kp.index] - lo < g * (hi - lo)
            ok &= not np.any((k < kp.nnz) & (m - lo < g * (hi - lo)))
            ok &= prev is None or kp.nnz >= prev  # smaller γ, never a smaller knee
            prev = kp.nnz
            bad += not ok
    record(5, bad == 0, f"{len(curves)} curves, {bad} knee violations (inequality, minimality, monotone in γ)")


# --------------------------------------------------------------------------
# 6: surgery
# --------------------------------------------------------------------------

def random_keep(rng, width):
    return sorted(rng.choice(width, size=int(rng.integers(1, width + 1)), replace=False).tolist())


def test_c6_masked_forward():
    rng = np.random.default_rng(606)
    t0 = time.perf_counter()
    worst, counts = 0.0, {"conv": 0, "mfm": 0, "group": 0}
    while sum(counts.values()) < 102:
        kind = min(counts, key=counts.get)
        if kind == "group":
            net = random_group_network(rng)
            groups = pn.group_layers(net)
            names = list(groups)
            g = names[int(rng.integers(len(names)))]
            width = net.layer(groups[g][1]).out_channels
            D = random_keep(rng, width)
            keep = np.isin(np.arange(width), D)
            masks = {groups[g][1]: keep}
            if names.index(g) + 1 < len(names):
                masks[groups[names[names.index(g) + 1]][0]] = keep
            out = pn.prune_group(net, g, D)
        else:
            net = random_network(rng, allow_mfm=kind == "mfm")
            if kind == "mfm":
                cands = [s for s in net.layers if s.kind == "MFM"]
            else:
                cands = [s for i, s in enumerate(net.layers) if s.kind == "Conv2D"
                         and not (i + 1 < len(net.layers) and net.layers[i + 1].kind == "MFM")]
            if not cands:
                continue
            spec = cands[int(rng.integers(len(cands)))]
            D = random_keep(rng, spec.out_channels)
            out = (pn.prune_mfm if kind == "mfm" else pn.prune_conv_pair)(net, spec.id, D)
            masks = {spec.id: np.isin(np.arange(spec.out_channels), D)}
        worst = max(worst, masked_mismatch(net, out, rng.normal(size=(3,) + net.input_shape), masks))
        counts[kind] += 1
    secs = time.perf_counter() - t0
    record(6, worst <= 1e-5 and secs < 300,
           f"{sum(counts.values())} triples {counts}, max deviation {worst:.1e} (≤ 1e-5), {secs:.1f}s")


# --------------------------------------------------------------------------
# 7, 9: end-to-end pipeline on a synthetic primary network
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def pipeline():
    """Identity network at 32 px, a held-out satellite set, and the pruned + finetuned yaw model."""
    t0 = time.perf_counter()
    ds = sf.render_dataset(sf.SynthSpec(n=960, size=32, seed=0, n_identities=32, identity_linked=("gender",)))
    net, _ = sf.make_primary_net(ds, "identity", epochs=30, seed=0, target=0.95)
    train_s = time.perf_counter() - t0
    sat = sf.render_dataset(sf.SynthSpec(n=800, size=32, seed=100))
    y = sat.labels["yaw"].astype(float)
    sp = pr.Split.make(len(sat), seed=0)
    fit = np.concatenate([sp.train, sp.val])
    trunc, _ = pn.select_truncation_layer(net, sat.x[fit], y[fit], seed=0)
    fm = extract_gap(net, sat.x, trunc)
    W, b = pr.least_squares(fm.X[sp.train], y[sp.train, None])
    probe_rmse = float(np.sqrt(np.mean((fm.X[sp.test] @ W[:, 0] + b[0] - y[sp.test]) ** 2)))
    plan, _ = pn.make_plan(net, sat.x, y, trunc, 0.01, seed=0, split=(sp.train, sp.val))
    pruned, before, after = pn.build_pruned_network(net, plan)
    cfg = engine.TrainConfig(lr=0.001, epochs=15, batch_size=32, seed=0, optimizer="adam")
    tuned, _ = pn.finetune(pruned, sat.x[sp.train], y[sp.train], (sat.x[sp.val], y[sp.val]), cfg)
    return {"net": net, "sat": sat, "trunc": trunc, "plan": plan, "tuned": tuned, "after": after,
            "probe_rmse": probe_rmse, "rmse": pn.rmse(tuned, sat.x[sp.test], y[sp.test]),
            "train_s": train_s, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_c7_end_to_end(pipeline):
    p = pipeline
    a = p["after"]
    ok = (a.param_reduction >= 0.5 and a.flop_reduction >= 0.3
          and p["rmse"] <= 1.1 * p["probe_rmse"] and p["seconds"] < 1800)
    knees = {k: v["nnz"] for k, v in p["plan"].knees.items()}
    record(7, ok, f"yaw, truncation {p['trunc']}, knees {knees}: params -{100 * a.param_reduction:.1f}% (≥ 50), "
                  f"FLOPs -{100 * a.flop_reduction:.1f}% (≥ 30), test RMSE {p['rmse']:.2f} vs unpruned probe "
                  f"{p['probe_rmse']:.2f} (≤ 1.1×), {p['seconds']:.0f}s incl. {p['train_s']:.0f}s training")


@pytest.mark.slow
def test_c9_timing(pipeline):
    net, sat = pipeline["net"], pipeline["sat"]
    split = pr.Split.make(len(sat), seed=0)
    task = sf.task_spec("gender")
    layer, _, _ = pr.select_layer(net, sat.x, sat.labels, task, archs.tap_layers(net), split)
    tr = pr.probe_timing(net, layer, sat.x, sat.labels["gender"], seed=0)
    t_full = pn.inference_time(net)
    t_pruned = pn.inference_time(pipeline["tuned"])
    ok = tr.ratio > 5 and tr.finetune_accuracy >= tr.probe_accuracy - 0.05 and t_pruned < t_full
    record(9, ok, f"gender at {layer}: probe {tr.probe_seconds:.2f}s (acc {tr.probe_accuracy:.3f}) vs head finetune "
                  f"{tr.finetune_seconds:.2f}s (acc {tr.finetune_accuracy:.3f}, {tr.epochs} epochs), "
                  f"ratio {tr.ratio:.1f}× (> 5); inference {1e3 * t_full:.2f} ms -> {1e3 * t_pruned:.2f} ms")


# --------------------------------------------------------------------------
# 8: transfer-matrix sanity
# --------------------------------------------------------------------------

SATELLITE_TASKS = ("gender", "accessory", "age", "yaw", "emotion")


def best_layer_accuracy(net, sat, tasks, split):
    """Test accuracy per task at the tap with the best validation accuracy (deeper wins ties)."""
    best = {}
    for layer in archs.tap_layers(net):
        fm = extract_gap(net, sat.x, layer, targets=sat.labels)
        for name in tasks:
            m = pr.fit_probe(fm, sf.task_spec(name), split)
            if name not in best or m.diagnostics["acc_val"] >= best[name][0]:
                best[name] = (m.diagnostics["acc_val"], m.diagnostics["acc_test"])
    return {k: v[1] for k, v in best.items()}


@pytest.mark.slow
def test_c8_transfer_sanity():
    gaps = {t: [] for t in SATELLITE_TASKS}
    for seed in range(10):
        ds = sf.render_dataset(sf.SynthSpec(n=960, size=24, seed=seed, n_identities=32,
                                            identity_linked=("gender",)))
        sat = sf.render_dataset(sf.SynthSpec(n=800, size=24, seed=100 + seed))
        split = pr.Split.make(len(sat), seed=seed)
        trained, _ = sf.make_primary_net(ds, "identity", epochs=30, seed=seed)
        random, _ = sf.make_primary_net(ds, "identity", untrained=True, seed=seed)
        t = best_layer_accuracy(trained, sat, SATELLITE_TASKS, split)
        r = best_layer_accuracy(random, sat, SATELLITE_TASKS, split)
        for k in SATELLITE_TASKS:
            gaps[k].append(t[k] - r[k])
    mean_gap = {k: float(np.mean(v)) for k, v in gaps.items()}

    pair = {"corr": [], "indep": []}
    for seed in range(10):
        for name, corr in (("corr", {"gender,accessory": 0.8}), ("indep", {})):
            ds = sf.render_dataset(sf.SynthSpec(n=960, size=24, seed=seed, correlations=corr))
            sat = sf.render_dataset(sf.SynthSpec(n=800, size=24, seed=100 + seed, correlations=corr))
            net = archs.build_net("vgg", (1, 24, 24), n_out=2, seed=seed)
            cfg = engine.TrainConfig(lr=0.003, epochs=3, batch_size=16, seed=seed, loss="xent", optimizer="adam")
            net, _ = engine.train_sgd(net, ds.x, ds.labels["gender"].astype(int), cfg)
            split = pr.Split.make(len(sat), seed=seed)
            pair[name].append(best_layer_accuracy(net, sat, ("accessory",), split)["accessory"])
    corr_acc, indep_acc = float(np.mean(pair["corr"])), float(np.mean(pair["indep"]))
    ok = all(g > 0 for g in mean_gap.values()) and corr_acc > indep_acc
    gap_txt = ", ".join(f"{k} {v:+.3f}" for k, v in mean_gap.items())
    record(8, ok, f"trained - random mean test accuracy over 10 seeds: {gap_txt} (all > 0); "
                  f"accessory from a gender network, corr 0.8 {corr_acc:.3f} vs independent {indep_acc:.3f}")


# --------------------------------------------------------------------------
# 10: serialization
# --------------------------------------------------------------------------

def test_c10_serialization(tmp_path):
    rng = np.random.default_rng(1010)
    mismatches = 0
    for i in range(1000):
        net = random_network(rng) if i % 2 else random_group_network(rng)
        path = tmp_path / "m.pkir"
        netir.save_model(net, path)
        back = netir.load_model(path)
        mismatches += not back.equals(net) or back.metadata != net.metadata
    netir.save_model(archs.build_net("vgg", (1, 16, 16), n_out=2), tmp_path / "good")
    good = (tmp_path / "good").read_bytes()
    corpus = [
        (b"NOPE" + good[4:], MalformedHeaderError),
        (good[:20], MalformedHeaderError),
        (good.replace(b"{", b"[", 1), MalformedHeaderError),
        (good.replace(b'"layers"', b'"lay_rs"', 1), MalformedHeaderError),
        (good[:-9], BlobLengthError),
        (good + b"\0\0\0\0", BlobLengthError),
        (b"PKIR9" + good[5:], UnsupportedVersionError),
        (b"", MalformedHeaderError),
    ]
    head = {"layers": [netir.conv("c", 1, 2, 3).to_dict()], "input_shape": [1, 6, 6], "metadata": {}}
    netir.write_container(tmp_path / "shape", "model", head, {"c.weight": np.zeros((2, 1, 2, 2), np.float32),
                                                             "c.bias": np.zeros(2, np.float32)})
    corpus.append(((tmp_path / "shape").read_bytes(), ShapeMismatchError))
    wrong = []
    for j, (data, err) in enumerate(corpus):
        (tmp_path / f"bad{j}").write_bytes(data)
        try:
            netir.load_model(tmp_path / f"bad{j}")
            wrong.append((j, "accepted"))
        except err:
            pass
        except Exception as exc:  # noqa: BLE001 - reporting the wrong class is the point
            wrong.append((j, type(exc).__name__))
    record(10, mismatches == 0 and not wrong,
           f"1000 round trips, {mismatches} non-identical; {len(corpus)} malformed files, wrong classes: {wrong}")
