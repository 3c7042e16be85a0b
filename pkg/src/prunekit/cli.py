"""Command-line entry point: one subcommand per pipeline step.

Every command writes into an output directory and leaves a ``manifest.json``
there recording the resolved config, its hash, the input/output hashes and the
tool version.  Exit codes: 0 success, 2 configuration error, 3 unusable
input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, engine, features, lassopath, netir, plotting, probe, pruner
from . import synthfaces as sf
from .archs import tap_layers

log = logging.getLogger("prunekit")

EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 2, 3, 4
DEFAULT_GAMMAS = lassopath.DEFAULT_GAMMAS


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(path) -> str:
    p = Path(path)
    if p.is_dir():
        if (p / "labels.csv").exists():
            return sf.dataset_digest(p)
        h = hashlib.sha256()
        for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
            h.update(str(f.relative_to(p)).encode() + b"\0" + sha256_file(f).encode())
        return h.hexdigest()
    return sha256_file(p)


def _config(args) -> dict:
    skip = {"func", "threads", "verbose", "out"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def write_manifest(out: Path, args, inputs: dict, argv) -> dict:
    config = _config(args)
    blob = json.dumps(config, sort_keys=True).encode()
    outputs = {str(f.relative_to(out)): sha256_file(f)
               for f in sorted(out.rglob("*")) if f.is_file() and f.name != "manifest.json"}
    manifest = {"tool": "prunekit", "version": __version__, "command": args.command, "argv": list(argv),
                "config": config, "config_hash": hashlib.sha256(blob).hexdigest(),
                "inputs": {k: _digest(v) for k, v in inputs.items()}, "outputs": outputs}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_model(path):
    if not Path(path).is_file():
        raise InputError(f"model file {path} not found")
    return netir.load_model(path)


def _load_data(path):
    if not (Path(path) / "labels.csv").is_file():
        raise InputError(f"{path} is not a dataset directory (no labels.csv)")
    return sf.load_dataset(path)


def _task(name, ds=None) -> probe.TaskSpec:
    n_id = None
    if ds is not None and name == "identity":
        n_id = sf.class_labels(ds, "identity")[1]
    try:
        return sf.task_spec(name, n_id)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_layer(net, layer):
    if layer not in net.ids:
        raise ConfigError(f"layer {layer!r} not in network; taps are {', '.join(tap_layers(net))}")
    try:
        features.resolve_tap(net, layer)
    except features.NotAConvLayerError as exc:
        raise ConfigError(str(exc)) from None


def _split(args, n) -> probe.Split:
    try:
        return probe.Split.make(n, tuple(args.split), args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _regression_target(ds, task) -> np.ndarray:
    if task not in ds.labels:
        raise ConfigError(f"dataset has no column {task!r}")
    return np.asarray(ds.labels[task], dtype=np.float64)


def _json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args):
    corr = {}
    for item in args.corr:
        try:
            pair, r = item.split("=")
            corr[pair] = float(r)
        except ValueError:
            raise ConfigError(f"--corr expects a,b=r, got {item!r}") from None
    try:
        spec = sf.SynthSpec(seed=args.seed, size=args.size, n=args.n, n_identities=args.identities,
                            correlations=corr, identity_linked=tuple(args.linked), pose_grid=args.pose_grid,
                            noise=args.noise, accessory_strength=args.accessory_strength)
        sf.sample_attributes(spec) if corr else None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _outdir(args)
    ds = sf.generate(spec, out)
    log.info("wrote %d images to %s", len(ds), out)
    return {}


def cmd_train(args):
    ds = _load_data(args.data)
    if args.task not in ("identity",) + sf.ATTRIBUTES:
        raise ConfigError(f"unknown primary task {args.task!r}")
    out = _outdir(args)
    net, hist = sf.make_primary_net(ds, args.task, args.arch, seed=args.seed, epochs=args.epochs, lr=args.lr,
                                    batch_size=args.batch_size, target=args.target,
                                    optimizer=args.optimizer, untrained=args.untrained)
    netir.save_model(net, out / "model.pkir")
    if hist:
        engine.write_history(hist, out / "history.csv")
        plotting.history(hist, out / "history.png", f"{args.arch} on {args.task}")
    return {"data": args.data}


def cmd_probe(args):
    net, ds = _load_model(args.model), _load_data(args.data)
    task = _task(args.task, ds)
    layers = tap_layers(net) if args.layer == "all" else [args.layer]
    for l in layers:
        _check_layer(net, l)
    out = _outdir(args)
    split = _split(args, len(ds))
    rows, best = [], None
    for lid in layers:
        fm = features.extract_gap(net, ds.x, lid, targets=ds.labels)
        m = probe.fit_probe(fm, task, split)
        d = m.diagnostics
        rows.append({"layer": lid, "depth": net.index(lid), "rmse_train": d["rmse_train"],
                     "rmse_heldout": d["rmse_val"], "acc_val": d["acc_val"], "acc_test": d.get("acc_test")})
        if best is None or d["acc_val"] >= best.diagnostics["acc_val"]:
            best = m
    best.save(out / "probe.bin")
    _write_rows(out / "layers.csv", rows)
    _json(out / "metrics.json", {"task": task.to_dict(), "best_layer": best.layer,
                                 "diagnostics": best.diagnostics, "layers": rows})
    if len(rows) > 1:
        plotting.layer_probes(rows, out / "layers.png", f"{args.task} probes")
    if args.timing:
        y = probe.true_labels(task, features.extract_gap(net, ds.x, best.layer, targets=ds.labels))
        t = probe.probe_timing(net, best.layer, ds.x, y, seed=args.seed, fractions=tuple(args.split))
        _json(out / "timing.json", t.to_dict())
    print(f"{args.task}: best layer {best.layer}, validation accuracy {best.diagnostics['acc_val']:.4f}")
    return {"model": args.model, "data": args.data}


def cmd_matrix(args):
    ds = _load_data(args.data)
    nets = {}
    for path in args.models:
        net = _load_model(path)
        name = Path(path).parent.name if Path(path).name == "model.pkir" else Path(path).stem
        nets[name] = net
    tasks = [_task(t, ds) for t in args.tasks]
    if args.layer != "best":
        for net in nets.values():
            _check_layer(net, args.layer)
    out = _outdir(args)
    tm, chosen = probe.network_transfer_matrix(nets, ds.x, ds.labels, tasks, args.layer, seed=args.seed,
                                               fractions=tuple(args.split))
    tm.write_csv(out / "matrix.csv")
    (out / "matrix.json").write_text(tm.to_json())
    _json(out / "layers.json", {f"{p}/{t}": l for (p, t), l in chosen.items()})
    plotting.transfer_heatmap(tm, out / "matrix.png")
    return {**{f"model{i}": p for i, p in enumerate(args.models)}, "data": args.data}


def cmd_correlate(args):
    net, ds = _load_model(args.model), _load_data(args.data)
    _check_layer(net, args.layer)
    out = _outdir(args)
    attr = _regression_target(ds, args.attribute)
    R = features.filter_norms(net, ds.x, args.layer)
    c = features.correlate_attribute(R, attr)
    _write_rows(out / "correlations.csv", [{"filter": j, "corr": float(v), "degenerate": bool(d)}
                                           for j, (v, d) in enumerate(zip(c.coef, c.degenerate))])
    plotting.filter_correlations(c.coef, out / "correlations.png", args.attribute, args.layer)
    return {"model": args.model, "data": args.data}


def _curve_inputs(args):
    """Training and held-out feature rows plus targets, from a network or a features file."""
    if args.features:
        if not Path(args.features).is_file():
            raise InputError(f"features file {args.features} not found")
        fm = features.read_csv(args.features) if args.features.endswith(".csv") \
            else features.load_features(args.features)
        if args.target not in fm.targets:
            raise ConfigError(f"features have no target column {args.target!r}")
        y = np.asarray(fm.targets[args.target], dtype=np.float64)
        tr, ho = features.split_indices(fm.n, (0.75, 0.25), args.seed)
        return fm, y, (tr, ho), {"features": args.features}
    if not (args.model and args.data and args.layer):
        raise ConfigError("give --features with --target, or --model, --data and --layer")
    net, ds = _load_model(args.model), _load_data(args.data)
    _check_layer(net, args.layer)
    y = _regression_target(ds, args.target)
    fm = features.extract_gap(net, ds.x, args.layer)
    sp = _split(args, len(ds))
    return fm, y, (sp.train, sp.val), {"model": args.model, "data": args.data}


def cmd_curve(args):
    fm, y, (tr, ho), inputs = _curve_inputs(args)
    out = _outdir(args)
    curve = lassopath.curve_from_features(fm.X[tr], y[tr], fm.X[ho], y[ho], fm.layer, fm.filter_ids,
                                          args.count, args.ratio, tuple(args.gamma))
    curve.save(out / "curve.bin")
    curve.write_csv(out / "curve.csv")
    (out / "knees.json").write_text(curve.knees_json())
    plotting.characteristic_curve(curve, out / "curve.png")
    return inputs


def cmd_knee(args):
    if not Path(args.curve).is_file():
        raise InputError(f"curve file {args.curve} not found")
    curve = lassopath.CharacteristicCurve.load(args.curve)
    out = _outdir(args)
    curve.knees.clear()
    for g in args.gamma:
        try:
            kp = lassopath.kneepoint(curve, g)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        print(f"gamma={g:g}: knee at nnz={kp.nnz}, rmse={kp.rmse:.6g}" + (" (flat curve)" if kp.flat else ""))
    (out / "knees.json").write_text(curve.knees_json())
    plotting.characteristic_curve(curve, out / "knees.png")
    return {"curve": args.curve}


def cmd_prune(args):
    net = _load_model(args.model)
    out = _outdir(args)
    inputs = {"model": args.model}
    if args.keep_all or args.plan:
        if args.plan:
            if not Path(args.plan).is_file():
                raise InputError(f"plan file {args.plan} not found")
            plan = pruner.PrunePlan.load(args.plan)
            inputs["plan"] = args.plan
        else:
            plan = pruner.keep_all_plan()
    else:
        if not (args.data and args.task):
            raise ConfigError("prune needs --data and --task unless --plan or --keep-all is given")
        ds = _load_data(args.data)
        inputs["data"] = args.data
        y = _regression_target(ds, args.task)
        sp = _split(args, len(ds))
        if args.truncation == "auto":
            idx = np.concatenate([sp.train, sp.val])
            trunc, table = pruner.select_truncation_layer(net, ds.x[idx], y[idx], seed=args.seed)
            _write_rows(out / "layers.csv", table)
            plotting.layer_probes(table, out / "layers.png", f"{args.task} probe RMSE per layer")
        else:
            _check_layer(net, args.truncation)
            trunc = args.truncation
        log.info("truncating at %s", trunc)
        plan, curves = pruner.make_plan(net, ds.x, y, trunc, args.gamma, seed=args.seed,
                                        split=(sp.train, sp.val), count=args.count, ratio=args.ratio)
        (out / "curves").mkdir(exist_ok=True)
        for lid, c in curves.items():
            c.write_csv(out / "curves" / f"{lid}.csv")
            plotting.characteristic_curve(c, out / "curves" / f"{lid}.png")
    plan.save(out / "plan.json")
    try:
        pruned, before, after = pruner.build_pruned_network(net, plan)
    except pruner.PlanMismatchError as exc:
        raise InputError(str(exc)) from None
    netir.save_model(pruned, out / "model.pkir")
    _json(out / "counts.json", {"before": before.to_dict(), "after": after.to_dict()})
    print(f"parameters {before.total_params} -> {after.total_params}, "
          f"FLOPs {before.total_flops} -> {after.total_flops}")
    return inputs


def cmd_finetune(args):
    net, ds = _load_model(args.model), _load_data(args.data)
    if pruner.HEAD not in net.ids:
        raise InputError("finetune expects a truncated network with a regression head")
    y = _regression_target(ds, args.task)
    sp = _split(args, len(ds))
    out = _outdir(args)
    if args.refit_head:
        net = pruner.refit_head(net, ds.x[sp.train], y[sp.train])
    cfg = engine.TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs,
                             batch_size=args.batch_size, seed=args.seed, optimizer=args.optimizer)
    tuned, hist = pruner.finetune(net, ds.x[sp.train], y[sp.train], (ds.x[sp.val], y[sp.val]), cfg)
    netir.save_model(tuned, out / "model.pkir")
    engine.write_history(hist, out / "history.csv")
    plotting.history(hist, out / "history.png", f"finetune on {args.task}")
    print(f"validation RMSE {pruner.rmse(net, ds.x[sp.val], y[sp.val]):.4f} -> "
          f"{pruner.rmse(tuned, ds.x[sp.val], y[sp.val]):.4f}")
    return {"model": args.model, "data": args.data}


def cmd_report(args):
    original, pruned, ds = _load_model(args.original), _load_model(args.pruned), _load_data(args.data)
    trunc = pruned.metadata.get("truncated_at")
    if trunc is None or trunc not in original.ids:
        raise InputError("pruned model records no truncation layer of the original network")
    y = _regression_target(ds, args.task)
    sp = _split(args, len(ds))
    out = _outdir(args)
    # the unpruned reference is the least-squares probe on the same layer of the original
    fm = features.extract_gap(original, ds.x, trunc)
    W, b = probe.least_squares(fm.X[sp.train], y[sp.train, None])
    rmse_before = float(np.sqrt(np.mean((fm.X[sp.test] @ W[:, 0] + b[0] - y[sp.test]) ** 2)))
    rmse_after = pruner.rmse(pruned, ds.x[sp.test], y[sp.test])
    timing = None
    if args.timing:
        timing = {"before": pruner.inference_time(original, runs=args.runs),
                  "after": pruner.inference_time(pruned, runs=args.runs)}
        plotting.inference_times([{**timing, "label": args.task}], out / "inference.png")
    rep = pruner.compression_report(netir.count(original), netir.count(pruned), rmse_before, rmse_after,
                                    timing, attribute=args.task, arch=args.arch or original.metadata.get("arch", ""))
    rep["truncation"] = trunc
    pruner.write_report([rep], out / "report.csv", out / "report.json")
    r = rep["row"]
    print(f"{args.task}: RMSE {rmse_before:.4f} (unpruned probe) -> {rmse_after:.4f}, "
          f"FLOP reduction {r['% FLOP reduction']:.2f}%, size reduction {r['% Size reduction']:.2f}%")
    return {"original": args.original, "pruned": args.pruned, "data": args.data}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _split_arg(p):
    p.add_argument("--split", type=float, nargs=3, default=list(probe.DEFAULT_FRACTIONS),
                   metavar=("TRAIN", "VAL", "TEST"), help="split fractions (default 0.5 0.25 0.25)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prunekit", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None,
                    help="cap on BLAS threads (default: $PRUNEKIT_THREADS, else unlimited)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"prunekit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--corr", action="append", default=[], metavar="A,B=R",
                   help="target correlation between two attributes (repeatable)")
    p.add_argument("--linked", nargs="*", default=[], help="attributes fixed per identity")
    p.add_argument("--pose-grid", action="store_true", help="identities × yaw in 15° steps")
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--accessory-strength", type=float, default=0.35)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a primary network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="identity")
    p.add_argument("--arch", choices=["vgg", "lightcnn"], default="vgg")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--target", type=float, default=0.9, help="training accuracy to reach")
    p.add_argument("--untrained", action="store_true", help="emit the seeded initialisation only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="fit linear probes on one layer or all layers")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--layer", default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", action="store_true", help="also time head-only finetuning to matched accuracy")
    _split_arg(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("matrix", help="transfer matrix of primary networks × satellite tasks")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", nargs="+", default=list(sf.ATTRIBUTES))
    p.add_argument("--layer", default="best", help="tap layer id, or 'best' by validation accuracy")
    p.add_argument("--out", required=True)
    _split_arg(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("correlate", help="per-filter correlation of activation norms with an attribute")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--attribute", default="yaw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("curve", help="characteristic curve of one layer")
    p.add_argument("--features", help="feature matrix (.csv or container) instead of model+data")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--layer")
    p.add_argument("--target", required=True, help="regression target column")
    p.add_argument("--gamma", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    p.add_argument("--count", type=int, default=lassopath.DEFAULT_COUNT)
    p.add_argument("--ratio", type=float, default=lassopath.DEFAULT_RATIO)
    p.add_argument("--out", required=True)
    _split_arg(p)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("knee", help="knee-points of a saved curve")
    p.add_argument("--curve", required=True)
    p.add_argument("--gamma", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_knee)

    p = sub.add_parser("prune", help="plan and apply task-specific pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--task")
    p.add_argument("--truncation", default="auto", help="layer id, or 'auto' for the best probe layer")
    p.add_argument("--gamma", type=float, default=0.01)
    p.add_argument("--count", type=int, default=lassopath.DEFAULT_COUNT)
    p.add_argument("--ratio", type=float, default=lassopath.DEFAULT_RATIO)
    p.add_argument("--plan", help="apply a saved plan instead of computing one")
    p.add_argument("--keep-all", action="store_true", help="apply the identity plan")
    p.add_argument("--out", required=True)
    _split_arg(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("finetune", help="finetune a pruned network on its regression task")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--refit-head", action="store_true", help="least-squares head refit before finetuning")
    p.add_argument("--out", required=True)
    _split_arg(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="compression table row for a pruned network")
    p.add_argument("--original", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--arch", default="")
    p.add_argument("--timing", action="store_true", help="measure single-image inference time")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", required=True)
    _split_arg(p)
    p.set_defaults(func=cmd_report)
    return ap


def _threads(args) -> int | None:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        return args.threads
    env = os.environ.get("PRUNEKIT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PRUNEKIT_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("PRUNEKIT_THREADS must be positive")
        return n
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        n = _threads(args)
        with threadpool_limits(limits=n):
            inputs = args.func(args)
        write_manifest(Path(args.out), args, inputs, argv)
    except ConfigError as exc:
        print(f"prunekit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError, netir.FormatError, netir.InvalidNetworkError,
            features.NotAConvLayerError, probe.DimensionMismatchError, probe.ConstantTargetError,
            probe.EmptySplitError, pruner.PlanMismatchError, json.JSONDecodeError) as exc:
        print(f"prunekit: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (engine.NumericalError, sf.ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"prunekit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
