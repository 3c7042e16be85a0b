"""PNG renderings of the report data.  The CSV/JSON files stay the primary output."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def history(rows: Sequence[Mapping], path, title: str = "") -> None:
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    for split in sorted({r["split"] for r in rows}):
        sel = [r for r in rows if r["split"] == split]
        a.plot([r["epoch"] for r in sel], [r["loss"] for r in sel], marker="o", label=split)
        b.plot([r["epoch"] for r in sel], [r["metric"] for r in sel], marker="o", label=split)
    a.set_xlabel("epoch"), a.set_ylabel("loss"), b.set_xlabel("epoch"), b.set_ylabel("metric")
    a.legend()
    fig.suptitle(title)
    _save(fig, path)


def filter_correlations(coef, path, attribute: str = "yaw", layer: str = "") -> None:
    """Per-filter correlation with an attribute, sorted by magnitude."""
    coef = np.asarray(coef)
    order = np.argsort(-np.abs(coef))
    fig, ax = plt.subplots(figsize=(max(4, len(coef) * 0.12), 3))
    ax.bar(range(len(coef)), coef[order], color=np.where(coef[order] >= 0, "tab:red", "tab:blue"))
    ax.set_xticks(range(len(coef)), [str(i) for i in order], fontsize=6, rotation=90)
    ax.set_xlabel("filter"), ax.set_ylabel(f"corr with {attribute}"), ax.set_ylim(-1, 1)
    ax.set_title(layer)
    _save(fig, path)


def transfer_heatmap(tm, path) -> None:
    """Accuracy grid with the percentage reduction overlaid (darker is better)."""
    acc = np.asarray(tm.accuracy, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * len(tm.tasks) + 2, 0.6 * len(tm.primaries) + 1.5))
    im = ax.imshow(np.ma.masked_invalid(acc), cmap="Greys", vmin=0, vmax=1)
    for i in range(acc.shape[0]):
        for j in range(acc.shape[1]):
            if tm.absent[i, j]:
                txt = "absent"
            else:
                red = tm.reduction[i, j]
                txt = f"{acc[i, j]:.2f}" + ("" if math.isnan(red) else f"\n{red:+.0f}%")
            ax.text(j, i, txt, ha="center", va="center", fontsize=7,
                    color="white" if np.nan_to_num(acc[i, j]) > 0.5 else "black")
    ax.set_xticks(range(len(tm.tasks)), tm.tasks, rotation=30)
    ax.set_yticks(range(len(tm.primaries)), tm.primaries)
    ax.set_xlabel("satellite task"), ax.set_ylabel("primary network")
    fig.colorbar(im, ax=ax, label="accuracy")
    _save(fig, path)


def characteristic_curve(curve, path, title: str = "") -> None:
    """Held-out RMSE against support size with the knee-points marked."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.nnz, curve.rmse, ".-", color="0.3", label="path")
    for marker, (g, kp) in zip("os^vD", sorted(curve.knees.items(), reverse=True)):
        ax.plot([kp.nnz], [kp.rmse], marker, ms=9, label=f"knee γ={g:g} ({kp.nnz})")
    ax.set_xlabel("non-zero filters"), ax.set_ylabel("held-out RMSE")
    ax.set_title(title or curve.layer)
    ax.legend(fontsize=7)
    _save(fig, path)


def layer_probes(table: Sequence[Mapping], path, title: str = "") -> None:
    """Probe RMSE per candidate layer (which layer is best varies by task)."""
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(table)), 3))
    x = range(len(table))
    ax.plot(x, [r["rmse_heldout"] for r in table], "o-", label="held-out")
    ax.plot(x, [r["rmse_train"] for r in table], "s--", label="train")
    ax.set_xticks(list(x), [r["layer"] for r in table], rotation=45, fontsize=7)
    ax.set_ylabel("RMSE"), ax.set_title(title)
    ax.legend()
    _save(fig, path)


def inference_times(rows: Sequence[Mapping], path) -> None:
    """Single-image CPU time of unpruned vs pruned networks per task."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [1e3 * r["before"] for r in rows], 0.4, label="unpruned")
    ax.bar(x + 0.2, [1e3 * r["after"] for r in rows], 0.4, label="pruned")
    ax.set_xticks(x, [r.get("label", "") for r in rows])
    ax.set_ylabel("ms / image")
    ax.legend()
    _save(fig, path)
