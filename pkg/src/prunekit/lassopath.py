"""L1-regularised regression paths over filter features, and knee-point selection.

Objective for one penalty ``lam`` (intercept unpenalised)::

    1/(2N) * sum_i (y_i - b0 - x_i . beta)^2 + lam * sum_j |beta_j|

solved by cyclic coordinate descent with covariance updates and warm starts
along a geometric penalty schedule.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import netir
from .features import FeatureMatrix, Standardizer, extract_gap, split_indices

log = logging.getLogger(__name__)

DEFAULT_COUNT = 100
DEFAULT_RATIO = 1e4
DEFAULT_GAMMAS = (0.1, 0.01, 0.001)
# |z| within this relative margin of lam is treated as exactly lam (exact-duplicate columns)
_THRESHOLD_SLACK = 1e-12


@dataclass
class LassoFit:
    lam: float
    beta: np.ndarray
    intercept: float
    rmse_train: float
    rmse_heldout: float | None = None
    sweeps: int = 0
    converged: bool = True
    kkt: float = 0.0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta)

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.beta))

    def predict(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.beta


def soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def objective(X, y, intercept, beta, lam) -> float:
    r = np.asarray(y, np.float64) - intercept - np.asarray(X, np.float64) @ beta
    return float(r @ r / (2 * len(r)) + lam * np.abs(beta).sum())


def lambda_schedule(X, y, count: int = DEFAULT_COUNT, ratio: float = DEFAULT_RATIO) -> np.ndarray:
    """Descending geometric penalties from the smallest all-zero penalty down by ``ratio``."""
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    yc = y - y.mean()
    if not np.any(yc):
        raise ValueError("target has zero variance")
    if count < 1 or ratio < 1:
        raise ValueError("count must be ≥ 1 and ratio ≥ 1")
    Xc = X - X.mean(axis=0)
    lam_max = float(np.max(np.abs(Xc.T @ yc)) / len(y))
    if count == 1:
        return np.array([lam_max])
    return lam_max * ratio ** (-np.arange(count) / (count - 1))


def _gradient(Xc, yc, beta):
    return Xc.T @ (yc - Xc @ beta) / len(yc)


def kkt_violation(X, y, beta, lam) -> float:
    """Largest violation of the optimality conditions at ``beta`` (optimal intercept)."""
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    g = _gradient(X - X.mean(axis=0), y - y.mean(), beta)
    on = beta != 0
    v_on = np.abs(g[on] - lam * np.sign(beta[on]))
    v_off = np.maximum(np.abs(g[~on]) - lam, 0.0)
    return float(max(v_on.max(initial=0.0), v_off.max(initial=0.0)))


_POLISH_EVERY = 50


def _first_of_duplicates(X) -> list[int]:
    """Column indices to optimise: later bitwise copies of a column stay at zero."""
    _, first = np.unique(X, axis=1, return_index=True)
    return sorted(int(i) for i in first)


def _cd(G, c, lam, beta, coords):
    """One sweep over ``coords``; returns max absolute coefficient change."""
    q = G @ beta
    maxd = 0.0
    for j in coords:
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        z = c[j] - q[j] + gjj * old
        if abs(abs(z) - lam) <= _THRESHOLD_SLACK * max(lam, abs(z)):
            new = 0.0
        else:
            new = soft_threshold(z, lam) / gjj
        d = new - old
        if d != 0.0:
            beta[j] = new
            q += G[:, j] * d
            maxd = max(maxd, abs(d))
    return maxd


def _kkt(G, c, lam, beta) -> float:
    grad = c - G @ beta
    on = beta != 0
    return max(np.abs(grad[on] - lam * np.sign(beta[on])).max(initial=0.0),
               np.maximum(np.abs(grad[~on]) - lam, 0.0).max(initial=0.0))


def _polish(G, c, lam, beta, max_iter=None):
    """Feature-sign active-set search started from ``beta``; None if it fails to finish.

    On collinear designs coordinate descent finds nearly the right support long
    before the coefficients settle.  The active-set search solves the
    stationarity equations G_AA β_A = c_A − λ·θ_A exactly, line-searches across
    sign changes and activates the worst KKT violator, which terminates after
    finitely many steps.
    """
    p = len(beta)
    b = beta.copy()
    active, theta = b != 0, np.sign(b)

    def f(v):
        return 0.5 * v @ G @ v - c @ v + lam * np.abs(v).sum()

    for _ in range(max_iter or 4 * p + 10):
        A = np.flatnonzero(active)
        if len(A):
            try:
                x = np.linalg.solve(G[np.ix_(A, A)], c[A] - lam * theta[A])
            except np.linalg.LinAlgError:
                return None
            consistent = bool(np.all(np.sign(x) == theta[A]))
            cur = b[A]
            pts = [x]
            dlt = x - cur
            with np.errstate(divide="ignore", invalid="ignore"):
                ts = -cur / dlt
            for t in ts[(ts > 0) & (ts < 1)]:
                q = cur + t * dlt
                q[np.abs(q) <= 1e-14 * np.abs(cur).max()] = 0.0
                pts.append(q)
            vals = []
            for q in pts:
                v = b.copy()
                v[A] = q
                vals.append((f(v), v))
            b = min(vals, key=lambda t: t[0])[1]
            active, theta = b != 0, np.sign(b)
            if not consistent:
                continue
        grad = c - G @ b
        viol = np.where(active, -np.inf, np.abs(grad) - lam)
        j = int(np.argmax(viol))
        if viol[j] <= 0:
            return b
        active[j], theta[j] = True, np.sign(grad[j])
    return None


def fit_lasso(X, y, lam: float, warm_start=None, *, tol: float = 1e-7, max_sweeps: int = 10_000,
              kkt_tol: float = 1e-9, _gram=None, _coords=None) -> LassoFit:
    """Coordinate descent until the max coefficient change in a full sweep is < ``tol``.

    Sweeps continue (with ``tol`` tightened) while the KKT violation exceeds
    ``kkt_tol``.  Every few sweeps the active set is polished by an exact solve,
    which is kept only when it satisfies the KKT conditions.  A fit that runs
    out of sweeps comes back with ``converged=False``.
    """
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    n, p = X.shape
    if lam < 0:
        raise ValueError("penalty must be non-negative")
    xm, ym = X.mean(axis=0), y.mean()
    if _gram is None:
        Xc = X - xm
        G, c = Xc.T @ Xc / n, Xc.T @ (y - ym) / n
    else:
        G, c = _gram
    beta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=np.float64)
    all_coords = _first_of_duplicates(X) if _coords is None else _coords
    sweeps, cur_tol, converged, kkt = 0, tol, False, math.inf

    def try_polish():
        cand = _polish(G, c, lam, beta)
        if cand is not None:
            k = _kkt(G, c, lam, cand)
            if k <= kkt_tol:
                return cand, k
        return None

    while sweeps < max_sweeps:
        d = _cd(G, c, lam, beta, all_coords)
        sweeps += 1
        if d < cur_tol:
            kkt = _kkt(G, c, lam, beta)
            if kkt <= kkt_tol:
                converged = True
                break
            cur_tol = max(cur_tol * 0.1, 1e-15)
            continue
        active = np.flatnonzero(beta)
        inner = 0
        while sweeps < max_sweeps and len(active):
            d = _cd(G, c, lam, beta, active)
            sweeps += 1
            inner += 1
            if d < cur_tol:
                break
            if inner % _POLISH_EVERY == 0 and (hit := try_polish()) is not None:
                beta, kkt = hit
                converged = True
                break
        if converged:
            break
        if sweeps % _POLISH_EVERY == 0 and (hit := try_polish()) is not None:
            beta, kkt = hit
            converged = True
            break
    if not converged:
        log.warning("lasso at lam=%.3g stopped after %d sweeps (kkt %.2e)", lam, sweeps, kkt)
    intercept = float(ym - xm @ beta)
    r = y - intercept - X @ beta
    return LassoFit(float(lam), beta, intercept, float(np.sqrt(r @ r / n)), sweeps=sweeps,
                    converged=converged, kkt=float(kkt))


def lasso_path(X, y, lambdas, X_held=None, y_held=None, **kw) -> list[LassoFit]:
    """Warm-started fits for each penalty in ``lambdas`` (expected descending)."""
    X = np.asarray(X, np.float64)
    y = np.asarray(y, np.float64)
    Xc = X - X.mean(axis=0)
    gram = (Xc.T @ Xc / len(y), Xc.T @ (y - y.mean()) / len(y))
    coords = _first_of_duplicates(X)
    fits, beta = [], None
    for lam in lambdas:
        fit = fit_lasso(X, y, float(lam), beta, _gram=gram, _coords=coords, **kw)
        if X_held is not None:
            r = np.asarray(y_held, np.float64) - fit.predict(X_held)
            fit.rmse_heldout = float(np.sqrt(r @ r / len(r)))
        fits.append(fit)
        beta = fit.beta
    return fits


# --------------------------------------------------------------------------
# characteristic curves and knee-points
# --------------------------------------------------------------------------

@dataclass
class KneePoint:
    gamma: float
    index: int
    lam: float
    nnz: int
    rmse: float
    support: list[int]
    flat: bool = False

    def to_dict(self):
        return {"gamma": self.gamma, "index": self.index, "lambda": self.lam, "nnz": self.nnz,
                "rmse": self.rmse, "support": list(self.support), "flat_curve": self.flat}


def knee_index(rmse, nnz, gamma: float) -> tuple[int, bool]:
    """Index of the minimum-support fit with ``rmse - min < gamma * (max - min)``.

    Ties on support size go to the earlier (larger-penalty) fit.  On a perfectly
    flat curve nothing satisfies the strict inequality; the first fit is
    returned with the flag set.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    m = np.asarray(rmse, dtype=np.float64)
    k = np.asarray(nnz)
    if len(m) == 0:
        raise ValueError("empty curve")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return 0, True
    ok = np.flatnonzero(m - lo < gamma * (hi - lo))
    best = ok[np.argmin(k[ok])]  # argmin returns the first, i.e. largest penalty
    return int(best), False


@dataclass
class CharacteristicCurve:
    layer: str
    fits: list[LassoFit]
    standardizer: Standardizer
    filter_ids: list[int]
    knees: dict[float, KneePoint] = field(default_factory=dict)

    @property
    def lambdas(self):
        return np.array([f.lam for f in self.fits])

    @property
    def nnz(self):
        return np.array([f.nnz for f in self.fits])

    @property
    def rmse(self):
        """Curve values used for knee-points: held-out RMSE when available."""
        return np.array([f.rmse_train if f.rmse_heldout is None else f.rmse_heldout for f in self.fits])

    def rmse_by_nnz(self) -> dict[int, float]:
        """Best curve RMSE for each support size on the path."""
        out: dict[int, float] = {}
        for k, m in zip(self.nnz, self.rmse):
            out[int(k)] = min(out.get(int(k), math.inf), float(m))
        return dict(sorted(out.items()))

    def head(self, index: int) -> tuple[np.ndarray, float]:
        """Fit ``index`` expressed on raw (unstandardised) features: weights and intercept."""
        f = self.fits[index]
        w = f.beta / self.standardizer.scale
        return w, float(f.intercept - w @ self.standardizer.mean)

    # -- persistence ---------------------------------------------------------
    def to_rows(self):
        return [{"lambda": f.lam, "nnz": f.nnz, "rmse_train": f.rmse_train,
                 "rmse_heldout": f.rmse_heldout, "converged": f.converged} for f in self.fits]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["lambda", "nnz", "rmse_train", "rmse_heldout", "converged"])
            w.writeheader()
            for row in self.to_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def knees_json(self) -> str:
        return json.dumps({"layer": self.layer,
                           "knees": [self.knees[g].to_dict() for g in sorted(self.knees, reverse=True)]},
                          indent=2, sort_keys=True)

    def save(self, path):
        t = {
            "lambda": self.lambdas, "beta": np.stack([f.beta for f in self.fits]),
            "intercept": np.array([f.intercept for f in self.fits]),
            "rmse_train": np.array([f.rmse_train for f in self.fits]),
            "rmse_heldout": np.array([np.nan if f.rmse_heldout is None else f.rmse_heldout
                                      for f in self.fits]),
            "sweeps": np.array([f.sweeps for f in self.fits], dtype=np.float64),
            "converged": np.array([f.converged for f in self.fits], dtype=np.float64),
            "kkt": np.array([f.kkt for f in self.fits]),
            "mean": self.standardizer.mean, "scale": self.standardizer.scale,
        }
        head = {"layer": self.layer, "filter_ids": self.filter_ids,
                "knees": [k.to_dict() for k in self.knees.values()]}
        netir.write_container(path, "curve", head, t)

    @classmethod
    def load(cls, path) -> "CharacteristicCurve":
        head, t = netir.read_container(path, kind="curve")
        fits = []
        for i in range(len(t["lambda"])):
            held = t["rmse_heldout"][i]
            fits.append(LassoFit(float(t["lambda"][i]), t["beta"][i].copy(), float(t["intercept"][i]),
                                 float(t["rmse_train"][i]), None if np.isnan(held) else float(held),
                                 int(t["sweeps"][i]), bool(t["converged"][i]), float(t["kkt"][i])))
        curve = cls(head["layer"], fits, Standardizer(t["mean"], t["scale"]), head["filter_ids"])
        for k in head["knees"]:
            curve.knees[k["gamma"]] = KneePoint(k["gamma"], k["index"], k["lambda"], k["nnz"],
                                                k["rmse"], k["support"], k["flat_curve"])
        return curve


def curve_from_features(X_train, y_train, X_held=None, y_held=None, layer: str = "",
                        filter_ids=None, count: int = DEFAULT_COUNT, ratio: float = DEFAULT_RATIO,
                        gammas=DEFAULT_GAMMAS, **kw) -> CharacteristicCurve:
    """Standardise with training statistics, run the path, attach knee-points."""
    std = Standardizer.fit(X_train)
    Z = std.transform(X_train)
    Zh = None if X_held is None else std.transform(X_held)
    lams = lambda_schedule(Z, y_train, count, ratio)
    fits = lasso_path(Z, y_train, lams, Zh, y_held, **kw)
    ids = list(range(Z.shape[1])) if filter_ids is None else list(filter_ids)
    curve = CharacteristicCurve(layer, fits, std, ids)
    for g in gammas:
        kneepoint(curve, g)
    return curve


def characteristic_curve(net, layer: str, images, y, *, split=None, seed: int = 0,
                         count: int = DEFAULT_COUNT, ratio: float = DEFAULT_RATIO,
                         gammas=DEFAULT_GAMMAS, features: FeatureMatrix | None = None) -> CharacteristicCurve:
    """Characteristic curve of one layer: held-out RMSE against support size along the path."""
    fm = features if features is not None else extract_gap(net, images, layer)
    y = np.asarray(y, dtype=np.float64)
    tr, ho = split if split is not None else split_indices(fm.n, (0.75, 0.25), seed)
    return curve_from_features(fm.X[tr], y[tr], fm.X[ho], y[ho], layer, fm.filter_ids,
                               count, ratio, gammas)


def kneepoint(curve: CharacteristicCurve, gamma: float) -> KneePoint:
    idx, flat = knee_index(curve.rmse, curve.nnz, gamma)
    f = curve.fits[idx]
    kp = KneePoint(float(gamma), idx, f.lam, f.nnz, float(curve.rmse[idx]),
                   [curve.filter_ids[j] for j in f.support], flat)
    curve.knees[float(gamma)] = kp
    return kp
