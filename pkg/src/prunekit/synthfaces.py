"""Deterministic procedural face images with known latent attributes.

Each image is a grayscale ellipse head with eyes, nose and mouth.  Attributes
act on it as follows:

* identity: skin tone, hairline and hair tone, eye spacing, eyebrow tilt and
  an oriented texture grating;
* yaw in [−90°, 90°]: inner features slide sideways, the far eye shrinks, the
  nose points into the turn and the head is shaded towards the light;
* age in [0, 100]: blur grows and contrast drops;
* gender (0/1): head aspect ratio;
* emotion in [−1, 1]: mouth curvature (frown to smile);
* accessory (0/1): a glasses bar across the eyes.

Non-identity attributes are drawn through a Gaussian copula, so a target
Pearson correlation between any two of them can be requested.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from . import archs, engine
from .netir import NetworkIR

log = logging.getLogger(__name__)

ATTRIBUTES = ("gender", "age", "yaw", "emotion", "accessory")
BINARY = {"gender", "accessory"}
RANGES = {"age": (0.0, 100.0), "yaw": (-90.0, 90.0), "emotion": (-1.0, 1.0)}
BINS = {"yaw": 9, "age": 10, "emotion": 7}
POSE_GRID = tuple(range(-90, 91, 15))


class ConvergenceError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class SynthSpec:
    """Everything that determines a dataset; equal specs give identical bytes.

    ``correlations`` maps "a,b" attribute pairs to target Pearson correlations.
    ``identity_linked`` attributes are drawn once per identity instead of per
    image.  ``pose_grid`` replaces random sampling by every identity at every
    15° yaw step with the other attributes held neutral.
    """

    seed: int = 0
    size: int = 32
    n: int = 2000
    n_identities: int = 8
    correlations: dict = field(default_factory=dict)
    identity_linked: tuple[str, ...] = ()
    pose_grid: bool = False
    noise: float = 0.03
    accessory_strength: float = 0.35

    def __post_init__(self):
        object.__setattr__(self, "identity_linked", tuple(self.identity_linked))
        object.__setattr__(self, "correlations", {_pair_key(k): float(v) for k, v in self.correlations.items()})
        if self.size < 12:
            raise ValueError("image size must be at least 12 pixels")
        if self.n < 1 or self.n_identities < 1:
            raise ValueError("need at least one image and one identity")
        bad = set(self.identity_linked) - set(ATTRIBUTES)
        if bad:
            raise ValueError(f"unknown identity-linked attributes {sorted(bad)}")
        for k, v in self.correlations.items():
            a, b = k.split(",")
            if a not in ATTRIBUTES or b not in ATTRIBUTES or a == b:
                raise ValueError(f"bad correlation pair {k!r}")
            if not -1 < v < 1:
                raise ValueError(f"correlation for {k!r} must lie in (-1, 1)")
            if a in self.identity_linked or b in self.identity_linked:
                raise ValueError(f"{k!r}: identity-linked attributes cannot carry image-level correlations")

    @property
    def count(self) -> int:
        return self.n_identities * len(POSE_GRID) if self.pose_grid else self.n

    def to_dict(self):
        d = asdict(self)
        d["identity_linked"] = list(self.identity_linked)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "identity_linked": tuple(d.get("identity_linked", ()))})


def _pair_key(k) -> str:
    a, b = (k.split(",") if isinstance(k, str) else k)
    a, b = sorted((a.strip(), b.strip()))
    return f"{a},{b}"


# --------------------------------------------------------------------------
# attribute sampling
# --------------------------------------------------------------------------

def latent_correlation(a: str, b: str, rho: float) -> float:
    """Latent normal correlation giving Pearson ``rho`` between the two marginals.

    Binary marginals are thresholds at 0 and continuous ones are uniform through
    the normal CDF, so the forward maps are the orthant formulas
    binary-binary r = (2/π)·asin(ρ), uniform-uniform r = (6/π)·asin(ρ/2) and
    binary-uniform r = (2√3/π)·asin(ρ/√2); this inverts them.
    """
    kinds = {a in BINARY, b in BINARY}
    if kinds == {True}:
        lat = math.sin(math.pi * rho / 2)
    elif kinds == {False}:
        lat = 2 * math.sin(math.pi * rho / 6)
    else:
        lat = math.sqrt(2) * math.sin(math.pi * rho / (2 * math.sqrt(3)))
    if abs(lat) >= 1:
        raise ValueError(f"correlation {rho} between {a} and {b} is not attainable")
    return lat


def _marginal(name, z):
    if name in BINARY:
        return (z > 0).astype(np.float64)
    lo, hi = RANGES[name]
    return lo + (hi - lo) * norm.cdf(z)


def sample_attributes(spec: SynthSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 1])
    if spec.pose_grid:
        ident = np.repeat(np.arange(spec.n_identities), len(POSE_GRID))
        tone = np.random.default_rng([spec.seed, 2]).integers(0, 2, spec.n_identities)
        return {"identity": ident.astype(np.float64), "gender": tone[ident].astype(np.float64),
                "age": np.full(len(ident), 30.0), "yaw": np.tile(np.array(POSE_GRID, float), spec.n_identities),
                "emotion": np.zeros(len(ident)), "accessory": np.zeros(len(ident))}
    n = spec.n
    R = np.eye(len(ATTRIBUTES))
    for k, rho in spec.correlations.items():
        a, b = k.split(",")
        i, j = ATTRIBUTES.index(a), ATTRIBUTES.index(b)
        R[i, j] = R[j, i] = latent_correlation(a, b, rho)
    if np.linalg.eigvalsh(R).min() <= 0:
        raise ValueError("requested correlations are not jointly attainable")
    z = rng.standard_normal((n, len(ATTRIBUTES))) @ np.linalg.cholesky(R).T
    ident = rng.integers(0, spec.n_identities, n)
    zid = np.random.default_rng([spec.seed, 2]).standard_normal((spec.n_identities, len(ATTRIBUTES)))
    out = {"identity": ident.astype(np.float64)}
    for j, name in enumerate(ATTRIBUTES):
        col = zid[ident, j] if name in spec.identity_linked else z[:, j]
        out[name] = _marginal(name, col)
    return out


def bin_labels(attrs) -> dict[str, np.ndarray]:
    out = {}
    for name, k in BINS.items():
        lo, hi = RANGES[name]
        edges = np.linspace(lo, hi, k + 1)
        out[f"{name}_bin"] = np.searchsorted(edges[1:-1], attrs[name], side="left").astype(np.float64)
    return out


def bin_edges(name: str) -> tuple[float, ...]:
    lo, hi = RANGES[name]
    return tuple(np.linspace(lo, hi, BINS[name] + 1))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------

def _identity_traits(spec: SynthSpec):
    r = np.random.default_rng([spec.seed, 3])
    k = spec.n_identities
    return {"tone": r.uniform(0.5, 0.9, k), "eye_sep": r.uniform(0.24, 0.36, k),
            "freq": r.uniform(1.5, 4.0, k), "angle": r.uniform(0, math.pi, k), "phase": r.uniform(0, 2 * math.pi, k),
            "eye_y": r.uniform(-0.28, -0.14, k), "hairline": r.uniform(-0.75, -0.35, k),
            "hair": r.uniform(0.0, 0.35, k), "brow": r.uniform(-0.5, 0.5, k)}


def _soft(d, width):
    """Smooth step: 1 inside (d < 0), 0 outside."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render(spec: SynthSpec, attrs: dict, i: int, traits=None, rng=None) -> np.ndarray:
    """One image as uint8 H×W."""
    S = spec.size
    traits = traits or _identity_traits(spec)
    rng = rng or np.random.default_rng([spec.seed, 4, i])
    g = np.linspace(-1, 1, S)
    v, u = np.meshgrid(g, g, indexing="ij")
    px = 2.0 / S
    ident = int(attrs["identity"][i])
    yaw = math.radians(attrs["yaw"][i])
    s, c = math.sin(yaw), math.cos(yaw)
    b_ax = 0.82
    a_ax = b_ax * (0.70 if attrs["gender"][i] > 0.5 else 0.90)
    img = 0.2 + 0.05 * rng.standard_normal((S, S))
    head = _soft(np.sqrt((u / a_ax) ** 2 + (v / b_ax) ** 2) - 1.0, 0.04)
    th = traits["angle"][ident]
    grating = 0.1 * np.sin(traits["freq"][ident] * math.pi * (u * math.cos(th) + v * math.sin(th))
                            + traits["phase"][ident])
    skin = traits["tone"][ident] + grating + 0.18 * s * u / a_ax
    hair = head * _soft(v - traits["hairline"][ident], 0.03)
    img = img * (1 - head) + skin * head
    img = img * (1 - hair) + traits["hair"][ident] * hair
    dx = 0.45 * s * a_ax
    ey = traits["eye_y"][ident]
    sep = traits["eye_sep"][ident] * a_ax / 0.7 * (0.35 + 0.65 * c)
    for side in (-1, 1):
        near = 1.0 + 0.35 * side * s  # the eye on the side the face turns towards grows
        r = 0.085 * near
        ex = dx + side * sep
        eye = _soft(np.sqrt((u - ex) ** 2 + (v - ey) ** 2) - r, 0.5 * px)
        img = img * (1 - eye) + 0.05 * eye
        tilt = side * traits["brow"][ident]
        by = ey - 0.16 + tilt * (u - ex)
        brow = _soft(np.abs(v - by) - 0.03, 0.5 * px) * _soft(np.abs(u - ex) - 1.3 * r, 0.5 * px)
        img = img * (1 - 0.8 * brow) + 0.1 * 0.8 * brow
    # nose: a dark wedge from the bridge towards the turn direction
    t = np.clip(((u - dx) * s * 0.3 + (v - ey) * 0.35) / (0.3 ** 2 * s * s + 0.35 ** 2), 0, 1)
    nx, ny = dx + t * 0.3 * s, ey + t * 0.35
    nose = _soft(np.sqrt((u - nx) ** 2 + (v - ny) ** 2) - 0.035, 0.5 * px)
    img = img * (1 - 0.7 * nose) + 0.15 * 0.7 * nose
    # mouth: parabola whose curvature follows emotion
    w = 0.28 * (0.5 + 0.5 * c)
    k = float(attrs["emotion"][i])
    mu = (u - dx) / w
    curve_y = 0.42 - 0.14 * k * (1 - mu ** 2)
    mouth = _soft(np.abs(v - curve_y) - 0.035, 0.5 * px) * _soft(np.abs(mu) - 1.0, 0.05)
    img = img * (1 - mouth) + 0.1 * mouth
    if attrs["accessory"][i] > 0.5:
        a = spec.accessory_strength
        bar = _soft(np.abs(v - ey) - 0.03, 0.5 * px) * _soft(np.abs(u - dx) - (sep + 0.13), 0.5 * px)
        rims = sum(_soft(np.abs(np.sqrt((u - dx - sd * sep) ** 2 + (v - ey) ** 2) - 0.14) - 0.025, 0.5 * px)
                   for sd in (-1, 1))
        glasses = np.clip(bar + rims, 0, 1) * a
        img = img * (1 - glasses) + 0.02 * glasses
    age = float(attrs["age"][i]) / 100.0
    img = ndimage.gaussian_filter(img, 0.3 + 1.1 * age, mode="nearest")
    m = img.mean()
    img = m + (img - m) * (1.0 - 0.55 * age)
    img = img + spec.noise * rng.standard_normal((S, S))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


@dataclass
class Dataset:
    """Rendered images (uint8 n×H×W) and per-image attribute and bin columns."""

    pixels: np.ndarray
    labels: dict[str, np.ndarray]
    spec: SynthSpec | None = None

    def __len__(self):
        return len(self.pixels)

    @property
    def x(self) -> np.ndarray:
        """Network input: n×1×H×W float32 scaled to [−1, 1]."""
        return (self.pixels[:, None].astype(np.float32) / 127.5 - 1.0).astype(np.float32)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], {k: v[idx] for k, v in self.labels.items()}, self.spec)

    def target(self, task: str) -> np.ndarray:
        return self.labels[task]


def render_dataset(spec: SynthSpec) -> Dataset:
    attrs = sample_attributes(spec)
    traits = _identity_traits(spec)
    pix = np.stack([render(spec, attrs, i, traits) for i in range(spec.count)])
    return Dataset(pix, {**attrs, **bin_labels(attrs)}, spec)


# --------------------------------------------------------------------------
# files: PGM images, labels CSV, spec JSON
# --------------------------------------------------------------------------

LABEL_COLUMNS = ("identity",) + ATTRIBUTES + tuple(f"{k}_bin" for k in BINS)


def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    body = data[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated image data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def generate(spec: SynthSpec, out_dir) -> Dataset:
    """Render ``spec`` into ``out_dir`` (images/, labels.csv, spec.json)."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    ds = render_dataset(spec)
    names = [f"{i:06d}.pgm" for i in range(len(ds))]
    for name, img in zip(names, ds.pixels):
        write_pgm(out / "images" / name, img)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("filename",) + LABEL_COLUMNS)
        for i, name in enumerate(names):
            w.writerow([name] + [_fmt(ds.labels[c][i]) for c in LABEL_COLUMNS])
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    return ds


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "labels.csv").is_file():
        raise FileNotFoundError(f"{root} has no labels.csv")
    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{root}/labels.csv is empty")
    pix = np.stack([read_pgm(root / "images" / r["filename"]) for r in rows])
    labels = {c: np.array([float(r[c]) for r in rows]) for c in rows[0] if c != "filename"}
    spec = None
    if (root / "spec.json").is_file():
        spec = SynthSpec.from_dict(json.loads((root / "spec.json").read_text()))
    return Dataset(pix, labels, spec)


def dataset_digest(path) -> str:
    """SHA-256 over every file of a generated dataset, in name order."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# primary networks
# --------------------------------------------------------------------------

def class_labels(ds: Dataset, task: str) -> tuple[np.ndarray, int]:
    """Integer class labels and class count for a primary classification task."""
    if task == "identity":
        n = ds.spec.n_identities if ds.spec else int(ds.labels["identity"].max()) + 1
        return ds.labels["identity"].astype(np.int64), n
    if task in BINARY:
        return ds.labels[task].astype(np.int64), 2
    if task in BINS:
        return ds.labels[f"{task}_bin"].astype(np.int64), BINS[task]
    raise ValueError(f"unknown primary task {task!r}")


def make_primary_net(ds: Dataset, task: str = "identity", arch: str = "vgg", *, seed: int = 0,
                     epochs: int = 30, lr: float = 0.003, batch_size: int = 16, target: float = 0.9,
                     optimizer: str = "adam",
                     untrained: bool = False, **arch_kw) -> tuple[NetworkIR, list[dict]]:
    """Train a toy network on ``task`` until training accuracy reaches ``target``.

    ``untrained`` returns the seeded initialisation without any step, for
    control comparisons.  Raises :class:`ConvergenceError` (carrying the
    history) when the target is not met within ``epochs``.
    """
    y, k = class_labels(ds, task)
    S = ds.pixels.shape[1]
    net = archs.build_net(arch, (1, S, S), n_out=k, seed=seed, **arch_kw)
    meta = {**net.metadata, "primary_task": task, "trained": not untrained, "seed": seed}
    net = net.evolve(metadata=meta)
    if untrained:
        return net, []
    cfg = engine.TrainConfig(lr=lr, momentum=0.9, epochs=epochs, batch_size=batch_size, seed=seed,
                             loss="xent", target_metric=target, optimizer=optimizer)
    trained, hist = engine.train_sgd(net, ds.x, y, cfg)
    acc = max(h["metric"] for h in hist if h["split"] == "train")
    if acc < target:
        raise ConvergenceError(f"{task} training reached accuracy {acc:.3f} < {target}", hist)
    return trained, hist


def task_spec(name: str, n_identities: int | None = None):
    """Probe task for a dataset column: binary attributes, binned scalars, or identity."""
    from .probe import TaskSpec

    if name in BINARY:
        return TaskSpec(name, "binary")
    if name in BINS:
        return TaskSpec(name, "multiclass-binned", edges=bin_edges(name))
    if name == "identity":
        return TaskSpec(name, "classification", n_classes=n_identities)
    raise ValueError(f"unknown task {name!r}; choose from identity, {', '.join(ATTRIBUTES)}")
