"""Network intermediate representation, model files and static cost accounting.

A network is an ordered list of :class:`LayerSpec` plus a flat mapping of
parameter tensors keyed ``"<layer id>.weight"`` / ``"<layer id>.bias"``.
Shapes follow the usual NCHW / (out, in, k, k) conventions.

An MFM layer is the channel-halving max operator; its "internal" convolution
is the ``Conv2D`` immediately preceding it, which must emit ``2 * o`` channels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

LAYER_KINDS = ("Conv2D", "ReLU", "MaxPool2D", "MFM", "GAP", "Linear")
MAGIC = "PKIR"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class InvalidNetworkError(ValueError):
    """Raised when an operation needs a valid network and gets one that is not."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"invalid network: {lines}")


class FormatError(ValueError):
    """Base class for model/container file errors."""


class MalformedHeaderError(FormatError):
    pass


class BlobLengthError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    window: int = 0
    in_features: int = 0
    out_features: int = 0
    group: str | None = None

    def to_dict(self) -> dict:
        # only the fields that matter for this kind, keeps headers readable
        keep = {"id", "kind", "group"} | set(_KIND_FIELDS[self.kind])
        return {k: v for k, v in asdict(self).items() if k in keep and v is not None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown layer fields {sorted(unknown)}")
        return cls(**d)


_KIND_FIELDS = {
    "Conv2D": ("in_channels", "out_channels", "kernel", "stride", "padding", "has_bias"),
    "ReLU": (),
    "MaxPool2D": ("window", "stride", "padding"),
    "MFM": ("out_channels",),
    "GAP": (),
    "Linear": ("in_features", "out_features", "has_bias"),
}


def conv(id, in_channels, out_channels, kernel=3, stride=1, padding=None, bias=True, group=None):
    if padding is None:
        padding = kernel // 2
    return LayerSpec(id, "Conv2D", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, padding=padding, has_bias=bias, group=group)


def relu(id, group=None):
    return LayerSpec(id, "ReLU", group=group)


def maxpool(id, window=2, stride=None, padding=0):
    return LayerSpec(id, "MaxPool2D", window=window, stride=stride or window, padding=padding)


def mfm(id, out_channels, group=None):
    return LayerSpec(id, "MFM", out_channels=out_channels, group=group)


def gap(id):
    return LayerSpec(id, "GAP")


def linear(id, in_features, out_features, bias=True):
    return LayerSpec(id, "Linear", in_features=in_features, out_features=out_features,
                     has_bias=bias)


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Expected parameter shapes of one layer, keyed by full parameter name."""
    out = {}
    if spec.kind == "Conv2D":
        out[f"{spec.id}.weight"] = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        if spec.has_bias:
            out[f"{spec.id}.bias"] = (spec.out_channels,)
    elif spec.kind == "Linear":
        out[f"{spec.id}.weight"] = (spec.out_features, spec.in_features)
        if spec.has_bias:
            out[f"{spec.id}.bias"] = (spec.out_features,)
    return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float32, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NetworkIR:
    layers: tuple[LayerSpec, ...]
    params: Mapping[str, np.ndarray]
    input_shape: tuple[int, int, int]
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "params",
                           MappingProxyType({k: _frozen(v) for k, v in self.params.items()}))
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    @property
    def ids(self) -> list[str]:
        return [l.id for l in self.layers]

    def index(self, layer_id: str) -> int:
        for i, l in enumerate(self.layers):
            if l.id == layer_id:
                return i
        raise KeyError(f"no layer {layer_id!r}")

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self.index(layer_id)]

    def evolve(self, **changes) -> "NetworkIR":
        return replace(self, **changes)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without batch axis). Requires a valid network."""
        viol, shapes = _check(self)
        if viol:
            raise InvalidNetworkError(viol)
        return shapes

    def equals(self, other: "NetworkIR") -> bool:
        """Bit-identical comparison of specs, parameters, input shape and metadata."""
        if (self.layers != other.layers or self.input_shape != other.input_shape
                or dict(self.metadata) != dict(other.metadata)
                or set(self.params) != set(other.params)):
            return False
        return all(self.params[k].shape == other.params[k].shape
                   and self.params[k].tobytes() == other.params[k].tobytes()
                   for k in self.params)


@dataclass(frozen=True)
class Violation:
    layer_id: str
    code: str
    message: str

    def __str__(self):
        return f"[{self.layer_id}] {self.code}: {self.message}"


def _out_len(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _check(net: NetworkIR) -> tuple[list[Violation], list[tuple[int, ...]]]:
    viol: list[Violation] = []
    shapes: list[tuple[int, ...]] = []
    seen: set[str] = set()
    state: tuple[int, ...] | None = tuple(net.input_shape)
    if len(state) != 3 or min(state) < 1:
        viol.append(Violation("<input>", "bad_input", f"input_shape {state} is not C×H×W"))
        state = None
    prev: LayerSpec | None = None
    for spec in net.layers:
        lid = spec.id
        if lid in seen:
            viol.append(Violation(lid, "duplicate_id", "layer id used twice"))
        seen.add(lid)
        if spec.kind not in LAYER_KINDS:
            viol.append(Violation(lid, "bad_kind", f"unknown kind {spec.kind!r}"))
            state = None
        elif state is not None:
            state = _step(spec, state, prev, viol)
        shapes.append(state)
        prev = spec

    expected: dict[str, tuple[int, ...]] = {}
    for spec in net.layers:
        if spec.kind in LAYER_KINDS:
            expected.update(param_shapes(spec))
    for name, shape in expected.items():
        lid = name.rsplit(".", 1)[0]
        if name not in net.params:
            viol.append(Violation(lid, "missing_param", f"{name} absent"))
        elif tuple(net.params[name].shape) != shape:
            viol.append(Violation(lid, "param_shape",
                                  f"{name} has shape {tuple(net.params[name].shape)}, expected {shape}"))
    for name in net.params:
        if name not in expected:
            viol.append(Violation(name.rsplit(".", 1)[0], "unexpected_param", f"{name} not used"))
    return viol, shapes


def _step(spec, state, prev, viol):
    lid = spec.id
    is_map = len(state) == 3
    if spec.kind in ("Conv2D", "MaxPool2D", "MFM", "GAP") and not is_map:
        viol.append(Violation(lid, "rank", f"{spec.kind} needs a C×H×W input, got {state}"))
        return None
    if spec.kind == "Conv2D":
        c, h, w = state
        if min(spec.in_channels, spec.out_channels, spec.kernel, spec.stride) < 1 or spec.padding < 0:
            viol.append(Violation(lid, "bad_spec", "conv sizes must be positive"))
            return None
        if c != spec.in_channels:
            viol.append(Violation(lid, "channel_mismatch",
                                  f"in_channels={spec.in_channels} but producer emits {c}"))
        ho, wo = (_out_len(n, spec.kernel, spec.stride, spec.padding) for n in (h, w))
        if ho < 1 or wo < 1:
            viol.append(Violation(lid, "bad_spec", f"kernel {spec.kernel} larger than padded input"))
            return None
        return (spec.out_channels, ho, wo)
    if spec.kind == "MaxPool2D":
        c, h, w = state
        if spec.window < 1 or spec.stride < 1 or spec.padding < 0 or 2 * spec.padding > spec.window:
            viol.append(Violation(lid, "bad_spec", "pool window/stride/padding invalid"))
            return None
        ho, wo = (_out_len(n, spec.window, spec.stride, spec.padding) for n in (h, w))
        if ho < 1 or wo < 1:
            viol.append(Violation(lid, "bad_spec", "pool window larger than input"))
            return None
        return (c, ho, wo)
    if spec.kind == "MFM":
        c, h, w = state
        if prev is None or prev.kind != "Conv2D":
            viol.append(Violation(lid, "mfm_placement", "MFM must directly follow a Conv2D"))
        if spec.out_channels < 1:
            viol.append(Violation(lid, "bad_spec", "MFM out_channels must be positive"))
            return None
        if c % 2:
            viol.append(Violation(lid, "mfm_parity", f"internal conv emits odd channel count {c}"))
        elif c != 2 * spec.out_channels:
            viol.append(Violation(lid, "channel_mismatch",
                                  f"MFM out_channels={spec.out_channels} needs {2 * spec.out_channels} "
                                  f"input channels, producer emits {c}"))
        return (spec.out_channels, h, w)
    if spec.kind == "GAP":
        return (state[0],)
    if spec.kind == "Linear":
        if is_map:
            viol.append(Violation(lid, "rank", "Linear needs a vector input (insert GAP)"))
            return None
        if min(spec.in_features, spec.out_features) < 1:
            viol.append(Violation(lid, "bad_spec", "linear sizes must be positive"))
            return None
        if state[0] != spec.in_features:
            viol.append(Violation(lid, "channel_mismatch",
                                  f"in_features={spec.in_features} but producer emits {state[0]}"))
        return (spec.out_features,)
    return state  # ReLU


def validate(net: NetworkIR) -> list[Violation]:
    """Every shape-chain and parameter violation, empty when the network is valid."""
    return _check(net)[0]


def require_valid(net: NetworkIR) -> list[tuple[int, ...]]:
    viol, shapes = _check(net)
    if viol:
        raise InvalidNetworkError(viol)
    return shapes


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerCount:
    layer_id: str
    kind: str
    params: int
    flops: int


@dataclass(frozen=True)
class CountReport:
    per_layer: tuple[LayerCount, ...]
    input_shape: tuple[int, int, int]
    convention: str = "flops=2*MAC; comparisons and adds counted"
    baseline_params: int | None = None
    baseline_flops: int | None = None

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.per_layer)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.per_layer)

    @property
    def param_reduction(self) -> float | None:
        if self.baseline_params is None:
            return None
        return 1.0 - self.total_params / self.baseline_params

    @property
    def flop_reduction(self) -> float | None:
        if self.baseline_flops is None:
            return None
        return 1.0 - self.total_flops / self.baseline_flops

    def against(self, baseline: "CountReport") -> "CountReport":
        if baseline.convention != self.convention:
            raise ValueError("reports use different counting conventions")
        return replace(self, baseline_params=baseline.total_params,
                       baseline_flops=baseline.total_flops)

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "input_shape": list(self.input_shape),
            "per_layer": [asdict(e) for e in self.per_layer],
            "totals": {"params": self.total_params, "flops": self.total_flops},
            "reduction_vs_baseline": {
                "params": self.param_reduction,
                "flops": self.flop_reduction,
                "baseline_params": self.baseline_params,
                "baseline_flops": self.baseline_flops,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CountReport":
        red = d.get("reduction_vs_baseline", {})
        return cls(per_layer=tuple(LayerCount(**e) for e in d["per_layer"]),
                   input_shape=tuple(d["input_shape"]), convention=d["convention"],
                   baseline_params=red.get("baseline_params"),
                   baseline_flops=red.get("baseline_flops"))


def _layer_cost(spec: LayerSpec, in_shape, out_shape) -> tuple[int, int]:
    n_out = math.prod(out_shape)
    if spec.kind == "Conv2D":
        p = spec.out_channels * spec.in_channels * spec.kernel ** 2 + (spec.out_channels if spec.has_bias else 0)
        f = 2 * spec.out_channels * spec.in_channels * spec.kernel ** 2 * out_shape[1] * out_shape[2]
        return p, f
    if spec.kind == "Linear":
        p = spec.in_features * spec.out_features + (spec.out_features if spec.has_bias else 0)
        return p, 2 * spec.in_features * spec.out_features
    if spec.kind == "MaxPool2D":
        return 0, (spec.window ** 2 - 1) * n_out
    if spec.kind in ("MFM", "ReLU"):
        return 0, n_out
    if spec.kind == "GAP":
        return 0, math.prod(in_shape)
    raise ValueError(spec.kind)


def count(net: NetworkIR, input_shape: Sequence[int] | None = None) -> CountReport:
    """Parameter and FLOP counts per layer. Depends only on specs and input shape."""
    if input_shape is not None and tuple(input_shape) != net.input_shape:
        net = net.evolve(input_shape=tuple(input_shape))
    shapes = require_valid(net)
    entries = []
    prev = net.input_shape
    for spec, shp in zip(net.layers, shapes):
        p, f = _layer_cost(spec, prev, shp)
        entries.append(LayerCount(spec.id, spec.kind, p, f))
        prev = shp
    return CountReport(tuple(entries), net.input_shape)


def count_params(net: NetworkIR) -> CountReport:
    return count(net)


def count_flops(net: NetworkIR, input_shape: Sequence[int] | None = None) -> CountReport:
    return count(net, input_shape)


# --------------------------------------------------------------------------
# files: text header + little-endian blob
# --------------------------------------------------------------------------

def write_container(path, kind: str, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``tensors`` (float32 or float64) after a JSON header describing them."""
    entries, blobs, offset = [], [], 0
    for name in tensors:
        a = np.asarray(tensors[name])
        code = "<f8" if a.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head.update({"kind": kind, "format_version": FORMAT_VERSION, "tensors": entries,
                 "blob_bytes": offset})
    text = json.dumps(head, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}{FORMAT_VERSION}\n{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError("missing magic line")
    magic = data[:nl].decode("ascii", "replace")
    if not magic.startswith(MAGIC):
        raise MalformedHeaderError(f"bad magic {magic[:16]!r}")
    if magic[len(MAGIC):] != str(FORMAT_VERSION):
        raise UnsupportedVersionError(f"unsupported format version {magic[len(MAGIC):]!r}")
    nl2 = data.find(b"\n", nl + 1)
    try:
        hlen = int(data[nl + 1:nl2])
    except ValueError:
        raise MalformedHeaderError("header length line is not an integer") from None
    start = nl2 + 1
    if nl2 < 0 or hlen < 0 or start + hlen + 1 > len(data) or data[start + hlen:start + hlen + 1] != b"\n":
        raise MalformedHeaderError("header length does not match file layout")
    try:
        head = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not JSON: {exc}") from None
    if not isinstance(head, dict) or not isinstance(head.get("tensors"), list):
        raise MalformedHeaderError("header lacks a tensor table")
    if head.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersionError(f"header format_version {head.get('format_version')!r}")
    if kind is not None and head.get("kind") != kind:
        raise MalformedHeaderError(f"expected a {kind!r} file, got {head.get('kind')!r}")
    blob = data[start + hlen + 1:]
    if len(blob) != head.get("blob_bytes"):
        raise BlobLengthError(f"blob has {len(blob)} bytes, header declares {head.get('blob_bytes')}")
    tensors, offset = {}, 0
    for t in head["tensors"]:
        try:
            name, shape, code = t["name"], tuple(int(s) for s in t["shape"]), t["dtype"]
            off, nbytes = int(t["offset"]), int(t["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise MalformedHeaderError(f"bad tensor entry {t!r}") from None
        if code not in _DTYPES or any(s < 0 for s in shape):
            raise MalformedHeaderError(f"bad dtype/shape in tensor entry {name!r}")
        if nbytes != math.prod(shape) * _DTYPES[code].itemsize:
            raise ShapeMismatchError(f"{name}: shape {shape} needs "
                                     f"{math.prod(shape) * _DTYPES[code].itemsize} bytes, entry says {nbytes}")
        if off != offset or off + nbytes > len(blob):
            raise BlobLengthError(f"{name}: offset {off} / size {nbytes} outside blob")
        arr = np.frombuffer(blob, dtype=_DTYPES[code], count=math.prod(shape), offset=off)
        tensors[name] = arr.reshape(shape).astype(_DTYPES[code].newbyteorder("="))
        offset += nbytes
    if offset != len(blob):
        raise BlobLengthError("trailing bytes after last tensor")
    return head, tensors


def save_model(net: NetworkIR, path) -> None:
    require_valid(net)
    header = {
        "layers": [l.to_dict() for l in net.layers],
        "input_shape": list(net.input_shape),
        "metadata": dict(net.metadata),
    }
    write_container(path, "model", header, {k: net.params[k] for k in sorted(net.params)})


def load_model(path) -> NetworkIR:
    head, tensors = read_container(path, kind="model")
    try:
        layers = [LayerSpec.from_dict(d) for d in head["layers"]]
        input_shape = tuple(int(s) for s in head["input_shape"])
        metadata = dict(head.get("metadata", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad layer table: {exc}") from None
    if any(t["dtype"] != "<f4" for t in head["tensors"]):
        raise MalformedHeaderError("model parameters must be 32-bit floats")
    for spec in layers:
        if spec.kind not in LAYER_KINDS:
            raise MalformedHeaderError(f"unknown layer kind {spec.kind!r}")
        for name, shape in param_shapes(spec).items():
            if name in tensors and tensors[name].shape != shape:
                raise ShapeMismatchError(f"{name}: stored {tensors[name].shape}, spec needs {shape}")
    net = NetworkIR(layers, tensors, input_shape, metadata)
    require_valid(net)
    return net


def build(layers: Iterable[LayerSpec], input_shape, rng: np.random.Generator | None = None,
          metadata: Mapping | None = None) -> NetworkIR:
    """Network with He-initialised weights and zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = list(layers)
    params = {}
    for spec in layers:
        for name, shape in param_shapes(spec).items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, np.float32)
            else:
                fan_in = math.prod(shape[1:])
                params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
    net = NetworkIR(layers, params, input_shape, metadata or {})
    require_valid(net)
    return net
