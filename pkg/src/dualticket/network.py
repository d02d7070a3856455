"""Declarative layer stacks, parameter stores and (masked) forward passes."""

from __future__ import annotations

import dataclasses
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, FormatError, InputError

if TYPE_CHECKING:
    from .mask import Mask

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward stack.

    ``in_features`` / ``in_channels`` may be left as ``None`` and are then
    inferred from the previous layer. ``prunable=None`` defers to the default
    exemption rule applied by :func:`build_network`.
    """

    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: int = 0
    prunable: bool | None = None

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name != "kind" and v is not None and v != f.default:
                d[f.name] = v
        return d


def dense(out_features: int, in_features: int | None = None, prunable: bool | None = None) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features, prunable=prunable)


def conv(out_channels: int, kernel_size: int, in_channels: int | None = None, stride: int = 1,
         padding: int = 0, prunable: bool | None = None) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_size=kernel_size, stride=stride, padding=padding, prunable=prunable)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class Network:
    """Resolved architecture: concrete layer sizes plus parameter bookkeeping."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    param_shapes: Mapping[str, tuple[int, ...]]
    fan_in: Mapping[str, int]
    prunable_ids: tuple[str, ...]
    output_shape: tuple[int, ...]

    @property
    def param_ids(self) -> tuple[str, ...]:
        return tuple(self.param_shapes)

    def weight_ids(self) -> tuple[str, ...]:
        return tuple(p for p in self.param_shapes if p.endswith(".weight"))


def param_id(layer_index: int, role: str) -> str:
    return f"{layer_index}.{role}"


def layer_of(pid: str) -> int:
    return int(pid.split(".", 1)[0])


def build_network(specs: Sequence[LayerSpec], input_shape: Sequence[int] | None = None,
                  prune_all: bool = False) -> Network:
    """Resolve shapes through ``specs`` and decide which weights are prunable.

    By default the first parameter-bearing layer and the final dense layer are
    kept dense; ``prune_all`` makes every weight tensor prunable, and an
    explicit ``LayerSpec.prunable`` always wins.
    """
    specs = list(specs)
    if not specs:
        raise ConfigurationError("network needs at least one layer")
    for i, s in enumerate(specs):
        if s.kind not in LAYER_KINDS:
            raise ConfigurationError(f"layer {i}: unknown kind {s.kind!r}")
        if not s.has_params and s.prunable:
            raise ConfigurationError(f"layer {i} ({s.kind}) has no parameters and cannot be prunable")

    if input_shape is None:
        first = specs[0]
        if first.kind == "dense" and first.in_features:
            input_shape = (first.in_features,)
        elif first.kind == "conv2d":
            raise ConfigurationError("input_shape (C, H, W) is required for a convolutional network")
        else:
            raise ConfigurationError("input_shape is required")
    shape = tuple(int(d) for d in input_shape)
    if any(d < 1 for d in shape):
        raise ConfigurationError(f"input_shape must be positive, got {shape}")

    resolved: list[LayerSpec] = []
    param_shapes: dict[str, tuple[int, ...]] = {}
    fan_in: dict[str, int] = {}

    def mismatch(i: int, what: str) -> ConfigurationError:
        prev = f"layer {i - 1} ({specs[i - 1].kind})" if i else "input"
        return ConfigurationError(f"shape mismatch between {prev} and layer {i} ({specs[i].kind}): {what}")

    for i, s in enumerate(specs):
        if s.kind == "dense":
            if len(shape) != 1:
                raise mismatch(i, f"dense layer needs a flat input, got {shape}")
            if s.in_features is not None and s.in_features != shape[0]:
                raise mismatch(i, f"expects {s.in_features} features, receives {shape[0]}")
            if not s.out_features or s.out_features < 1:
                raise ConfigurationError(f"layer {i}: dense needs out_features >= 1")
            s = dataclasses.replace(s, in_features=shape[0])
            param_shapes[param_id(i, "weight")] = (s.in_features, s.out_features)
            param_shapes[param_id(i, "bias")] = (s.out_features,)
            fan_in[param_id(i, "weight")] = s.in_features
            shape = (s.out_features,)
        elif s.kind == "conv2d":
            if len(shape) != 3:
                raise mismatch(i, f"conv2d needs a C x H x W input, got {shape}")
            c, h, w = shape
            if s.in_channels is not None and s.in_channels != c:
                raise mismatch(i, f"expects {s.in_channels} channels, receives {c}")
            if not s.kernel_size or not s.out_channels:
                raise ConfigurationError(f"layer {i}: conv2d needs out_channels and kernel_size")
            s = dataclasses.replace(s, in_channels=c)
            k = s.kernel_size
            try:
                ho = T.conv_output_size(h, k, s.stride, s.padding)
                wo = T.conv_output_size(w, k, s.stride, s.padding)
            except ConfigurationError as exc:
                raise mismatch(i, str(exc)) from None
            param_shapes[param_id(i, "weight")] = (s.out_channels, c, k, k)
            param_shapes[param_id(i, "bias")] = (s.out_channels,)
            fan_in[param_id(i, "weight")] = c * k * k
            shape = (s.out_channels, ho, wo)
        elif s.kind == "flatten":
            shape = (math.prod(shape),)
        resolved.append(s)

    bearing = [i for i, s in enumerate(resolved) if s.has_params]
    dense_layers = [i for i in bearing if resolved[i].kind == "dense"]
    exempt = {bearing[0]} if bearing else set()
    if dense_layers:
        exempt.add(dense_layers[-1])
    prunable = []
    for i in bearing:
        flag = resolved[i].prunable
        if flag is None:
            flag = prune_all or i not in exempt
        if flag:
            prunable.append(param_id(i, "weight"))
    if not prunable:
        warnings.warn("no prunable layer: the first and last parameter layers are exempt by default",
                      stacklevel=2)

    return Network(tuple(resolved), tuple(int(d) for d in input_shape), param_shapes, fan_in,
                   tuple(prunable), shape)


@dataclass
class ParamStore:
    """Trainable parameters of one network plus a frozen copy of their initial values."""

    network: Network
    params: dict[str, T.Tensor]
    init_snapshot: Mapping[str, np.ndarray] = field(repr=False)

    def __getitem__(self, pid: str) -> np.ndarray:
        return self.params[pid].data

    def __iter__(self):
        return iter(self.params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def copy(self) -> ParamStore:
        """Independent copy of the current values sharing the same init snapshot."""
        return ParamStore(self.network, {k: T.Tensor(t.data, requires_grad=True) for k, t in self.params.items()},
                          self.init_snapshot)

    def rewound(self) -> ParamStore:
        """Fresh store whose current values are the init snapshot."""
        return ParamStore(self.network, {k: T.Tensor(v, requires_grad=True) for k, v in self.init_snapshot.items()},
                          self.init_snapshot)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self, snapshot: bool = False) -> str:
        src = self.init_snapshot if snapshot else self.values()
        h = hashlib.sha256()
        for k, v in src.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def nonzero_counts(self) -> dict[str, int]:
        return {k: int(np.count_nonzero(t.data)) for k, t in self.params.items()}


def _freeze(values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in values.items():
        a = np.array(v, dtype=np.float64)
        a.setflags(write=False)
        out[k] = a
    return out


def make_store(network: Network, values: Mapping[str, np.ndarray],
               init_snapshot: Mapping[str, np.ndarray] | None = None) -> ParamStore:
    if set(values) != set(network.param_shapes):
        raise InputError("parameter ids do not match the network")
    for k, shp in network.param_shapes.items():
        if tuple(np.shape(values[k])) != shp:
            raise InputError(f"parameter {k}: shape {np.shape(values[k])} != {shp}")
    params = {k: T.Tensor(values[k], requires_grad=True) for k in network.param_shapes}
    snap = _freeze(init_snapshot if init_snapshot is not None else {k: values[k] for k in network.param_shapes})
    return ParamStore(network, params, snap)


def init_params(network: Network, seed: int) -> ParamStore:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases, fully seed-determined."""
    rng = np.random.default_rng(seed)
    values = {}
    for pid, shp in network.param_shapes.items():
        if pid.endswith(".weight"):
            values[pid] = rng.normal(0.0, math.sqrt(2.0 / network.fan_in[pid]), size=shp)
        else:
            values[pid] = np.zeros(shp)
    return make_store(network, values)


def forward(network: Network, params: ParamStore, mask: Mask | None, batch) -> T.Tensor:
    """Logits for ``batch``; masked weights contribute ``value * mask_bit``."""
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    if tuple(x.shape[1:]) != network.input_shape:
        raise InputError(f"batch shape {x.shape} does not match network input {network.input_shape}")
    if mask is not None:
        if set(mask.layers) != set(network.prunable_ids):
            raise InputError(f"mask covers {sorted(mask.layers)} but prunable ids are {list(network.prunable_ids)}")
        for pid, bits in mask.layers.items():
            if bits.shape != network.param_shapes[pid]:
                raise InputError(f"mask {pid}: shape {bits.shape} != parameter shape {network.param_shapes[pid]}")

    for i, spec in enumerate(network.layers):
        if spec.kind == "relu":
            x = T.relu(x)
        elif spec.kind == "flatten":
            x = T.flatten(x)
        else:
            wid = param_id(i, "weight")
            w = params.params[wid]
            if mask is not None and wid in mask.layers:
                w = T.masked(w, mask.layers[wid])
            b = params.params[param_id(i, "bias")]
            if spec.kind == "dense":
                x = T.add(T.matmul(x, w), b)
            else:
                x = T.add(T.conv2d(x, w, spec.stride, spec.padding), T.reshape(b, (spec.out_channels, 1, 1)))
    return x


# --- persistence -------------------------------------------------------------
#
# ParamStore file layout (all text lines are UTF-8, '\n' terminated):
#   paramstore v1
#   count <n>
#   <id> <d1>x<d2>x...      (n lines, in parameter order)
#   end
#   <payload>: little-endian f64 values of every parameter (row-major, in
#   header order), followed by the init snapshot in the same layout.

_PS_MAGIC = "paramstore v1"


def _shape_str(shape: Sequence[int]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(d) for d in text.split("x"))


def write_header_and_arrays(fh, magic: str, entries: list[tuple[str, tuple[int, ...]]]) -> None:
    fh.write((magic + "\n").encode())
    fh.write(f"count {len(entries)}\n".encode())
    for pid, shp in entries:
        fh.write(f"{pid} {_shape_str(shp)}\n".encode())
    fh.write(b"end\n")


def read_header(fh, magic: str) -> list[list[str]]:
    first = fh.readline().decode().rstrip("\n")
    if first != magic:
        raise FormatError(f"expected header {magic!r}, found {first!r}")
    count_line = fh.readline().decode().split()
    if len(count_line) != 2 or count_line[0] != "count":
        raise FormatError("missing 'count' line")
    rows = [fh.readline().decode().split() for _ in range(int(count_line[1]))]
    if fh.readline() != b"end\n":
        raise FormatError("missing 'end' line after header")
    return rows


def save_params(params: ParamStore, path: str | Path) -> None:
    entries = [(k, params.network.param_shapes[k]) for k in params.params]
    with open(path, "wb") as fh:
        write_header_and_arrays(fh, _PS_MAGIC, entries)
        for k in params.params:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
        for k in params.params:
            fh.write(np.ascontiguousarray(params.init_snapshot[k], dtype="<f8").tobytes())


def load_params(network: Network, path: str | Path) -> ParamStore:
    with open(path, "rb") as fh:
        rows = read_header(fh, _PS_MAGIC)
        entries = []
        for row in rows:
            if len(row) != 2:
                raise FormatError(f"bad header line {' '.join(row)!r}")
            entries.append((row[0], _parse_shape(row[1])))
        payload = fh.read()
    need = 2 * 8 * sum(math.prod(s) for _, s in entries)
    if len(payload) != need:
        raise FormatError(f"payload has {len(payload)} bytes, expected {need}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    cur, snap, off = {}, {}, 0
    for dest in (cur, snap):
        for pid, shp in entries:
            n = math.prod(shp)
            dest[pid] = flat[off:off + n].reshape(shp)
            off += n
    if [pid for pid, _ in entries] != list(network.param_shapes):
        raise FormatError("parameter ids in file do not match the network")
    return make_store(network, cur, snap)
