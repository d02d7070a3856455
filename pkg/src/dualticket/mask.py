"""Binary weight masks: random and magnitude selection, complements, audits, files.

Ratios are treated as the decimal numbers they are written as (``0.9`` is
exactly nine tenths), so kept counts never drift by one through binary
rounding.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, FormatError, ParseError, ValidationError
from .network import Network, ParamStore, layer_of, read_header, _parse_shape, _shape_str


def exact(x: float | int | Fraction) -> Fraction:
    """Rational value of ``x`` as written in decimal (via its shortest repr)."""
    if isinstance(x, Fraction):
        return x
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


class Mask:
    """Immutable map from prunable parameter id to a boolean keep-array."""

    __slots__ = ("layers",)

    def __init__(self, layers: Mapping[str, np.ndarray]):
        frozen = {}
        for pid, bits in layers.items():
            arr = np.asarray(bits)
            if arr.dtype != bool:
                if not np.isin(arr, (0, 1)).all():
                    raise ValueError(f"mask {pid} has entries other than 0/1")
                arr = arr.astype(bool)
            arr = arr.copy()
            arr.setflags(write=False)
            frozen[pid] = arr
        self.layers: dict[str, np.ndarray] = frozen

    @classmethod
    def ones(cls, network: Network) -> Mask:
        return cls({pid: np.ones(network.param_shapes[pid], bool) for pid in network.prunable_ids})

    def __eq__(self, other) -> bool:
        return (isinstance(other, Mask) and list(self.layers) == list(other.layers)
                and all(np.array_equal(v, other.layers[k]) for k, v in self.layers.items()))

    def __repr__(self) -> str:
        return f"Mask({ {k: f'{int(v.sum())}/{v.size}' for k, v in self.layers.items()} })"

    def popcount(self) -> dict[str, int]:
        return {k: int(v.sum()) for k, v in self.layers.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.layers.items():
            h.update(f"{k}:{_shape_str(v.shape)};".encode())
            h.update(np.packbits(v.reshape(-1)).tobytes())
        return h.hexdigest()

    def is_subset_of(self, other: Mask) -> bool:
        return all(not np.any(v & ~other.layers[k]) for k, v in self.layers.items())


@dataclass(frozen=True)
class SparsityPlan:
    """How many weights to keep per prunable layer.

    ``global_ratio`` is the fraction to *remove*; ``per_layer`` maps a layer
    index to a *keep* ratio and overrides the global value for that layer.
    """

    global_ratio: float = 0.0
    per_layer: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.global_ratio < 1:
            raise ConfigurationError(f"sparsity ratio must be in [0, 1), got {self.global_ratio}")
        for layer, keep in self.per_layer.items():
            if not 0 <= keep <= 1:
                raise ConfigurationError(f"layer {layer}: keep ratio must be in [0, 1], got {keep}")

    def keep_ratio(self, layer: int) -> Fraction:
        if layer in self.per_layer:
            return exact(self.per_layer[layer])
        return 1 - exact(self.global_ratio)

    def keep_count(self, pid: str, n: int) -> int:
        return max(1, math.floor(n * self.keep_ratio(layer_of(pid))))


def _check_plan(plan: SparsityPlan) -> None:
    # dataclass validation can be bypassed with object.__setattr__; re-check here
    if not 0 <= plan.global_ratio < 1:
        raise ConfigurationError(f"sparsity ratio must be in [0, 1), got {plan.global_ratio}")


def random_mask(params: ParamStore | Network, plan: SparsityPlan, seed: int) -> Mask:
    """Uniform draw without replacement of the planned kept count in every prunable layer."""
    _check_plan(plan)
    network = params.network if isinstance(params, ParamStore) else params
    rng = np.random.default_rng(seed)
    return select_random(network, plan, rng)


def select_random(network: Network, plan: SparsityPlan, rng: np.random.Generator,
                  within: Mask | None = None, counts: Mapping[str, int] | None = None) -> Mask:
    """Random kept sets, optionally drawn only among the survivors of ``within``.

    Layers are processed in network order from one generator; with
    ``within=None`` this is exactly :func:`random_mask`.
    """
    layers = {}
    for pid in network.prunable_ids:
        shape = network.param_shapes[pid]
        n = math.prod(shape)
        pool = np.arange(n) if within is None else np.flatnonzero(within.layers[pid])
        keep = counts[pid] if counts is not None else plan.keep_count(pid, n)
        keep = min(keep, pool.size)
        chosen = pool[rng.choice(pool.size, size=keep, replace=False)]
        bits = np.zeros(n, bool)
        bits[chosen] = True
        layers[pid] = bits.reshape(shape)
    return Mask(layers)


def top_magnitude(values: np.ndarray, keep: int, within: np.ndarray | None = None) -> np.ndarray:
    """Boolean array marking the ``keep`` largest ``|values|`` (lower flat index wins ties)."""
    flat = np.abs(values).reshape(-1)
    if within is not None:
        pool = np.flatnonzero(within.reshape(-1))
        order = pool[np.argsort(-flat[pool], kind="stable")]
    else:
        order = np.argsort(-flat, kind="stable")
    bits = np.zeros(flat.size, bool)
    bits[order[:keep]] = True
    return bits.reshape(values.shape)


def magnitude_mask(params: ParamStore, plan: SparsityPlan, within: Mask | None = None,
                   counts: Mapping[str, int] | None = None) -> Mask:
    """Per-layer L1 magnitude selection on the current parameter values."""
    _check_plan(plan)
    layers = {}
    for pid in params.network.prunable_ids:
        w = params[pid]
        keep = counts[pid] if counts is not None else plan.keep_count(pid, w.size)
        layers[pid] = top_magnitude(w, keep, None if within is None else within.layers[pid])
    return Mask(layers)


def complement(mask: Mask) -> Mask:
    return Mask({k: ~v for k, v in mask.layers.items()})


@dataclass(frozen=True)
class LayerAudit:
    kept: int
    total: int

    @property
    def removal(self) -> Fraction:
        return Fraction(self.total - self.kept, self.total)


@dataclass(frozen=True)
class SparsityReport:
    layers: dict[str, LayerAudit]

    @property
    def kept(self) -> int:
        return sum(a.kept for a in self.layers.values())

    @property
    def total(self) -> int:
        return sum(a.total for a in self.layers.values())

    @property
    def overall_removal(self) -> Fraction:
        return Fraction(self.total - self.kept, self.total) if self.total else Fraction(0)

    def format(self) -> str:
        lines = [f"{'param':<14}{'kept':>10}{'total':>10}{'removed':>10}"]
        for pid, a in self.layers.items():
            lines.append(f"{pid:<14}{a.kept:>10}{a.total:>10}{float(a.removal):>10.4f}")
        lines.append(f"{'overall':<14}{self.kept:>10}{self.total:>10}{float(self.overall_removal):>10.4f}")
        return "\n".join(lines)


def audit_sparsity(mask: Mask) -> SparsityReport:
    return SparsityReport({k: LayerAudit(int(v.sum()), int(v.size)) for k, v in mask.layers.items()})


def load_layerwise_ratios(path: str | Path, global_ratio: float = 0.0) -> SparsityPlan:
    """Read ``layer_index,keep_ratio`` lines ('#' starts a comment)."""
    per_layer: dict[int, float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'layer_index,keep_ratio', got {raw.strip()!r}")
            try:
                layer, keep = int(parts[0]), float(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse {raw.strip()!r}") from None
            if not 0 <= keep <= 1:
                raise ValidationError(f"{path}:{lineno}: keep ratio {keep} outside [0, 1]")
            per_layer[layer] = keep
    return SparsityPlan(global_ratio, per_layer)


def write_layerwise_ratios(plan: SparsityPlan, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# layer_index,keep_ratio\n")
        for layer in sorted(plan.per_layer):
            fh.write(f"{layer},{plan.per_layer[layer]!r}\n")


# Mask file layout:
#   mask v1
#   count <n>
#   <id> <d1>x<d2>... <popcount>     (n lines)
#   end
#   <payload>: for each layer in header order, np.packbits of the row-major
#   keep bits (MSB first, last byte zero-padded).

_MASK_MAGIC = "mask v1"


def save_mask(mask: Mask, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_MASK_MAGIC}\ncount {len(mask.layers)}\n".encode())
        for pid, bits in mask.layers.items():
            fh.write(f"{pid} {_shape_str(bits.shape)} {int(bits.sum())}\n".encode())
        fh.write(b"end\n")
        for bits in mask.layers.values():
            fh.write(np.packbits(bits.reshape(-1)).tobytes())


def load_mask(path: str | Path) -> Mask:
    with open(path, "rb") as fh:
        rows = read_header(fh, _MASK_MAGIC)
        payload = fh.read()
    layers, off = {}, 0
    for row in rows:
        if len(row) != 3:
            raise FormatError(f"bad mask header line {' '.join(row)!r}")
        pid, shape, pop = row[0], _parse_shape(row[1]), int(row[2])
        n = math.prod(shape)
        nbytes = (n + 7) // 8
        chunk = payload[off:off + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"mask payload truncated in {pid}")
        off += nbytes
        bits = np.unpackbits(np.frombuffer(chunk, np.uint8))[:n].astype(bool).reshape(shape)
        if int(bits.sum()) != pop:
            raise FormatError(f"mask {pid}: header popcount {pop} != payload popcount {int(bits.sum())}")
        layers[pid] = bits
    if off != len(payload):
        raise FormatError("trailing bytes after mask payload")
    return Mask(layers)
