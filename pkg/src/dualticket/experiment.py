"""Run matrix over (strategy, sparsity, seed), aggregation and report files.

Config files are YAML. Unset keys resolve from one of two profiles: ``paper``
(the full-scale constants, mostly useful for cost arithmetic) or ``desk``
(budgets scaled down so a matrix runs in minutes on a CPU). Profiles only
change budgets, never what an algorithm does.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .data import Dataset, gen_synthetic, load_idx, make_digit_idx
from .errors import ConfigurationError
from .mask import SparsityPlan, load_layerwise_ratios
from .network import LayerSpec, Network, build_network, init_params
from .optim import ExtrusionConfig, LambdaSchedule, LrSchedule, SgdConfig, extra_cost
from .strategies import (STRATEGIES, CycleSchedule, TrainConfig, _pretrain, finetune, strategy_eb, strategy_l1,
                         strategy_lth, strategy_lth_iter, strategy_rst, strategy_rst_iter, strategy_scratch)

log = logging.getLogger(__name__)

PAPER_RATIOS = (0.5, 0.7, 0.9, 0.95, 0.98)

PROFILES: dict[str, dict[str, Any]] = {
    "paper": {
        "ratios": list(PAPER_RATIOS),
        "strategies": list(STRATEGIES),
        "seeds": [0, 1, 2],
        "finetune": {"epochs": 200, "batch_size": 128, "momentum": 0.9, "weight_decay": 5e-4,
                     "schedule": [[0, 0.1], [100, 0.01], [150, 0.001]], "warmup": [10, 0.01]},
        "pretrain_iter": {"epochs": 50, "schedule": [[0, 0.1], [25, 0.01], [37, 0.001]]},
        "cycles": 5,
        "eb_stop_fraction": 0.125,
        "rst": {"lambda0": 0.0, "lambda_b": 1.0, "eta": 1e-4, "v_eta": 5, "v_s": 40000,
                "lr": 1e-3, "batch_size": 64, "momentum": 0.9},
        "rst_iter": {"lambda0": 0.0, "lambda_b": 1.0, "eta": 1e-4, "v_eta": 1, "v_s": 10000,
                     "lr": 1e-3, "batch_size": 64, "momentum": 0.9},
        "layer_ratios": {},
        "output_dir": "results",
        "workers": 1,
    },
    "desk": {
        "ratios": list(PAPER_RATIOS),
        "strategies": list(STRATEGIES),
        "seeds": [0, 1, 2],
        "finetune": {"epochs": 40, "batch_size": 64, "momentum": 0.9, "weight_decay": 5e-4,
                     "schedule": [[0, 0.01], [20, 0.001], [30, 0.0001]], "warmup": [2, 0.001]},
        "pretrain_iter": {"epochs": 10, "schedule": [[0, 0.01], [5, 0.001], [7, 0.0001]]},
        "cycles": 5,
        "eb_stop_fraction": 0.125,
        "rst": {"lambda0": 0.0, "lambda_b": 1.0, "eta": 1e-3, "v_eta": 5, "v_s": 4000,
                "lr": 1e-3, "batch_size": 64, "momentum": 0.9},
        "rst_iter": {"lambda0": 0.0, "lambda_b": 1.0, "eta": 1e-3, "v_eta": 1, "v_s": 1000,
                     "lr": 1e-3, "batch_size": 64, "momentum": 0.9},
        "layer_ratios": {},
        "output_dir": "results",
        "workers": 1,
    },
}

DATASET_KEYS = {
    "digits": {"n_train": 2000, "n_test": 1000, "canvas": 12, "seed": 0, "cache_dir": None},
    "idx": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None,
            "num_classes": None},
    "blobs": {"n_per_class": 200, "classes": 4, "noise": 1.0, "seed": 0, "features": 2},
    "spirals": {"n_per_class": 200, "classes": 3, "noise": 0.1, "seed": 0, "features": 2},
}


class ConfigError(ConfigurationError):
    pass


# --- config ------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...] | None = None
    prune_all: bool = False

    def build(self) -> Network:
        return build_network(self.layers, self.input_shape, self.prune_all)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    options: tuple[tuple[str, Any], ...] = ()

    def get(self, key: str):
        return dict(self.options)[key]


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int
    batch_size: int
    momentum: float
    weight_decay: float
    schedule: tuple[tuple[int, float], ...]
    warmup: tuple[int, float] | None

    def train_config(self) -> TrainConfig:
        sgd = SgdConfig(self.momentum, self.weight_decay, self.batch_size, LrSchedule(self.schedule))
        return TrainConfig(sgd, self.epochs, self.warmup)


@dataclass(frozen=True)
class PretrainIterSection:
    epochs: int
    schedule: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class RstSection:
    lambda0: float
    lambda_b: float
    eta: float
    v_eta: int
    v_s: int
    lr: float
    batch_size: int
    momentum: float

    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda0, self.eta, self.lambda_b, self.v_eta, self.v_s)

    def extrusion(self) -> ExtrusionConfig:
        return ExtrusionConfig(self.lr, self.batch_size, self.momentum)


@dataclass(frozen=True)
class ExperimentConfig:
    network: NetworkConfig
    dataset: DatasetConfig
    profile: str
    ratios: tuple[float, ...]
    strategies: tuple[str, ...]
    seeds: tuple[int, ...]
    finetune: FinetuneSection
    pretrain_iter: PretrainIterSection
    cycles: int
    eb_stop_fraction: float
    rst: RstSection
    rst_iter: RstSection
    layer_ratios: tuple[tuple[float, str], ...] = ()
    output_dir: str = "results"
    workers: int = 1

    def mini_pretrain(self) -> TrainConfig:
        base = self.finetune.train_config()
        sgd = dataclasses.replace(base.sgd, schedule=LrSchedule(self.pretrain_iter.schedule))
        return TrainConfig(sgd, self.pretrain_iter.epochs)

    def plan(self, ratio: float) -> SparsityPlan:
        for r, path in self.layer_ratios:
            if r == ratio:
                return load_layerwise_ratios(path, ratio)
        return SparsityPlan(ratio)

    def digest(self) -> str:
        """Hash of everything that can change a cell's numbers."""
        d = config_to_dict(self)
        del d["output_dir"], d["workers"]
        return hashlib.sha256(yaml.safe_dump(d, sort_keys=True).encode()).hexdigest()[:16]


def _with_lines(text: str, source: str) -> tuple[Any, dict[tuple, int]]:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: YAML parse error: {getattr(exc, 'problem', exc)}") from None
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if node is None:
            return
        lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                lines[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    walk(root, ())
    return data, lines


class _Ctx:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source, self.lines = source, lines

    def error(self, path: tuple, msg: str) -> ConfigError:
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p)
        where = f"{self.source}:{line}" if line else self.source
        key = ".".join(str(x) for x in path) or "<root>"
        return ConfigError(f"{where}: {key}: {msg}")

    def num(self, value, path, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
        if isinstance(value, bool) or value is None:
            raise self.error(path, f"expected a number, got {value!r}")
        try:
            if kind is int:
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError
                out = int(value)
            else:
                out = float(value)
        except (TypeError, ValueError):
            raise self.error(path, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}") from None
        if lo is not None and (out < lo or (lo_open and out == lo)):
            raise self.error(path, f"must be {'>' if lo_open else '>='} {lo}, got {out}")
        if hi is not None and (out > hi or (hi_open and out == hi)):
            raise self.error(path, f"must be {'<' if hi_open else '<='} {hi}, got {out}")
        return out

    def section(self, value, path, allowed) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.error(path, "expected a mapping")
        unknown = sorted(set(value) - set(allowed))
        if unknown:
            raise self.error(path + (unknown[0],), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return value


TOP_KEYS = ("profile", "network", "dataset", "ratios", "strategies", "seeds", "finetune", "pretrain_iter",
            "cycles", "eb_stop_fraction", "rst", "rst_iter", "layer_ratios", "output_dir", "workers")
LAYER_KEYS = {f.name for f in dataclasses.fields(LayerSpec)}


def _schedule(ctx: _Ctx, value, path) -> tuple[tuple[int, float], ...]:
    if not isinstance(value, list) or not value:
        raise ctx.error(path, "expected a list of [start_epoch, lr] pairs")
    out = []
    for i, pair in enumerate(value):
        if not isinstance(pair, list) or len(pair) != 2:
            raise ctx.error(path + (i,), "expected [start_epoch, lr]")
        out.append((ctx.num(pair[0], path + (i, 0), int, lo=0), ctx.num(pair[1], path + (i, 1), lo=0, lo_open=True)))
    try:
        LrSchedule(tuple(out))
    except ConfigurationError as exc:
        raise ctx.error(path, str(exc)) from None
    return tuple(out)


def config_from_dict(raw: Any, source: str = "<config>", lines: dict | None = None,
                     profile: str | None = None) -> ExperimentConfig:
    ctx = _Ctx(source, lines or {})
    raw = ctx.section(raw, (), TOP_KEYS)
    prof = profile or raw.get("profile", "desk")
    if prof not in PROFILES:
        raise ctx.error(("profile",), f"unknown profile {prof!r} (paper or desk)")
    d = PROFILES[prof]
    if "network" not in raw or "dataset" not in raw:
        raise ctx.error((), "config needs at least 'network' and 'dataset'")

    # network
    net = ctx.section(raw["network"], ("network",), {"layers", "input_shape", "prune_all"})
    if not isinstance(net.get("layers"), list) or not net["layers"]:
        raise ctx.error(("network", "layers"), "expected a non-empty list of layers")
    layers = []
    for i, spec in enumerate(net["layers"]):
        p = ("network", "layers", i)
        spec = ctx.section(spec, p, LAYER_KEYS)
        if "kind" not in spec:
            raise ctx.error(p, "layer needs a 'kind'")
        kw = {}
        for k, v in spec.items():
            if k == "kind":
                kw[k] = str(v)
            elif k == "prunable":
                if not isinstance(v, bool):
                    raise ctx.error(p + (k,), "expected true/false")
                kw[k] = v
            else:
                kw[k] = ctx.num(v, p + (k,), int, lo=0)
        layers.append(LayerSpec(**kw))
    shape = net.get("input_shape")
    if shape is not None:
        if not isinstance(shape, list):
            raise ctx.error(("network", "input_shape"), "expected a list of positive integers")
        shape = tuple(ctx.num(v, ("network", "input_shape", i), int, lo=1) for i, v in enumerate(shape))
    prune_all = net.get("prune_all", False)
    if not isinstance(prune_all, bool):
        raise ctx.error(("network", "prune_all"), "expected true/false")
    network = NetworkConfig(tuple(layers), shape, prune_all)
    try:
        network.build()
    except ConfigurationError as exc:
        raise ctx.error(("network",), str(exc)) from None

    # dataset
    ds = raw["dataset"]
    if not isinstance(ds, dict) or "kind" not in ds:
        raise ctx.error(("dataset",), "expected a mapping with a 'kind'")
    kind = ds["kind"]
    if kind not in DATASET_KEYS:
        raise ctx.error(("dataset", "kind"), f"unknown dataset kind {kind!r} ({', '.join(DATASET_KEYS)})")
    ds = ctx.section(ds, ("dataset",), set(DATASET_KEYS[kind]) | {"kind"})
    opts = dict(DATASET_KEYS[kind])
    opts.update({k: v for k, v in ds.items() if k != "kind"})
    if kind == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            if not opts[k]:
                raise ctx.error(("dataset", k), "required for idx datasets")
    dataset = DatasetConfig(kind, tuple(sorted(opts.items())))

    def lst(key, conv):
        value = raw.get(key, d[key])
        if not isinstance(value, list) or not value:
            raise ctx.error((key,), "expected a non-empty list")
        return tuple(conv(v, (key, i)) for i, v in enumerate(value))

    ratios = lst("ratios", lambda v, p: ctx.num(v, p, lo=0, hi=1, hi_open=True))

    def strat(v, p):
        if v not in STRATEGIES:
            raise ctx.error(p, f"unknown strategy {v!r} ({', '.join(STRATEGIES)})")
        return v

    strategies = lst("strategies", strat)
    seeds = lst("seeds", lambda v, p: ctx.num(v, p, int, lo=0))

    ft_raw = ctx.section(raw.get("finetune"), ("finetune",), set(d["finetune"]))
    ft = {**d["finetune"], **ft_raw}
    warm = ft["warmup"]
    if warm is not None:
        if not isinstance(warm, list) or len(warm) != 2:
            raise ctx.error(("finetune", "warmup"), "expected [epochs, lr] or null")
        warm = (ctx.num(warm[0], ("finetune", "warmup", 0), int, lo=0),
                ctx.num(warm[1], ("finetune", "warmup", 1), lo=0, lo_open=True))
    finetune_sec = FinetuneSection(
        ctx.num(ft["epochs"], ("finetune", "epochs"), int, lo=0),
        ctx.num(ft["batch_size"], ("finetune", "batch_size"), int, lo=1),
        ctx.num(ft["momentum"], ("finetune", "momentum"), lo=0, hi=1, hi_open=True),
        ctx.num(ft["weight_decay"], ("finetune", "weight_decay"), lo=0),
        _schedule(ctx, ft["schedule"], ("finetune", "schedule")),
        warm)

    pi = {**d["pretrain_iter"], **ctx.section(raw.get("pretrain_iter"), ("pretrain_iter",), set(d["pretrain_iter"]))}
    pretrain_iter = PretrainIterSection(ctx.num(pi["epochs"], ("pretrain_iter", "epochs"), int, lo=0),
                                        _schedule(ctx, pi["schedule"], ("pretrain_iter", "schedule")))

    def rst_section(key):
        r = {**d[key], **ctx.section(raw.get(key), (key,), set(d[key]))}
        sec = RstSection(
            ctx.num(r["lambda0"], (key, "lambda0"), lo=0),
            ctx.num(r["lambda_b"], (key, "lambda_b"), lo=0),
            ctx.num(r["eta"], (key, "eta"), lo=0),
            ctx.num(r["v_eta"], (key, "v_eta"), int, lo=1),
            ctx.num(r["v_s"], (key, "v_s"), int, lo=0),
            ctx.num(r["lr"], (key, "lr"), lo=0, lo_open=True),
            ctx.num(r["batch_size"], (key, "batch_size"), int, lo=1),
            ctx.num(r["momentum"], (key, "momentum"), lo=0, hi=1, hi_open=True))
        try:
            sec.schedule()
        except ConfigurationError as exc:
            raise ctx.error((key,), str(exc)) from None
        return sec

    lr_raw = raw.get("layer_ratios", d["layer_ratios"]) or {}
    if not isinstance(lr_raw, dict):
        raise ctx.error(("layer_ratios",), "expected a mapping sparsity_ratio -> path")
    layer_ratios = tuple(sorted((ctx.num(k, ("layer_ratios", k), lo=0, hi=1, hi_open=True), str(v))
                                for k, v in lr_raw.items()))

    return ExperimentConfig(
        network=network, dataset=dataset, profile=prof, ratios=ratios, strategies=strategies, seeds=seeds,
        finetune=finetune_sec, pretrain_iter=pretrain_iter,
        cycles=ctx.num(raw.get("cycles", d["cycles"]), ("cycles",), int, lo=1),
        eb_stop_fraction=ctx.num(raw.get("eb_stop_fraction", d["eb_stop_fraction"]), ("eb_stop_fraction",),
                                 lo=0, hi=1, lo_open=True),
        rst=rst_section("rst"), rst_iter=rst_section("rst_iter"), layer_ratios=layer_ratios,
        output_dir=str(raw.get("output_dir", d["output_dir"])),
        workers=ctx.num(raw.get("workers", d["workers"]), ("workers",), int, lo=1))


def parse_config(path: str | Path, profile: str | None = None) -> ExperimentConfig:
    """Read, validate and resolve a YAML experiment config; ``profile`` overrides the file's."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    data, lines = _with_lines(text, str(path))
    return config_from_dict(data, str(path), lines, profile)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def pairs(p):
        return [list(x) for x in p]

    return {
        "profile": cfg.profile,
        "network": {"input_shape": list(cfg.network.input_shape) if cfg.network.input_shape else None,
                    "prune_all": cfg.network.prune_all,
                    "layers": [s.to_dict() for s in cfg.network.layers]},
        "dataset": {"kind": cfg.dataset.kind, **dict(cfg.dataset.options)},
        "ratios": list(cfg.ratios),
        "strategies": list(cfg.strategies),
        "seeds": list(cfg.seeds),
        "finetune": {"epochs": cfg.finetune.epochs, "batch_size": cfg.finetune.batch_size,
                     "momentum": cfg.finetune.momentum, "weight_decay": cfg.finetune.weight_decay,
                     "schedule": pairs(cfg.finetune.schedule),
                     "warmup": list(cfg.finetune.warmup) if cfg.finetune.warmup else None},
        "pretrain_iter": {"epochs": cfg.pretrain_iter.epochs, "schedule": pairs(cfg.pretrain_iter.schedule)},
        "cycles": cfg.cycles,
        "eb_stop_fraction": cfg.eb_stop_fraction,
        "rst": dataclasses.asdict(cfg.rst),
        "rst_iter": dataclasses.asdict(cfg.rst_iter),
        "layer_ratios": {r: p for r, p in cfg.layer_ratios},
        "output_dir": cfg.output_dir,
        "workers": cfg.workers,
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


# --- data --------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig, base_dir: Path | None = None) -> tuple[Dataset, Dataset]:
    o = dict(cfg.dataset.options)
    kind = cfg.dataset.kind
    if kind in ("blobs", "spirals"):
        return gen_synthetic(kind, o["n_per_class"], o["classes"], o["noise"], o["seed"], o["features"])
    if kind == "digits":
        cache = Path(o["cache_dir"]) if o["cache_dir"] else (base_dir or Path(".")) / "digits-idx"
        paths = make_digit_idx(cache, o["n_train"], o["n_test"], o["canvas"], o["seed"])
        o = {k: str(v) for k, v in paths.items()} | {"num_classes": 10}
    k = o.get("num_classes")
    return (load_idx(o["train_images"], o["train_labels"], "train", k),
            load_idx(o["test_images"], o["test_labels"], "test", k))


# --- results -----------------------------------------------------------------


@dataclass
class RunResult:
    strategy: str
    ratio: float
    seed: int
    epochs: list[dict]
    final_accuracy: float
    cost_epochs: float
    wall_time: float
    mask_checksum: str = ""
    extrusion_trace: list = field(default_factory=list)
    config_digest: str = ""

    @property
    def key(self) -> tuple[str, float, int]:
        return (self.strategy, self.ratio, self.seed)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunResult:
        d = json.loads(text)
        d["extrusion_trace"] = [list(r) for r in d.get("extrusion_trace", [])]
        return cls(**d)


def cell_filename(strategy: str, ratio: float, seed: int) -> str:
    return f"{strategy}__r{ratio!r}__s{seed}.json"


def cost_epochs(strategy: str, cfg: ExperimentConfig, n_train: int) -> float:
    """Training spent before finetuning, in epochs over the training set."""
    if strategy == "scratch":
        return 0.0
    if strategy in ("l1", "lth"):
        return float(cfg.finetune.epochs)
    if strategy == "eb":
        return float(round(cfg.eb_stop_fraction * cfg.finetune.epochs))
    if strategy == "lth_iter":
        return float(cfg.cycles * cfg.pretrain_iter.epochs)
    if strategy == "rst":
        return extra_cost(cfg.rst.schedule(), cfg.rst.batch_size, n_train)
    if strategy == "rst_iter":
        return cfg.cycles * extra_cost(cfg.rst_iter.schedule(), cfg.rst_iter.batch_size, n_train)
    raise ConfigurationError(f"unknown strategy {strategy!r}")


def total_cost_epochs(strategy: str, cfg: ExperimentConfig, n_train: int) -> float:
    return cost_epochs(strategy, cfg, n_train) + cfg.finetune.epochs


class _SeedContext:
    """Everything cells with the same seed share: init weights and dense pretraining checkpoints."""

    def __init__(self, cfg: ExperimentConfig, seed: int, train: Dataset):
        self.cfg, self.seed, self.train = cfg, seed, train
        self.network = cfg.network.build()
        self.init = init_params(self.network, seed)
        self._pretrained: dict[int, Any] = {}

    def pretrained(self, epochs: int):
        if epochs not in self._pretrained:
            self._pretrained[epochs] = _pretrain(self.init, self.train, self.cfg.finetune.train_config(), self.seed,
                                                 epochs=epochs)
        return self._pretrained[epochs]

    def candidate(self, strategy: str, ratio: float):
        cfg, seed, train = self.cfg, self.seed, self.train
        plan = cfg.plan(ratio)
        ft = cfg.finetune.train_config()
        if strategy == "scratch":
            return strategy_scratch(self.init, plan, seed)
        if strategy == "l1":
            return strategy_l1(self.init, plan, ft, train, seed, self.pretrained(ft.epochs))
        if strategy == "lth":
            return strategy_lth(self.init, plan, ft, train, seed, self.pretrained(ft.epochs))
        if strategy == "eb":
            stop = round(cfg.eb_stop_fraction * ft.epochs)
            return strategy_eb(self.init, plan, ft, train, cfg.eb_stop_fraction, seed, self.pretrained(stop))
        if strategy == "lth_iter":
            return strategy_lth_iter(self.init, plan, CycleSchedule(cfg.cycles, cfg.mini_pretrain()), train, seed)
        if strategy == "rst":
            return strategy_rst(self.init, plan, seed, cfg.rst.schedule(), train, cfg.rst.extrusion())
        if strategy == "rst_iter":
            return strategy_rst_iter(self.init, plan, seed, cfg.cycles, cfg.rst_iter.schedule(), train,
                                     cfg.rst_iter.extrusion())
        raise ConfigurationError(f"unknown strategy {strategy!r}")


def run_cell(ctx: _SeedContext, strategy: str, ratio: float, test: Dataset) -> RunResult:
    start = time.perf_counter()
    cand = ctx.candidate(strategy, ratio)
    res = finetune(cand, ctx.cfg.finetune.train_config(), ctx.train, test, ctx.seed)
    cost = cost_epochs(strategy, ctx.cfg, len(ctx.train))
    if strategy in ("rst", "rst_iter") and cost != cand.provenance.cost_epochs:
        raise AssertionError("cost accounting mismatch")
    return RunResult(strategy, ratio, ctx.seed, [dataclasses.asdict(e) for e in res.epochs], res.final_accuracy,
                     cost, time.perf_counter() - start, res.mask_checksum,
                     [list(r) for r in cand.provenance.extrusion_trace], ctx.cfg.digest())


def _run_seed(cfg: ExperimentConfig, seed: int, todo: list[tuple[str, float]], out_dir: str,
              data: tuple[Dataset, Dataset] | None = None) -> tuple[list[RunResult], list[dict]]:
    train, test = data if data is not None else load_datasets(cfg, Path(out_dir))
    ctx = _SeedContext(cfg, seed, train)
    cells = Path(out_dir) / "cells"
    results, failures = [], []
    for strategy, ratio in todo:
        try:
            r = run_cell(ctx, strategy, ratio, test)
        except Exception as exc:  # one bad cell must not sink the matrix
            log.exception("cell %s ratio=%s seed=%s failed", strategy, ratio, seed)
            failures.append({"strategy": strategy, "ratio": ratio, "seed": seed, "error": repr(exc)})
            continue
        tmp = cells / (cell_filename(strategy, ratio, seed) + ".tmp")
        tmp.write_text(r.to_json())
        tmp.replace(cells / cell_filename(strategy, ratio, seed))
        results.append(r)
    return results, failures


@dataclass
class MatrixOutcome:
    results: list[RunResult]
    failures: list[dict]
    reused: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def _order_key(r: RunResult):
    return (r.ratio, STRATEGIES.index(r.strategy), r.seed)


def run_matrix(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None,
               resume: bool = True, data: tuple[Dataset, Dataset] | None = None) -> MatrixOutcome:
    """Run every (strategy, ratio, seed) cell, one JSON file per finished cell.

    With ``resume`` a cell whose file exists (and was produced by the same
    resolved config) is loaded instead of retrained.
    """
    out = Path(out_dir or cfg.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_config(cfg))
    digest = cfg.digest()
    done: dict[tuple, RunResult] = {}
    if resume:
        for f in sorted((out / "cells").glob("*.json")):
            r = RunResult.from_json(f.read_text())
            if r.config_digest == digest:
                done[r.key] = r
    else:
        for f in (out / "cells").glob("*.json"):
            f.unlink()

    todo: dict[int, list[tuple[str, float]]] = {}
    for seed in cfg.seeds:
        for ratio in cfg.ratios:
            for strategy in cfg.strategies:
                if (strategy, ratio, seed) not in done:
                    todo.setdefault(seed, []).append((strategy, ratio))

    results, failures = list(done.values()), []
    n_workers = workers or cfg.workers
    if n_workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futs = [pool.submit(_run_seed, cfg, s, cells, str(out), data) for s, cells in todo.items()]
            for fut in futs:
                r, f = fut.result()
                results += r
                failures += f
    else:
        shared = data if data is not None else (load_datasets(cfg, out) if todo else None)
        for s, cells in todo.items():
            r, f = _run_seed(cfg, s, cells, str(out), shared)
            results += r
            failures += f

    results.sort(key=_order_key)
    manifest = {"config_digest": digest,
                "cells": [{"strategy": r.strategy, "ratio": r.ratio, "seed": r.seed, "status": "ok",
                           "file": f"cells/{cell_filename(*r.key)}"} for r in results]
                + [dict(f, status="failed") for f in failures]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return MatrixOutcome(results, failures, reused=len(done))


def load_results(results_dir: str | Path) -> list[RunResult]:
    cells = sorted(Path(results_dir, "cells").glob("*.json"))
    return sorted((RunResult.from_json(f.read_text()) for f in cells), key=_order_key)


# --- aggregation and reports -------------------------------------------------


@dataclass(frozen=True)
class AggregateRow:
    strategy: str
    ratio: float
    n: int
    mean: float
    std: float

    def cell(self) -> str:
        return f"{self.mean:.2f}±{self.std:.2f}"


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and spread over runs, with the 1/n (population) spread used in the published tables."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0)) if a.size > 1 else 0.0


def aggregate(results: Iterable[RunResult]) -> list[AggregateRow]:
    groups: dict[tuple[str, float], list[float]] = {}
    for r in results:
        groups.setdefault((r.strategy, r.ratio), []).append(r.final_accuracy)
    rows = [AggregateRow(s, ratio, len(v), *mean_std(v)) for (s, ratio), v in groups.items()]
    return sorted(rows, key=lambda row: (row.ratio, STRATEGIES.index(row.strategy)))


def format_table(rows: Sequence[AggregateRow]) -> str:
    """Strategies down, sparsity ratios across, ``mean±std`` cells."""
    ratios = sorted({r.ratio for r in rows})
    strategies = [s for s in STRATEGIES if any(r.strategy == s for r in rows)]
    by = {(r.strategy, r.ratio): r.cell() for r in rows}
    head = f"{'strategy':<10}" + "".join(f"{f'{100 * x:g}%':>14}" for x in ratios)
    body = [f"{s:<10}" + "".join(f"{by.get((s, x), '-'):>14}" for x in ratios) for s in strategies]
    return "\n".join([head, *body])


RESULTS_HEADER = ("strategy", "ratio", "seed", "final_accuracy", "cost_epochs")
CURVE_KEYS = ("strategy", "ratio", "seed", "epoch", "lr", "train_loss", "test_accuracy")

_COLORS = {"l1": "#1f77b4", "lth": "#ff7f0e", "lth_iter": "#2ca02c", "eb": "#9467bd", "scratch": "#7f7f7f",
           "rst": "#d62728", "rst_iter": "#8c564b"}


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def render_svg(results: Sequence[RunResult], ratio: float, width: int = 640, height: int = 400) -> str:
    """Mean test-accuracy curve per strategy with a shaded mean ± std band (SVG 1.1)."""
    left, right, top, bottom = 56, 120, 36, 44
    pw, ph = width - left - right, height - top - bottom
    curves: dict[str, list[list[float]]] = {}
    for r in results:
        if r.ratio == ratio:
            curves.setdefault(r.strategy, []).append([e["test_accuracy"] for e in r.epochs])
    n_ep = max((len(c) for runs in curves.values() for c in runs), default=1)
    lo = min((min(c) for runs in curves.values() for c in runs), default=0.0)
    y0 = math.floor(lo / 10) * 10
    y1 = 100.0

    def px(epoch: int) -> float:
        return left + pw * epoch / max(1, n_ep - 1)

    def py(acc: float) -> float:
        return top + ph * (1 - (acc - y0) / max(1e-9, y1 - y0))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.2f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">'
        f'Test accuracy, sparsity {100 * ratio:g}%</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in range(int(y0), 101, 10):
        y = py(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{t}</text>')
    step = max(1, (n_ep - 1) // 8)
    for e in range(0, n_ep, step):
        x = px(e)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{e}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">epoch</text>')
    legend_y = top + 10
    for s in STRATEGIES:
        if s not in curves:
            continue
        runs = curves[s]
        n = min(len(c) for c in runs)
        arr = np.array([c[:n] for c in runs])
        mean, std = arr.mean(axis=0), arr.std(axis=0)
        color = _COLORS[s]
        upper = " ".join(f"{px(i):.2f},{py(min(y1, m + d)):.2f}" for i, (m, d) in enumerate(zip(mean, std)))
        lower = " ".join(f"{px(i):.2f},{py(max(y0, m - d)):.2f}"
                         for i, (m, d) in reversed(list(enumerate(zip(mean, std)))))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(i):.2f},{py(m):.2f}" for i, m in enumerate(mean))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<line x1="{left + pw + 10}" y1="{legend_y}" x2="{left + pw + 30}" y2="{legend_y}" '
                   f'stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{left + pw + 34}" y="{legend_y + 4}" font-family="sans-serif" '
                   f'font-size="11">{s}</text>')
        legend_y += 16
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(results: Sequence[RunResult], out_dir: str | Path) -> dict[str, Path]:
    """Write results.csv, timings.csv, summary.csv, curves.jsonl and one SVG per ratio."""
    if not results:
        raise ConfigurationError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=_order_key)
    files = {}

    files["results"] = out / "results.csv"
    files["results"].write_text(_csv([RESULTS_HEADER] + [
        (r.strategy, repr(r.ratio), r.seed, f"{r.final_accuracy:.2f}", repr(r.cost_epochs)) for r in results]))

    files["timings"] = out / "timings.csv"
    files["timings"].write_text(_csv([("strategy", "ratio", "seed", "wall_time")] + [
        (r.strategy, repr(r.ratio), r.seed, f"{r.wall_time:.3f}") for r in results]))

    rows = aggregate(results)
    files["summary"] = out / "summary.csv"
    files["summary"].write_text(_csv([("strategy", "ratio", "n", "mean", "std", "mean_std")] + [
        (a.strategy, repr(a.ratio), a.n, f"{a.mean:.2f}", f"{a.std:.2f}", a.cell()) for a in rows]))

    files["curves"] = out / "curves.jsonl"
    with open(files["curves"], "w", encoding="utf-8") as fh:
        for r in results:
            for e in r.epochs:
                rec = {"strategy": r.strategy, "ratio": r.ratio, "seed": r.seed, **e}
                fh.write(json.dumps({k: rec[k] for k in CURVE_KEYS}) + "\n")

    for ratio in sorted({r.ratio for r in results}):
        p = out / f"accuracy_r{ratio!r}.svg"
        p.write_text(render_svg(results, ratio))
        files[f"svg_{ratio!r}"] = p
    return files
