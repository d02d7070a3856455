"""Subnetwork selection pipelines and the shared finetuning procedure.

Every pipeline returns a :class:`SubnetworkCandidate`: a mask plus the weights
the subnetwork starts finetuning from. They differ in which training
checkpoint picks the mask (``k_m``), which checkpoint supplies the weights
(``k_w``), and how.

=========  ==============  =================  ===========================
name       mask from       weights from       notes
=========  ==============  =================  ===========================
l1         pretrained |w|  pretrained         conventional pruning
lth        pretrained |w|  init (rewound)
lth_iter   iterated |w|    init (rewound)     geometric per-cycle keep
eb         early |w|       init (rewound)     pretraining stopped early
scratch    random          init
rst        random          extruded init      growing L2 on removed part
rst_iter   random, nested  extruded, cycled
=========  ==============  =================  ===========================
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .errors import ConfigurationError, InvariantError
from .mask import Mask, SparsityPlan, audit_sparsity, load_mask, magnitude_mask, random_mask, save_mask, select_random
from .network import Network, ParamStore, forward, load_params, make_store, save_params
from .optim import (ExtrusionConfig, LambdaSchedule, LrSchedule, SgdConfig, collect_grads, extra_cost, extrusion_run,
                    lr_at, sgd_step)

STRATEGIES = ("l1", "lth", "lth_iter", "eb", "scratch", "rst", "rst_iter")
RST_FAMILY = ("rst", "rst_iter")


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings plus an epoch budget; used for pretraining and finetuning alike."""

    sgd: SgdConfig
    epochs: int
    warmup: tuple[int, float] | None = None  # finetuning of RST-family candidates only

    def schedule(self, warm: bool = False) -> LrSchedule:
        return self.sgd.schedule.with_warmup(self.warmup if warm else None)


@dataclass(frozen=True)
class CycleSchedule:
    cycles: int = 5
    train: TrainConfig | None = None

    def __post_init__(self):
        if self.cycles < 1:
            raise ConfigurationError("cycles must be >= 1")


def cycle_counts(network: Network, plan: SparsityPlan, cycles: int) -> list[dict[str, int]]:
    """Kept count per layer after each cycle.

    After cycle ``c`` a layer keeps ``floor(n * keep**(c/cycles))`` weights, never
    fewer than the final planned count; the last cycle lands on the plan exactly.
    """
    out = []
    for c in range(1, cycles + 1):
        counts = {}
        for pid in network.prunable_ids:
            n = math.prod(network.param_shapes[pid])
            final = plan.keep_count(pid, n)
            if c == cycles:
                counts[pid] = final
            else:
                frac = float(plan.keep_ratio(int(pid.split(".")[0]))) ** (c / cycles)
                counts[pid] = max(final, math.floor(n * frac))
        out.append(counts)
    return out


@dataclass
class Provenance:
    strategy: str
    k_m: str
    k_w: str
    f_m: str
    f_w: str
    cycles: int = 1
    seeds: dict = field(default_factory=dict)
    cost_epochs: float = 0.0
    extrusion_trace: list = field(default_factory=list)
    cycle_masks: list = field(default_factory=list, repr=False)


@dataclass
class SubnetworkCandidate:
    mask: Mask
    weights: ParamStore
    provenance: Provenance


# --- training primitives -----------------------------------------------------


def evaluate(network: Network, params: ParamStore, mask: Mask | None, data: Dataset,
             chunk: int = 512) -> tuple[float, float]:
    """Mean loss and accuracy (percent) over ``data``."""
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for s in range(0, len(data), chunk):
            x, y = data.inputs[s:s + chunk], data.labels[s:s + chunk]
            logits = forward(network, params, mask, x)
            total_loss += T.softmax_cross_entropy(logits, y).item() * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return total_loss / len(data), 100.0 * correct / len(data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_accuracy: float


def train(network: Network, params: ParamStore, data: Dataset, config: TrainConfig, seed: int,
          epochs: int | None = None, mask: Mask | None = None, warm: bool = False,
          test: Dataset | None = None,
          on_epoch: Callable[[int, ParamStore], None] | None = None) -> list[EpochRecord]:
    """Minibatch SGD in place on ``params``; ``mask`` is both forward mask and freeze mask."""
    epochs = config.epochs if epochs is None else epochs
    schedule = config.schedule(warm)
    state: dict[str, np.ndarray] = {}
    records = []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        losses = []
        for idx in batch_indices(len(data), config.sgd.batch_size, seed, True, epoch):
            params.zero_grad()
            loss = T.softmax_cross_entropy(forward(network, params, mask, data.inputs[idx]), data.labels[idx])
            losses.append(loss.item() * len(idx))
            T.backward(loss)
            sgd_step(params, collect_grads(params), state, config.sgd, lr, freeze=mask)
        params.zero_grad()
        acc = evaluate(network, params, mask, test)[1] if test is not None else float("nan")
        records.append(EpochRecord(epoch + 1, lr, sum(losses) / len(data), acc))
        if on_epoch is not None:
            on_epoch(epoch + 1, params)
    return records


def pruned(params: ParamStore, mask: Mask, source: dict[str, np.ndarray] | None = None) -> ParamStore:
    """Copy of ``params`` (or of ``source`` values) with masked-out weights set to +0.0."""
    vals = {k: np.array(v) for k, v in (source or params.values()).items()}
    for pid, keep in mask.layers.items():
        vals[pid] = np.where(keep, vals[pid], 0.0)
    return make_store(params.network, vals, params.init_snapshot)


def _pretrain(init: ParamStore, data: Dataset, config: TrainConfig, seed: int, epochs: int | None = None,
              mask: Mask | None = None) -> ParamStore:
    dense = init.rewound() if mask is None else pruned(init, mask, init.init_snapshot)
    train(init.network, dense, data, config, seed, epochs=epochs, mask=mask)
    return dense


# --- strategies --------------------------------------------------------------


def strategy_scratch(init: ParamStore, plan: SparsityPlan, seed: int) -> SubnetworkCandidate:
    mask = random_mask(init, plan, seed)
    return SubnetworkCandidate(mask, pruned(init, mask, init.init_snapshot),
                               Provenance("scratch", "0", "0", "random", "identity", seeds={"mask": seed}))


def strategy_eb(init: ParamStore, plan: SparsityPlan, pretrain: TrainConfig, data: Dataset, stop_fraction: float,
                seed: int = 0, pretrained: ParamStore | None = None, name: str = "eb") -> SubnetworkCandidate:
    """Mask from an early pretraining checkpoint, weights rewound to init.

    ``pretrained`` may supply an already-trained checkpoint for the stop epoch.
    """
    if not 0 < stop_fraction <= 1:
        raise ConfigurationError(f"stop_fraction must be in (0, 1], got {stop_fraction}")
    stop = round(stop_fraction * pretrain.epochs)
    if pretrained is None:
        pretrained = _pretrain(init, data, pretrain, seed, epochs=stop)
    mask = magnitude_mask(pretrained, plan)
    k_m = "K" if stop == pretrain.epochs else f"epoch {stop}"
    return SubnetworkCandidate(mask, pruned(init, mask, init.init_snapshot),
                               Provenance(name, k_m, "0", "magnitude", "identity", seeds={"data": seed},
                                          cost_epochs=float(stop)))


def strategy_lth(init: ParamStore, plan: SparsityPlan, pretrain: TrainConfig, data: Dataset, seed: int = 0,
                 pretrained: ParamStore | None = None) -> SubnetworkCandidate:
    return strategy_eb(init, plan, pretrain, data, 1.0, seed, pretrained, name="lth")


def strategy_l1(init: ParamStore, plan: SparsityPlan, pretrain: TrainConfig, data: Dataset, seed: int = 0,
                pretrained: ParamStore | None = None) -> SubnetworkCandidate:
    if pretrained is None:
        pretrained = _pretrain(init, data, pretrain, seed)
    mask = magnitude_mask(pretrained, plan)
    return SubnetworkCandidate(mask, pruned(pretrained, mask),
                               Provenance("l1", "K", "K", "magnitude", "identity", seeds={"data": seed},
                                          cost_epochs=float(pretrain.epochs)))


def strategy_lth_iter(init: ParamStore, plan: SparsityPlan, cycles: CycleSchedule, data: Dataset,
                      seed: int = 0) -> SubnetworkCandidate:
    """Iterative magnitude pruning; survivors are rewound to init before every cycle."""
    if cycles.train is None:
        raise ConfigurationError("lth_iter needs a per-cycle training budget")
    net = init.network
    mask: Mask | None = None
    history = []
    for counts in cycle_counts(net, plan, cycles.cycles):
        trained = _pretrain(init, data, cycles.train, seed, mask=mask)
        mask = magnitude_mask(trained, plan, within=mask, counts=counts)
        history.append(mask)
    return SubnetworkCandidate(mask, pruned(init, mask, init.init_snapshot),
                               Provenance("lth_iter", "K (iterated)", "0", "magnitude", "identity",
                                          cycles=cycles.cycles, seeds={"data": seed},
                                          cost_epochs=float(cycles.cycles * cycles.train.epochs),
                                          cycle_masks=history))


def strategy_rst(init: ParamStore, plan: SparsityPlan, seed: int, lambda_sched: LambdaSchedule, data: Dataset,
                 extrusion: ExtrusionConfig = ExtrusionConfig(), data_seed: int | None = None) -> SubnetworkCandidate:
    """Random mask, then extrude the information of the removed weights into the survivors."""
    mask = random_mask(init, plan, seed)
    ds = seed if data_seed is None else data_seed
    res = extrusion_run(init.network, init.rewound(), mask, lambda_sched.fresh(), data, extrusion, seed=ds)
    return SubnetworkCandidate(mask, pruned(res.params, mask),
                               Provenance("rst", "0", "0", "random", "rst", seeds={"mask": seed, "data": ds},
                                          cost_epochs=extra_cost(lambda_sched, extrusion.batch_size, len(data)),
                                          extrusion_trace=res.trace))


def strategy_rst_iter(init: ParamStore, plan: SparsityPlan, seed: int, cycles: int, lambda_sched: LambdaSchedule,
                      data: Dataset, extrusion: ExtrusionConfig = ExtrusionConfig(),
                      data_seed: int | None = None) -> SubnetworkCandidate:
    """Cycle: pick a random subset of survivors to keep, extrude the rest, cut them.

    The penalty weight restarts from ``lambda0`` every cycle. One generator
    seeded with ``seed`` draws every cycle's selection, so a single cycle
    reproduces :func:`strategy_rst`.
    """
    if cycles < 1:
        raise ConfigurationError("cycles must be >= 1")
    net = init.network
    rng = np.random.default_rng(seed)
    ds = seed if data_seed is None else data_seed
    params = init.rewound()
    removed: Mask | None = None
    history, trace = [], []
    for c, counts in enumerate(cycle_counts(net, plan, cycles)):
        mask = select_random(net, plan, rng, within=removed, counts=counts)
        res = extrusion_run(net, params, mask, lambda_sched.fresh(), data, extrusion,
                            seed=ds, removed=removed)
        params = pruned(res.params, mask)
        trace.extend((c, *row) for row in res.trace)
        removed = mask
        history.append(mask)
    per_cycle = extra_cost(lambda_sched, extrusion.batch_size, len(data))
    return SubnetworkCandidate(removed, params,
                               Provenance("rst_iter", "0", "0", "random (nested)", "rst", cycles=cycles,
                                          seeds={"mask": seed, "data": ds}, cost_epochs=cycles * per_cycle,
                                          extrusion_trace=trace, cycle_masks=history))


# --- finetuning --------------------------------------------------------------


@dataclass
class FinetuneResult:
    epochs: list[EpochRecord]
    final_accuracy: float
    mask_checksum: str
    wall_time: float
    params: ParamStore = field(repr=False)


def _check_frozen(mask: Mask, params: ParamStore, where: str) -> None:
    for pid, keep in mask.layers.items():
        if np.any(params[pid][~keep] != 0.0):
            raise InvariantError(f"{where}: masked weights of {pid} are no longer zero")


def finetune(candidate: SubnetworkCandidate, config: TrainConfig, train_data: Dataset, test_data: Dataset,
             seed: int, on_epoch: Callable[[int, ParamStore], None] | None = None) -> FinetuneResult:
    """Train only the kept weights; record per-epoch loss and test accuracy.

    Epoch 0 is the evaluation of the untouched candidate (its ``lr`` is 0).
    RST-family candidates get the warm-up prefix from ``config``.
    """
    start = time.perf_counter()
    mask = candidate.mask
    net = candidate.weights.network
    audit = audit_sparsity(mask)
    if set(mask.layers) != set(net.prunable_ids) or audit.total != sum(
            math.prod(net.param_shapes[p]) for p in net.prunable_ids):
        raise InvariantError("candidate mask does not cover the prunable layers")
    checksum = mask.checksum()
    params = candidate.weights.copy()
    _check_frozen(mask, params, "before finetuning")

    def check(epoch: int, p: ParamStore) -> None:
        if mask.checksum() != checksum:
            raise InvariantError(f"mask changed during finetuning (epoch {epoch})")
        _check_frozen(mask, p, f"epoch {epoch}")
        if on_epoch is not None:
            on_epoch(epoch, p)

    loss0, acc0 = evaluate(net, params, mask, train_data)[0], evaluate(net, params, mask, test_data)[1]
    records = [EpochRecord(0, 0.0, loss0, acc0)]
    warm = candidate.provenance.strategy in RST_FAMILY
    records += train(net, params, train_data, config, seed, mask=mask, warm=warm, test=test_data, on_epoch=check)
    return FinetuneResult(records, records[-1].test_accuracy, checksum, time.perf_counter() - start, params)


# --- persistence -------------------------------------------------------------


def save_candidate(candidate: SubnetworkCandidate, directory: str | Path) -> None:
    """Write ``provenance.json``, ``mask.bin`` and ``weights.bin`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prov = asdict(candidate.provenance)
    prov.pop("cycle_masks")
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n")
    save_mask(candidate.mask, d / "mask.bin")
    save_params(candidate.weights, d / "weights.bin")


def load_candidate(network: Network, directory: str | Path) -> SubnetworkCandidate:
    d = Path(directory)
    prov = json.loads((d / "provenance.json").read_text())
    prov["extrusion_trace"] = [tuple(r) for r in prov.get("extrusion_trace", [])]
    return SubnetworkCandidate(load_mask(d / "mask.bin"), load_params(network, d / "weights.bin"),
                               Provenance(**prov))
