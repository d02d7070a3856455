"""SGD, learning-rate schedules, the growing-L2 penalty and the extrusion loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import Dataset, batch_indices
from .errors import ConfigurationError, InputError, UsageError
from .mask import Mask, complement, exact
from .network import Network, ParamStore, forward


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate with an optional warm-up prefix.

    ``breakpoints`` are ``(start_epoch, lr)`` pairs. During the first
    ``warmup[0]`` epochs the warm-up rate replaces the scheduled one; the
    breakpoints themselves are not shifted.
    """

    breakpoints: tuple[tuple[int, float], ...]
    warmup: tuple[int, float] | None = None

    def __post_init__(self):
        bps = tuple((int(e), float(lr)) for e, lr in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        if not bps or bps[0][0] != 0:
            raise ConfigurationError("learning-rate schedule must start at epoch 0")
        starts = [e for e, _ in bps]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigurationError(f"breakpoints must be strictly increasing, got {starts}")
        if any(lr <= 0 for _, lr in bps):
            raise ConfigurationError("learning rates must be positive")
        if self.warmup is not None:
            w = (int(self.warmup[0]), float(self.warmup[1]))
            if w[0] < 0 or w[1] <= 0:
                raise ConfigurationError(f"bad warm-up {self.warmup}")
            object.__setattr__(self, "warmup", w)

    def with_warmup(self, warmup: tuple[int, float] | None) -> LrSchedule:
        return LrSchedule(self.breakpoints, warmup)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if schedule.warmup is not None and epoch < schedule.warmup[0]:
        return schedule.warmup[1]
    lr = schedule.breakpoints[0][1]
    for start, value in schedule.breakpoints:
        if start <= epoch:
            lr = value
    return lr


@dataclass(frozen=True)
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(((0, 0.1),)))

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: dict[str, np.ndarray],
             config: SgdConfig, lr: float, freeze: Mask | None = None) -> None:
    """In-place momentum SGD with coupled weight decay.

    ``v = momentum * v + grad + weight_decay * w``; ``w -= lr * v``. Entries
    where ``freeze`` is 0 get zero velocity and stay exactly 0.
    """
    for pid, t in params.params.items():
        if pid not in grads or grads[pid] is None:
            raise UsageError(f"no gradient for parameter {pid}")
        g = grads[pid]
        if config.weight_decay:
            g = g + config.weight_decay * t.data
        keep = freeze.layers.get(pid) if freeze is not None else None
        if keep is not None:
            g = np.where(keep, g, 0.0)
        v = state.get(pid)
        v = g.copy() if v is None else config.momentum * v + g
        if keep is not None:
            v = np.where(keep, v, 0.0)
        state[pid] = v
        w = t.data - lr * v
        t.data = np.where(keep, w, 0.0) if keep is not None else w


def collect_grads(params: ParamStore) -> dict[str, np.ndarray]:
    """Current ``.grad`` buffers; parameters the loss never touched get zeros."""
    return {pid: (t.grad if t.grad is not None else np.zeros_like(t.data)) for pid, t in params.params.items()}


def _check_selector(params: ParamStore, theta_star: Mask) -> None:
    for pid, bits in theta_star.layers.items():
        if pid not in params.params:
            raise InputError(f"selector names unknown parameter {pid}")
        if bits.shape != params[pid].shape:
            raise InputError(f"selector {pid}: shape {bits.shape} != parameter shape {params[pid].shape}")


def regularized_backward(loss: T.Tensor, params: ParamStore, theta_star: Mask, lam: float) -> dict[str, np.ndarray]:
    """Gradients of ``loss + lam/2 * ||theta*||^2``.

    ``theta_star`` selects (with 1s) the penalized entries; every other entry
    gets the plain data-loss gradient.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    _check_selector(params, theta_star)
    params.zero_grad()
    if loss.requires_grad:
        T.backward(loss)
    grads = collect_grads(params)
    if lam:
        for pid, sel in theta_star.layers.items():
            grads[pid] = grads[pid] + lam * np.where(sel, params[pid], 0.0)
    return grads


def penalty(params: ParamStore, theta_star: Mask) -> float:
    """``sum(theta*^2)`` over the selected entries."""
    return float(sum(np.sum(np.where(sel, params[pid], 0.0) ** 2) for pid, sel in theta_star.layers.items()))


def regularized_loss_value(loss_value: float, params: ParamStore, theta_star: Mask, lam: float) -> float:
    return loss_value + 0.5 * lam * penalty(params, theta_star)


@dataclass
class LambdaSchedule:
    """Growing penalty weight: +``eta`` every ``v_eta`` steps until ``lambda_b``, then held."""

    lambda0: float = 0.0
    eta: float = 1e-4
    lambda_b: float = 1.0
    v_eta: int = 5
    v_s: int = 40_000
    current: float | None = None
    step_counter: int = 0

    def __post_init__(self):
        if self.current is None:
            self.current = float(self.lambda0)
        if self.lambda_b < self.lambda0:
            raise ConfigurationError("lambda_b must be >= lambda0")
        if self.eta < 0 or (self.eta == 0 and self.lambda_b > self.lambda0):
            raise ConfigurationError("eta must be positive when lambda has room to grow")
        if self.v_eta < 1 or self.v_s < 0:
            raise ConfigurationError("v_eta must be >= 1 and v_s >= 0")

    def fresh(self) -> LambdaSchedule:
        return LambdaSchedule(self.lambda0, self.eta, self.lambda_b, self.v_eta, self.v_s)

    def ramp_iterations(self) -> int:
        span = exact(self.lambda_b) - exact(self.lambda0)
        if span <= 0:
            return 0
        return math.ceil(span / exact(self.eta)) * self.v_eta

    def total_iterations(self) -> int:
        return self.ramp_iterations() + self.v_s


def lambda_step(schedule: LambdaSchedule) -> LambdaSchedule:
    """Advance one optimizer iteration. Increments are exact decimal sums, clamped at the bound."""
    schedule.step_counter += 1
    if schedule.step_counter % schedule.v_eta == 0 and schedule.current < schedule.lambda_b:
        nxt = exact(schedule.current) + exact(schedule.eta)
        schedule.current = float(min(nxt, exact(schedule.lambda_b)))
    return schedule


def extra_cost(schedule: LambdaSchedule, batch_size: int, dataset_size: int) -> float:
    """Extra training cost of one transformation, in epochs: ((lambda_b/eta)*v_eta + v_s) * N_b / N_D."""
    if dataset_size <= 0:
        raise ConfigurationError("dataset_size must be positive")
    lb = exact(schedule.lambda_b)
    ramp = lb / exact(schedule.eta) * schedule.v_eta if lb else Fraction(0)
    return float((ramp + schedule.v_s) * batch_size / Fraction(dataset_size))


@dataclass(frozen=True)
class ExtrusionConfig:
    lr: float = 1e-3
    batch_size: int = 64
    momentum: float = 0.9
    trace_every: int = 100


@dataclass
class ExtrusionResult:
    params: ParamStore
    trace: list[tuple[int, float, float]]
    iterations: int


def theta_star_norm(params: ParamStore, theta_star: Mask) -> float:
    return math.sqrt(penalty(params, theta_star))


def extrusion_run(network: Network, params: ParamStore, mask: Mask, lambda_sched: LambdaSchedule,
                  data: Dataset, config: ExtrusionConfig = ExtrusionConfig(), seed: int = 0,
                  removed: Mask | None = None) -> ExtrusionResult:
    """Train the whole network while a growing L2 penalty pushes the masked-out weights to zero.

    ``mask`` marks the weights that will survive. ``removed`` (keep-bits of
    weights already cut in earlier cycles) is applied in the forward pass and
    held at zero. The returned parameters are not yet pruned; the caller
    zeroes the penalized entries. ``trace`` holds ``(iteration, lambda,
    ||theta*||)`` samples.
    """
    if len(data) == 0:
        raise ConfigurationError("extrusion needs a non-empty dataset")
    sched = lambda_sched
    total = sched.total_iterations()
    params = params.copy()
    theta_star = complement(mask)
    if removed is not None:
        theta_star = Mask({k: v & removed.layers[k] for k, v in theta_star.layers.items()})
    sgd = SgdConfig(momentum=config.momentum, weight_decay=0.0, batch_size=config.batch_size)
    state: dict[str, np.ndarray] = {}
    trace = [(0, sched.current, theta_star_norm(params, theta_star))]
    it, epoch = 0, 0
    while it < total:
        for idx in batch_indices(len(data), config.batch_size, seed, True, epoch):
            if it >= total:
                break
            logits = forward(network, params, removed, data.inputs[idx])
            loss = T.softmax_cross_entropy(logits, data.labels[idx])
            grads = regularized_backward(loss, params, theta_star, sched.current)
            sgd_step(params, grads, state, sgd, config.lr, freeze=removed)
            lambda_step(sched)
            it += 1
            if it % config.trace_every == 0 or it == total:
                trace.append((it, sched.current, theta_star_norm(params, theta_star)))
        epoch += 1
    params.zero_grad()
    return ExtrusionResult(params, trace, it)
