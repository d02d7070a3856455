"""Sparse-subnetwork training strategies (random tickets, lottery tickets, baselines) in plain numpy."""

from .data import Dataset, batches, gen_synthetic, load_idx, make_digit_idx, write_idx
from .mask import (Mask, SparsityPlan, audit_sparsity, complement, load_layerwise_ratios, load_mask, magnitude_mask,
                   random_mask, save_mask)
from .network import FLATTEN, RELU, LayerSpec, Network, ParamStore, build_network, conv, dense, forward, init_params
from .optim import (ExtrusionConfig, LambdaSchedule, LrSchedule, SgdConfig, extra_cost, extrusion_run, lambda_step,
                    lr_at, regularized_backward, sgd_step)
from .strategies import (CycleSchedule, SubnetworkCandidate, TrainConfig, finetune, strategy_eb, strategy_l1,
                         strategy_lth, strategy_lth_iter, strategy_rst, strategy_rst_iter, strategy_scratch)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "batches",
    "gen_synthetic",
    "load_idx",
    "make_digit_idx",
    "write_idx",
    "Mask",
    "SparsityPlan",
    "audit_sparsity",
    "complement",
    "load_layerwise_ratios",
    "load_mask",
    "magnitude_mask",
    "random_mask",
    "save_mask",
    "FLATTEN",
    "RELU",
    "LayerSpec",
    "Network",
    "ParamStore",
    "build_network",
    "conv",
    "dense",
    "forward",
    "init_params",
    "ExtrusionConfig",
    "LambdaSchedule",
    "LrSchedule",
    "SgdConfig",
    "extra_cost",
    "extrusion_run",
    "lambda_step",
    "lr_at",
    "regularized_backward",
    "sgd_step",
    "CycleSchedule",
    "SubnetworkCandidate",
    "TrainConfig",
    "finetune",
    "strategy_eb",
    "strategy_l1",
    "strategy_lth",
    "strategy_lth_iter",
    "strategy_rst",
    "strategy_rst_iter",
    "strategy_scratch",
]
