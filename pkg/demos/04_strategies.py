"""
Seven ways to get a sparse network
==================================

Every strategy builds a candidate (mask + starting weights) from the same
initialization; all candidates are then finetuned identically.
"""

import time

from dualticket import (RELU, CycleSchedule, ExtrusionConfig, LambdaSchedule, LrSchedule, SgdConfig, SparsityPlan,
                        TrainConfig, build_network, dense, finetune, gen_synthetic, init_params, strategy_eb,
                        strategy_l1, strategy_lth, strategy_lth_iter, strategy_rst, strategy_rst_iter,
                        strategy_scratch)

train, test = gen_synthetic("spirals", n_per_class=200, classes=3, noise=0.05, seed=1)
net = build_network([dense(64), RELU, dense(64), RELU, dense(64), RELU, dense(3)], input_shape=(2,))
init = init_params(net, seed=1)
plan = SparsityPlan(0.9)

sgd = SgdConfig(momentum=0.9, weight_decay=5e-4, batch_size=32,
                schedule=LrSchedule(((0, 0.05), (30, 0.005), (45, 0.0005))))
ft = TrainConfig(sgd, epochs=50, warmup=(2, 0.005))
mini = TrainConfig(sgd, epochs=10)
lam = LambdaSchedule(0.0, 2e-3, 1.0, v_eta=2, v_s=1000)
lam_iter = LambdaSchedule(0.0, 5e-3, 1.0, v_eta=1, v_s=200)
ext = ExtrusionConfig(lr=1e-3, batch_size=32)

builders = {
    "l1": lambda: strategy_l1(init, plan, ft, train, 1),
    "lth": lambda: strategy_lth(init, plan, ft, train, 1),
    "lth_iter": lambda: strategy_lth_iter(init, plan, CycleSchedule(5, mini), train, 1),
    "eb": lambda: strategy_eb(init, plan, ft, train, 0.125, 1),
    "scratch": lambda: strategy_scratch(init, plan, 1),
    "rst": lambda: strategy_rst(init, plan, 1, lam, train, ext),
    "rst_iter": lambda: strategy_rst_iter(init, plan, 1, 5, lam_iter, train, ext),
}

print(f"{'strategy':<10}{'k_m':>14}{'k_w':>5}{'start acc':>11}{'final acc':>11}{'cost':>8}{'secs':>7}")
for name, build in builders.items():
    t0 = time.perf_counter()
    cand = build()
    res = finetune(cand, ft, train, test, seed=1)
    p = cand.provenance
    print(f"{name:<10}{p.k_m:>14}{p.k_w:>5}{res.epochs[0].test_accuracy:>10.1f}%"
          f"{res.final_accuracy:>10.1f}%{p.cost_epochs:>8.1f}{time.perf_counter() - t0:>7.1f}")

# scratch and rst start from the same random mask
print("same mask:", strategy_scratch(init, plan, 1).mask == strategy_rst(init, plan, 1, lam, train, ext).mask)
