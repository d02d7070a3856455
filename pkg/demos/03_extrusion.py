"""
Squeezing removed weights out with a growing L2 penalty
=======================================================

A random 90% mask on a blob-classification MLP. The penalty weight ramps
from 0 to 1; the norm of the soon-to-be-removed weights collapses while
the network keeps learning the task.
"""

from dualticket import (RELU, ExtrusionConfig, LambdaSchedule, SparsityPlan, build_network, dense, extra_cost,
                        extrusion_run, gen_synthetic, init_params, random_mask)
from dualticket.mask import complement
from dualticket.optim import theta_star_norm
from dualticket.strategies import evaluate, pruned

train, test = gen_synthetic("blobs", n_per_class=250, classes=4, noise=0.5, seed=0, features=16)
net = build_network([dense(64), RELU, dense(64), RELU, dense(4)], input_shape=(16,))
init = init_params(net, seed=0)
mask = random_mask(init, SparsityPlan(0.9), seed=0)

########### Schedule: +1e-3 every 5 iterations up to 1, then 4000 more
sched = LambdaSchedule(lambda0=0.0, eta=1e-3, lambda_b=1.0, v_eta=5, v_s=4000)
print("ramp iterations:", sched.ramp_iterations(), " total:", sched.total_iterations())
print("extra cost in epochs:", extra_cost(sched, 64, len(train)))

res = extrusion_run(net, init, mask, sched, train, ExtrusionConfig(lr=1e-3, batch_size=64), seed=0)

print(f"{'iter':>6} {'lambda':>7} {'|theta*|':>10}")
for it, lam, norm in res.trace[::10]:
    print(f"{it:>6} {lam:>7.3f} {norm:>10.4f}")

########### Removing theta* changes almost nothing
theta_star = complement(mask)
print("norm before / after:", round(theta_star_norm(init, theta_star), 3),
      round(theta_star_norm(res.params, theta_star), 5))
loss_kept, acc_kept = evaluate(net, res.params, None, test)
loss_cut, acc_cut = evaluate(net, pruned(res.params, mask), None, test)
print(f"test loss {loss_kept:.5f} -> {loss_cut:.5f}, accuracy {acc_kept:.1f}% -> {acc_cut:.1f}%")
