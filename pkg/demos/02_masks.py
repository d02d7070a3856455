"""
Random and magnitude masks
==========================

Which layers get pruned, how many weights survive, and how masks are
audited and saved.
"""

import tempfile
from pathlib import Path

import numpy as np

from dualticket import (RELU, SparsityPlan, audit_sparsity, build_network, dense, init_params, load_mask,
                        magnitude_mask, random_mask, save_mask)
from dualticket.mask import complement

net = build_network([dense(64), RELU, dense(64), RELU, dense(32), RELU, dense(10)], input_shape=(20,))
params = init_params(net, seed=0)

# first and last weight layers are exempt by default
print("prunable:", net.prunable_ids)

########### Random mask at 90% sparsity
plan = SparsityPlan(0.9)
rand = random_mask(params, plan, seed=0)
print(audit_sparsity(rand).format())

# 64*64 = 4096 weights, 10% kept -> floor(409.6) = 409
print("kept in 2.weight:", rand.popcount()["2.weight"])

########### Magnitude mask on the same weights
mag = magnitude_mask(params, plan)
w = np.abs(params["2.weight"])
print("smallest kept |w|:", w[mag.layers["2.weight"]].min().round(6),
      " largest removed |w|:", w[~mag.layers["2.weight"]].max().round(6))

overlap = (rand.layers["2.weight"] & mag.layers["2.weight"]).sum()
print("overlap of random and magnitude selections:", overlap, "of", rand.popcount()["2.weight"])

########### Complement and files
theta_star = complement(rand)
print("penalized entries:", theta_star.popcount())

with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "rand.mask"
    save_mask(rand, path)
    print("round trip equal:", load_mask(path) == rand, " checksum", rand.checksum()[:12])
