import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualticket import tensor as T
from dualticket.errors import ConfigurationError, FormatError, InputError
from dualticket.mask import Mask, SparsityPlan, random_mask
from dualticket.network import (FLATTEN, RELU, LayerSpec, build_network, conv, dense, forward, init_params,
                                load_params, save_params)


def cnn():
    return build_network([conv(8, 3, in_channels=1), RELU, FLATTEN, dense(64), RELU, dense(10)], (1, 8, 8))


def mlp():
    return build_network([dense(16), RELU, dense(12), RELU, dense(3)], (5,))


def test_two_layer_mlp_has_nothing_prunable_and_warns():
    with pytest.warns(UserWarning, match="no prunable"):
        net = build_network([dense(300, 784), RELU, dense(10, 300)])
    assert len(net.weight_ids()) == 2
    assert net.prunable_ids == ()


def test_cnn_prunes_only_the_middle_dense_layer():
    net = cnn()
    assert net.prunable_ids == ("3.weight",)
    assert net.param_shapes["3.weight"] == (8 * 6 * 6, 64)


def test_prune_all_override():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        net = build_network([dense(300, 784), RELU, dense(10, 300)], prune_all=True)
    assert net.prunable_ids == ("0.weight", "2.weight")


def test_explicit_prunable_flag_wins():
    net = build_network([dense(8, prunable=True), RELU, dense(4), RELU, dense(2)], (3,))
    assert net.prunable_ids == ("0.weight", "2.weight")


def test_shape_mismatch_names_offending_pair():
    with pytest.raises(ConfigurationError, match=r"layer 1 \(relu\) and layer 2 \(dense\)"):
        build_network([dense(8), RELU, dense(4, in_features=9)], (3,))
    with pytest.raises(ConfigurationError, match="flat input"):
        build_network([conv(4, 3), RELU, dense(2)], (1, 5, 5))


def test_parameterless_layers_cannot_be_prunable():
    with pytest.raises(ConfigurationError):
        build_network([dense(4), LayerSpec("relu", prunable=True), dense(2)], (3,))


def test_init_is_seed_deterministic():
    net = cnn()
    a, b = init_params(net, 7), init_params(net, 7)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    assert a.checksum() == b.checksum()
    assert init_params(net, 8).checksum() != a.checksum()


def test_biases_start_at_zero():
    p = init_params(cnn(), 0)
    for k in p:
        if k.endswith(".bias"):
            assert not p[k].any()


def test_he_normal_std():
    net = build_network([dense(300, 784), RELU, dense(10)], prune_all=True)
    stds = [init_params(net, s)["0.weight"].std() for s in range(3)]
    target = math.sqrt(2 / 784)
    for s in stds:
        assert abs(s - target) / target < 0.05


def test_init_snapshot_is_read_only():
    p = init_params(mlp(), 0)
    with pytest.raises(ValueError):
        p.init_snapshot["0.weight"][0, 0] = 1.0


def _sample(net, rng, n=4):
    return rng.normal(size=(n, *net.input_shape))


def test_all_ones_mask_is_identity(rng):
    net = cnn()
    p = init_params(net, 0)
    x = _sample(net, rng)
    assert np.array_equal(forward(net, p, Mask.ones(net), x).data, forward(net, p, None, x).data)


def test_all_zero_mask_equals_zeroed_layer(rng):
    net = cnn()
    p = init_params(net, 0)
    x = _sample(net, rng)
    zero = Mask({"3.weight": np.zeros((288, 64), bool)})
    q = p.copy()
    q.params["3.weight"].data = np.zeros((288, 64))
    assert np.array_equal(forward(net, p, zero, x).data, forward(net, q, None, x).data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.5, 0.9, 0.98]))
def test_masked_forward_equals_destructive_zeroing(seed, ratio):
    net = build_network([dense(16), RELU, dense(12), RELU, dense(8), RELU, dense(3)], (5,))
    p = init_params(net, seed % 1000)
    m = random_mask(p, SparsityPlan(ratio), seed)
    q = p.copy()
    for pid, keep in m.layers.items():
        q.params[pid].data = np.where(keep, q[pid], 0.0)
    x = np.random.default_rng(seed).normal(size=(6, 5))
    a, b = forward(net, p, m, x).data, forward(net, q, None, x).data
    assert a.tobytes() == b.tobytes()


def test_masked_weights_get_no_gradient(rng):
    net = mlp()
    p = init_params(net, 0)
    m = random_mask(p, SparsityPlan(0.5), 0)
    loss = T.softmax_cross_entropy(forward(net, p, m, rng.normal(size=(8, 5))), rng.integers(0, 3, 8))
    T.backward(loss)
    assert not p.params["2.weight"].grad[~m.layers["2.weight"]].any()


def test_mask_shape_mismatch_is_input_error(rng):
    net = mlp()
    p = init_params(net, 0)
    with pytest.raises(InputError):
        forward(net, p, Mask({"2.weight": np.ones((3, 3), bool)}), rng.normal(size=(2, 5)))
    with pytest.raises(InputError):
        forward(net, p, Mask({"0.weight": np.ones((5, 16), bool)}), rng.normal(size=(2, 5)))


def test_batch_shape_mismatch(rng):
    net = mlp()
    with pytest.raises(InputError):
        forward(net, init_params(net, 0), None, rng.normal(size=(2, 4)))


def test_nonzero_counts_match_popcount():
    net = mlp()
    p = init_params(net, 0)
    m = random_mask(p, SparsityPlan(0.7), 3)
    q = p.copy()
    for pid, keep in m.layers.items():
        q.params[pid].data = np.where(keep, q[pid], 0.0)
    assert q.nonzero_counts()["2.weight"] == m.popcount()["2.weight"]


def test_save_load_round_trip(tmp_path):
    net = cnn()
    p = init_params(net, 3)
    p.params["0.weight"].data = p["0.weight"] + 1.0
    save_params(p, tmp_path / "p.bin")
    q = load_params(net, tmp_path / "p.bin")
    assert list(q.params) == list(p.params)
    assert q.checksum() == p.checksum()
    assert q.checksum(snapshot=True) == p.checksum(snapshot=True)


def test_load_rejects_truncated_file(tmp_path):
    net = mlp()
    save_params(init_params(net, 0), tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "q.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_params(net, tmp_path / "q.bin")
