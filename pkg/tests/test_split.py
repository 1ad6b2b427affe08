import numpy as np
import pytest

from helpers import random_input, random_mlp, small_cnn
from splitfed.rng import substream
from splitfed.split import MergeError, PlanError, SplitMode, SplitPlan, merge, part_forward, profile, relay_step, split
from splitfed.tensor import Dense, ReLU, backward, build_network, flatten_params, forward, lenet, mlp, sgd_step


def six_layer():
    return mlp([4, 6, 5, 3], seed=0)


def test_origin_ranges():
    net = six_layer()
    assert len(net.layers) == 5
    net6 = build_network([Dense(in_dim=4, out_dim=4), ReLU()] * 2 + [Dense(in_dim=4, out_dim=4), Dense(in_dim=4, out_dim=3)], (4,), 3)
    parts = split(net6, SplitPlan(2, 4))
    assert [p.origin_range for p in parts] == [(0, 2), (2, 4), (4, 6)]


def test_boundary_cuts():
    net = six_layer()
    front, middle, rear = split(net, SplitPlan(1, len(net.layers) - 1))
    assert len(front.layers) == 1 and len(rear.layers) == 1
    assert len(middle.layers) == len(net.layers) - 2


@pytest.mark.parametrize("plan", [SplitPlan(0, 2), SplitPlan(2, 2), SplitPlan(3, 9), SplitPlan(2, None)])
def test_invalid_plans(plan):
    with pytest.raises(PlanError):
        split(six_layer(), plan)


def test_vertical_split_two_parts():
    net = six_layer()
    front, rear, none = split(net, SplitPlan(2, mode=SplitMode.VERTICAL))
    assert none is None
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_allclose(part_forward(rear, part_forward(front, x)[0])[0], forward(net, x), atol=1e-12)


def test_merge_split_identity_bitwise():
    for net in (six_layer(), small_cnn(3), lenet(10, seed=2)):
        n = len(net.layers)
        back = merge(*split(net, SplitPlan(1, n - 2)))
        assert flatten_params(back.layers).tobytes() == flatten_params(net.layers).tobytes()
        assert back.architecture() == net.architecture()


def test_merge_rejects_mismatched_parts():
    net = six_layer()
    a = split(net, SplitPlan(1, 3))
    b = split(net, SplitPlan(2, 4))
    with pytest.raises(MergeError):
        merge(a[0], b[1], b[2])
    other = split(mlp([4, 7, 5, 3], seed=0), SplitPlan(1, 3))
    with pytest.raises(MergeError):
        merge(a[0], other[1], a[2])
    with pytest.raises(MergeError):
        merge(a[0], a[2])


def test_merged_step_equals_intact_step():
    net = small_cnn(4)
    rng = np.random.default_rng(4)
    x, y = random_input(net, 5, rng), np.array([0, 1, 2, 1, 0])
    f, m, r, _ = relay_step(*split(net, SplitPlan(2, 5)), x, y, 0.1)
    intact = sgd_step(net, backward(net, x, y), 0.1)
    np.testing.assert_allclose(flatten_params(merge(f, m, r).layers), flatten_params(intact.layers), atol=1e-9)


def test_profile_conservation_and_sizes():
    net = lenet(10)
    n = len(net.layers)
    whole = sum(l.flops(s) for l, s in zip(net.layers, net.shapes))
    for c1 in range(1, n - 1):
        for c2 in range(c1 + 1, n):
            p = profile(net, SplitPlan(c1, c2), batch=8)
            assert p.m == 88_192
            assert p.flops == 8 * whole
    p = profile(net, SplitPlan(3, mode=SplitMode.VERTICAL), batch=4)
    assert p.m == 88_192 and p.flops == 4 * whole


def test_dense_flops_and_smashed_bytes():
    net = mlp([10, 120, 3], seed=0)
    p = profile(net, SplitPlan(2, mode=SplitMode.VERTICAL), batch=64)
    assert p.d1 == 64 * 120 * 4 == 30_720
    assert net.layers[0].flops((10,)) == 2 * 10 * 120


def test_random_triples_forward_equivalence():
    rng = substream(99, "test", "triples")
    for i in range(100):
        net = random_mlp(rng, seed=i)
        n = len(net.layers)
        c1 = int(rng.integers(1, n - 1))
        c2 = int(rng.integers(c1 + 1, n))
        x = random_input(net, int(rng.integers(1, 6)), rng)
        f, m, r = split(net, SplitPlan(c1, c2))
        out = part_forward(r, part_forward(m, part_forward(f, x)[0])[0])[0]
        assert np.max(np.abs(out - forward(net, x))) <= 1e-12
