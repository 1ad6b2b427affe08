import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from splitfed.aggregation import (
    AggregationError,
    AggregatorKind,
    AggregatorState,
    ModelUpdate,
    aggregate_round,
    fedavg,
    finish_client,
    hierarchical_aggregate,
    local_objective_hook,
    mean_weights,
)


def u(w, n=1, cid=0):
    return ModelUpdate(np.asarray(w, dtype=float), n, cid)


def test_fedavg_examples():
    np.testing.assert_array_equal(fedavg([u([1, 3]), u([3, 5], cid=1)]), [2, 4])
    np.testing.assert_array_equal(fedavg([u([7, -1])]), [7, -1])
    np.testing.assert_array_equal(fedavg([u([0], 1), u([4], 3, 1)]), [3])


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg([])
    with pytest.raises(AggregationError):
        fedavg([u([1, 2]), u([1, 2, 3], cid=1)])
    with pytest.raises(AggregationError):
        fedavg([u([1], 0)])


def test_hierarchical_examples():
    groups = [[u([4], cid=0)], [u([0], cid=1), u([0], cid=2), u([0], cid=3)]]
    np.testing.assert_array_equal(hierarchical_aggregate(groups), [2])
    np.testing.assert_array_equal(mean_weights([g for grp in groups for g in grp]), [1])
    np.testing.assert_array_equal(hierarchical_aggregate([[u([5, 6])]]), [5, 6])
    with pytest.raises(AggregationError):
        hierarchical_aggregate([[u([1])], []])


vectors = hnp.arrays(np.float64, 4, elements=st.floats(-1e6, 1e6))


@given(st.lists(st.tuples(vectors, st.integers(1, 50)), min_size=1, max_size=6), st.randoms())
def test_fedavg_permutation_invariant_and_in_hull(items, rnd):
    ups = [u(w, n, i) for i, (w, n) in enumerate(items)]
    out = fedavg(ups)
    shuffled = list(ups)
    rnd.shuffle(shuffled)
    np.testing.assert_allclose(fedavg(shuffled), out, rtol=1e-12, atol=1e-6)
    stack = np.stack([x.weights for x in ups])
    tol = 1e-9 * (1 + np.abs(stack).max())
    assert np.all(out >= stack.min(axis=0) - tol) and np.all(out <= stack.max(axis=0) + tol)


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_hierarchical_equal_groups_equals_flat(edges, per_edge, seed):
    rng = np.random.default_rng(seed)
    ws = rng.standard_normal((edges * per_edge, 7))
    groups = [[u(ws[j * per_edge + i], cid=j * per_edge + i) for i in range(per_edge)] for j in range(edges)]
    flat = mean_weights([x for g in groups for x in g])
    assert np.max(np.abs(hierarchical_aggregate(groups) - flat)) <= 1e-12


def test_hooks_trivial_cases():
    g = np.arange(5.0)
    st_prox = AggregatorState(AggregatorKind.FEDPROX, g, mu=0.3)
    np.testing.assert_array_equal(local_objective_hook("fedprox", g, g, st_prox), 0)
    np.testing.assert_allclose(local_objective_hook("fedprox", g, g + 1, st_prox), 0.3)
    st_sc = AggregatorState(AggregatorKind.SCAFFOLD, g)
    np.testing.assert_array_equal(local_objective_hook("scaffold", g, g + 2, st_sc, 3), 0)
    for kind in ("fedavg", "fednova"):
        np.testing.assert_array_equal(local_objective_hook(kind, g, g + 2, AggregatorState(kind, g)), 0)
    with pytest.raises(ValueError):
        local_objective_hook("fedsgd", g, g, st_sc)
    with pytest.raises(AggregationError):
        AggregatorState(AggregatorKind.FEDPROX, g, mu=-1)


def test_scaffold_option_two_update():
    g = np.zeros(3)
    st = AggregatorState(AggregatorKind.SCAFFOLD, g, lr=0.5)
    local = np.array([-1.0, 0.0, 2.0])
    finish_client(st, 0, local, 10, steps=4)
    np.testing.assert_allclose(st.client_controls[0], (g - local) / (4 * 0.5))
    aggregate_round(st, [ModelUpdate(local, 10, 0)])
    np.testing.assert_allclose(st.control, st.client_controls[0])


def test_fednova_equal_steps_is_fedavg():
    g = np.array([1.0, 1.0])
    st = AggregatorState(AggregatorKind.FEDNOVA, g)
    ups = [ModelUpdate(np.array([0.0, 2.0]), 3, 0, steps=5), ModelUpdate(np.array([2.0, 4.0]), 1, 1, steps=5)]
    np.testing.assert_allclose(aggregate_round(st, ups), fedavg(ups), atol=1e-15)


def test_fednova_normalises_steps():
    g = np.zeros(1)
    st = AggregatorState(AggregatorKind.FEDNOVA, g)
    ups = [ModelUpdate(np.array([-4.0]), 1, 0, steps=4), ModelUpdate(np.array([-1.0]), 1, 1, steps=1)]
    # per-step directions 1 and 1; tau_eff = 2.5 -> new = -2.5
    np.testing.assert_allclose(aggregate_round(st, ups), [-2.5])


def test_feddc_uploads_drift_corrected_model():
    g = np.zeros(2)
    st = AggregatorState(AggregatorKind.FEDDC, g, alpha=0.1)
    up = finish_client(st, 0, np.array([1.0, -1.0]), 5, 3)
    np.testing.assert_allclose(st.drift[0], [1.0, -1.0])
    np.testing.assert_allclose(up.weights, [2.0, -2.0])
    frozen = AggregatorState(AggregatorKind.FEDDC, g, alpha=0.0, freeze=True)
    up = finish_client(frozen, 0, np.array([1.0, -1.0]), 5, 3)
    np.testing.assert_array_equal(up.weights, [1.0, -1.0])
    np.testing.assert_array_equal(local_objective_hook("feddc", g, np.ones(2), frozen), 0)
