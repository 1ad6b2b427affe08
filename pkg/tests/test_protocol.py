import numpy as np
import pytest

from splitfed.costmodel import epoch_time, setup_scenario
from splitfed.data import iid_shards, synth_blobs, train_test_split
from splitfed.labeldp import NoiseConfig
from splitfed.protocol import (
    Endpoint,
    MessageKind,
    ProtocolViolation,
    SimConfig,
    SimError,
    _Epoch,
    init_state,
    model_profile,
    run_epoch,
    run_training,
)
from splitfed.scenario import Method, Role, Topology
from splitfed.split import PlanError, SplitMode, SplitPlan
from splitfed.tensor import accuracy, mlp, predict

PLANS = {None: None, "vertical": SplitPlan(2, mode=SplitMode.VERTICAL), "u_shaped": SplitPlan(2, 4)}


@pytest.fixture(scope="module")
def data():
    ds = synth_blobs(240, 3, 4, seed=1)
    tr, te = train_test_split(ds, 0.25, 1)
    return iid_shards(tr, 4, 1), te


def net():
    return mlp([4, 16, 16, 3], seed=3)


def cfg_for(method, **kw):
    return SimConfig(method=method, plan=PLANS[Method(method).split], lr=0.1, batch_size=16, seed=5, **kw)


@pytest.mark.parametrize("schedule", ["parallel", "sequential"])
@pytest.mark.parametrize("method", list(Method))
def test_simulated_time_equals_closed_form(data, method, schedule):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((1, 3)), schedule=schedule)
    st = init_state(net(), cfg_for(method), shards, test)
    st, b = run_epoch(method, st, sc)
    closed = epoch_time(method, model_profile(st), sc)
    assert b.total_s == pytest.approx(closed.total_s, rel=1e-9, abs=1e-9)
    for leg in ("client_compute_s", "edge_compute_s", "central_compute_s", "ce_transfer_s", "es_transfer_s", "cs_transfer_s"):
        assert getattr(b, leg) == pytest.approx(getattr(closed, leg), rel=1e-9, abs=1e-9)
    assert b.total_s == pytest.approx(b.components_sum(), abs=1e-9)


def test_fl_compute_time_reference_cell(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((1,)))
    cfg = cfg_for("FL", timing="reference")
    st = init_state(net(), cfg, shards[:1], test)
    _, b = run_epoch("FL", st, sc)
    assert f"{b.client_compute_s:.2f}" == "88.85"
    assert f"{b.cs_transfer_s:.2f}" == "4.41"


@pytest.mark.parametrize("method", ["SFL", "USFL", "EUSFL", "ESFL"])
def test_split_epoch_equals_fl_epoch(data, method):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((2, 2)))
    ref = init_state(net(), cfg_for("FL"), shards, test)
    ref, _ = run_epoch("FL", ref, sc)
    st = init_state(net(), cfg_for(method, weighting="samples"), shards, test)
    st, _ = run_epoch(method, st, sc)
    assert np.max(np.abs(st.agg.global_weights - ref.agg.global_weights)) <= 1e-9


def test_u_shaped_message_audit(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((2, 2)))
    st = init_state(net(), cfg_for("EUSFL"), shards, test)
    st, _ = run_epoch("EUSFL", st, sc)
    counts = {k: v[0] for k, v in st.message_counts.items()}
    batches = sum(-(-len(s) // 16) for s in shards)
    for kind, src, dst in [("SMASHED_FWD", "client", "edge"), ("SMASHED_FWD", "edge", "client"),
                           ("SMASHED_GRAD", "client", "edge"), ("SMASHED_GRAD", "edge", "client")]:  # fmt: skip
        assert counts[(kind, src, dst)] == batches
    assert counts[("GLOBAL_WEIGHTS", "edge", "client")] == 4
    assert counts[("PART_WEIGHTS", "client", "edge")] == 4
    assert counts[("GLOBAL_WEIGHTS", "central", "edge")] == 2
    assert counts[("MERGED_WEIGHTS", "edge", "central")] == 2
    assert not any(k[0] == "LABELS" for k in counts)
    assert st.privacy_events == []


def test_vertical_split_logs_label_disclosure(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((4,)))
    st = init_state(net(), cfg_for("SFL"), shards, test)
    st, _ = run_epoch("SFL", st, sc)
    assert st.privacy_events and all(e.kind == "label_disclosure" for e in st.privacy_events)
    assert {e.client_id for e in st.privacy_events} == {0, 1, 2, 3}


def test_u_shaped_refuses_labels_and_raw_features(data):
    shards, test = data
    st = init_state(net(), cfg_for("EUSFL"), shards, test)
    ep = _Epoch(Method.EUSFL, st, setup_scenario(1))
    c, e = Endpoint(Role.CLIENT, 0), Endpoint(Role.EDGE, 0)
    with pytest.raises(ProtocolViolation):
        ep._send(MessageKind.LABELS, 64, c, e)
    with pytest.raises(ProtocolViolation):
        ep._send(MessageKind.SMASHED_FWD, 64, c, e, producer_cut=0)
    with pytest.raises(ProtocolViolation):
        ep._send(MessageKind.MERGED_WEIGHTS, 64, c, e)
    with pytest.raises(ProtocolViolation):
        ep._send(MessageKind.PART_WEIGHTS, 0, c, e)


def test_plan_required_for_split_methods():
    with pytest.raises(PlanError):
        SimConfig(method="USFL")
    with pytest.raises(PlanError):
        SimConfig(method="USFL", plan=SplitPlan(2, mode=SplitMode.VERTICAL))


def test_run_training_determinism_and_epochs(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((2, 2)))
    cfg = cfg_for("EUSFL", noise=NoiseConfig(4.0, dims=3))
    a = run_training(sc, 3, net(), cfg, shards, test)
    b = run_training(sc, 3, net(), cfg, shards, test)
    assert a.to_csv() == b.to_csv() and a.summary_csv() == b.summary_csv()
    assert a.final_weights.tobytes() == b.final_weights.tobytes()
    with pytest.raises(SimError):
        run_training(sc, 0, net(), cfg, shards, test)


def test_accuracy_definition():
    model = net()
    x = np.random.default_rng(0).standard_normal((7, 4))
    labels = np.zeros(7, dtype=int)
    got = accuracy(model, x, labels)
    assert got == (predict(model, x) == labels).sum() / 7 * 100


def test_noise_modes_and_labeldp_changes_training(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((4,)))
    clean = run_training(sc, 2, net(), cfg_for("USFL"), shards, test)
    noisy = run_training(sc, 2, net(), cfg_for("USFL", noise=NoiseConfig(1.0, dims=3)), shards, test)
    fixed = run_training(sc, 2, net(), cfg_for("USFL", noise=NoiseConfig(1.0, dims=3), noise_mode="fixed"), shards, test)
    assert not np.array_equal(clean.final_weights, noisy.final_weights)
    assert not np.array_equal(noisy.final_weights, fixed.final_weights)


def test_schedule_changes_time_not_weights(data):
    shards, test = data
    out = {}
    for sched in ("parallel", "sequential"):
        sc = setup_scenario(1, topology=Topology((2, 2)), schedule=sched)
        out[sched] = run_training(sc, 2, net(), cfg_for("EUSFL"), shards, test)
    assert out["parallel"].final_weights.tobytes() == out["sequential"].final_weights.tobytes()
    assert out["parallel"].summary().total_s != out["sequential"].summary().total_s


def test_unequal_groups_use_unweighted_two_tier_mean(data):
    shards, test = data
    sc = setup_scenario(1, topology=Topology((1, 3)))
    hier = run_training(sc, 1, net(), cfg_for("EUSFL"), shards, test)
    flat = run_training(sc, 1, net(), cfg_for("EUSFL", weighting="samples"), shards, test)
    assert np.max(np.abs(hier.final_weights - flat.final_weights)) > 1e-6
