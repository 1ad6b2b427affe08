import struct

import numpy as np
import pytest

from splitfed.data import (
    DataError,
    Dataset,
    IdxFormatError,
    iid_shards,
    read_idx,
    synth_blobs,
    synth_images,
    train_test_split,
    write_idx,
)
from splitfed.tensor import Dense, NetworkSpec, accuracy, backward, build_network, sgd_step


def test_blobs_deterministic_and_balanced():
    a, b = synth_blobs(300, 3, 2, seed=1), synth_blobs(300, 3, 2, seed=1)
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.class_counts(), [100, 100, 100])
    assert synth_blobs(301, 3, 2, 0).class_counts().tolist() == [101, 100, 100]


def test_blobs_errors():
    with pytest.raises(DataError):
        synth_blobs(2, 3, 2, 0)
    with pytest.raises(DataError):
        synth_blobs(10, 3, 0, 0)


def test_linear_classifier_separates_blobs():
    ds = synth_blobs(600, 4, 5, seed=2, separation=6.0)
    net = build_network([Dense(in_dim=5, out_dim=4)], (5,), 4, seed=0)
    for _ in range(300):
        net = sgd_step(net, backward(net, ds.features, ds.labels), 0.1)
    assert accuracy(net, ds.features, ds.labels) >= 95.0


def test_split_and_shards_disjoint():
    ds = synth_blobs(100, 2, 3, 0)
    ds = Dataset(np.column_stack([ds.features, np.arange(100)]), ds.labels, 2)
    tr, te = train_test_split(ds, 0.3, 5)
    ids_tr, ids_te = set(tr.features[:, -1]), set(te.features[:, -1])
    assert not ids_tr & ids_te and len(ids_tr | ids_te) == 100
    shards = iid_shards(tr, 3, 5)
    assert [len(s) for s in shards] == [23, 23, 23]
    seen = [set(s.features[:, -1]) for s in shards]
    assert not (seen[0] & seen[1]) and not (seen[1] & seen[2])
    assert [len(s) for s in iid_shards(tr, 2, 5, sizes=[10, 50])] == [10, 50]
    with pytest.raises(DataError):
        iid_shards(tr, 2, 5, sizes=[60, 20])


def test_idx_round_trip(tmp_path):
    ds = synth_images(50, 10, 28, seed=3)
    write_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
    back = read_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    assert back.features.shape == (50, 1, 28, 28)
    q = np.rint(ds.features * 255) / 255
    assert back.features.tobytes() == q.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    write_idx(back, tmp_path / "x2.idx", tmp_path / "y2.idx")
    assert (tmp_path / "x2.idx").read_bytes() == (tmp_path / "x.idx").read_bytes()


def test_idx_header_only_is_empty(tmp_path):
    (tmp_path / "x").write_bytes(struct.pack(">4I", 0x803, 0, 28, 28))
    (tmp_path / "y").write_bytes(struct.pack(">2I", 0x801, 0))
    ds = read_idx(tmp_path / "x", tmp_path / "y")
    assert len(ds) == 0


def test_idx_errors_carry_offsets(tmp_path):
    (tmp_path / "x").write_bytes(struct.pack(">4I", 0x801, 1, 2, 2) + bytes(4))
    (tmp_path / "y").write_bytes(struct.pack(">2I", 0x801, 1) + bytes(1))
    with pytest.raises(IdxFormatError) as err:
        read_idx(tmp_path / "x", tmp_path / "y")
    assert err.value.offset == 0
    (tmp_path / "x").write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(IdxFormatError) as err:
        read_idx(tmp_path / "x", tmp_path / "y")
    assert err.value.offset == 21
    (tmp_path / "x").write_bytes(struct.pack(">4I", 0x803, 2, 2, 2) + bytes(8))
    (tmp_path / "y").write_bytes(struct.pack(">2I", 0x801, 1) + bytes(1))
    with pytest.raises(DataError, match="2 images but"):
        read_idx(tmp_path / "x", tmp_path / "y")
    (tmp_path / "x").write_bytes(struct.pack(">2I", 0x803, 2))
    with pytest.raises(IdxFormatError, match="truncated header"):
        read_idx(tmp_path / "x", tmp_path / "y")
