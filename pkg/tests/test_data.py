import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mirinf.data import (
    Dataset,
    inject_leak,
    inject_mislabels,
    load_dataset,
    make_blobs,
    parse_descriptor,
    read_csv,
    read_idx,
    restore,
    split,
    write_csv,
    write_idx,
)
from mirinf.errors import DataError

MNIST_DIR = os.environ.get("MIRINF_MNIST_DIR", "data/mnist")
MNIST = (os.path.join(MNIST_DIR, "train-images-idx3-ubyte"),
         os.path.join(MNIST_DIR, "train-labels-idx1-ubyte"))


def test_dataset_rejects_bad_shapes():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), ("a", "b", "c"), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), ("a", "b"), 2)
    with pytest.raises(DataError):
        Dataset(np.array([[0.0, np.nan]]), np.array([0]), ("a",), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1)), np.array([0, 1]), ("a", "a"), 2)


def test_dataset_arrays_are_read_only(blobs):
    with pytest.raises(ValueError):
        blobs.features[0, 0] = 1.0


def test_blobs_deterministic():
    a = load_dataset("blobs:n=200,d=2,C=2,seed=1")
    b = load_dataset({"kind": "blobs", "n": 200, "d": 2, "C": 2, "seed": 1})
    assert a.equals(b)
    assert np.array_equal(a.features, b.features)
    assert not a.equals(load_dataset("blobs:n=200,d=2,C=2,seed=2"))


def test_descriptor_parsing():
    assert parse_descriptor("csv:/x/y.csv") == {"kind": "csv", "path": "/x/y.csv"}
    assert parse_descriptor("idx:a,b")["labels_path"] == "b"
    with pytest.raises(DataError):
        parse_descriptor("parquet:x")
    with pytest.raises(DataError):
        load_dataset("blobs:n=10")


def test_csv_round_trip(tmp_path, blobs):
    path = tmp_path / "d.csv"
    write_csv(blobs, path)
    assert path.read_text().splitlines()[0] == "id,label,f0,f1,f2,f3"
    back = read_csv(path, n_classes=3)
    assert back.equals(blobs)


def test_csv_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,label,f0\na,0,1.0\nb,-1,2\n")
    with pytest.raises(DataError):
        read_csv(path)
    path.write_text("name,label,f0\na,0,1\n")
    with pytest.raises(DataError):
        read_csv(path)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lbl")
    data = read_idx(tmp_path / "img", tmp_path / "lbl")
    assert data.features.shape == (7, 12)
    assert np.array_equal(data.features, images.reshape(7, -1) / 255.0)
    assert np.array_equal(data.labels, labels)
    assert data.features.min() >= 0 and data.features.max() <= 1


def test_idx_errors(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    write_idx(images, np.zeros(3, dtype=np.uint8), tmp_path / "img", tmp_path / "lbl")
    # swapped files: magic mismatch
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "lbl", tmp_path / "img")
    write_idx(images, np.zeros(2, dtype=np.uint8), tmp_path / "img2", tmp_path / "lbl2")
    with pytest.raises(DataError):
        read_idx(tmp_path / "img", tmp_path / "lbl2")
    write_idx(images, np.full(3, 12, dtype=np.uint8), tmp_path / "img3", tmp_path / "lbl3")
    with pytest.raises(DataError):
        read_idx(tmp_path / "img3", tmp_path / "lbl3")


@pytest.mark.skipif(not all(map(os.path.exists, MNIST)),
                    reason="reference MNIST files not present")
def test_reference_mnist():
    data = read_idx(*MNIST)
    assert data.n == 60000 and data.d == 784
    assert data.labels.min() >= 0 and data.labels.max() < 10


def test_mislabels_edge_ratios(blobs):
    same, log = inject_mislabels(blobs, 0.0, 3)
    assert same.equals(blobs) and log.entries == []
    flipped, _ = inject_mislabels(blobs, 1.0, 3)
    assert np.all(flipped.labels != blobs.labels)


@given(st.floats(0, 1), st.integers(0, 2**31))
def test_mislabel_log_properties(ratio, seed):
    data = make_blobs(40, 2, 4, 1.0, 0)
    noisy, log = inject_mislabels(data, ratio, seed)
    assert len(log.entries) == int(np.floor(ratio * data.n))
    assert all(e.new_label != e.original_label for e in log.entries)
    assert restore(noisy, log).equals(data)
    again, log2 = inject_mislabels(data, ratio, seed)
    assert log2.to_dict() == log.to_dict() and again.equals(noisy)


def test_inject_leak(blobs):
    train, pool = split(blobs, [40, 20], 0)
    leaked, tst, log = inject_leak(train, pool, 5, 1)
    assert leaked.n == train.n + 5
    assert tst.n == 5
    mapping = log.leaked()
    assert sorted(mapping.values()) == sorted(tst.ids)
    for idx, source_id in mapping.items():
        assert np.array_equal(leaked.features[idx], pool.features[pool.index_of(source_id)])
    assert all(e["kind"] == "leak-duplicate-of" for e in log.to_dict()["entries"])
    assert restore(leaked, log).equals(train)
    with pytest.raises(DataError, match="no leak requested"):
        inject_leak(train, pool, 0, 1)
    with pytest.raises(DataError):
        inject_leak(train, pool, 21, 1)


def test_split_is_disjoint(blobs):
    a, b = split(blobs, [30, 20], 5)
    assert not set(a.ids) & set(b.ids)
    with pytest.raises(DataError):
        split(blobs, [50, 20], 5)
