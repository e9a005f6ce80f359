import logging
import struct

import numpy as np
import pytest

from codanets.data import (
    CIFAR_RECORD, LabeledImageSet, load_cifar_binary, load_idx, make_noisy_templates, mnist_bundled, mnist_subset,
    read_idx, save_cifar_binary, save_idx, split_train_val, subset_by_confidence, write_idx,
)
from codanets.errors import ContractError, ParseError

from test_net import tiny_net


def byte_images(rng, n, shape):
    return rng.integers(0, 256, size=(n, *shape)).astype(np.float64) / 255.0


# -- IDX -----------------------------------------------------------------------------------------------
def test_idx_round_trip(tmp_path, rng):
    ds = LabeledImageSet(byte_images(rng, 7, (1, 5, 4)), rng.integers(0, 10, 7), 10)
    save_idx(ds, tmp_path / "img", tmp_path / "lab")
    back = load_idx(tmp_path / "img", tmp_path / "lab")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "a", np.arange(6, dtype=np.uint8).reshape(2, 3))
    raw = (tmp_path / "a").read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert struct.unpack(">2I", raw[4:12]) == (2, 3)
    assert raw[12:] == bytes(range(6))
    write_idx(tmp_path / "f", np.array([1.5, -2.0], dtype=np.float32))
    assert np.array_equal(read_idx(tmp_path / "f"), [1.5, -2.0])


def test_idx_truncated_names_lengths(tmp_path):
    write_idx(tmp_path / "a", np.zeros((3, 4, 4), dtype=np.uint8))
    raw = (tmp_path / "a").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-5])
    with pytest.raises(ParseError, match=r"expected 64 bytes.*found 59") as err:
        read_idx(tmp_path / "t")
    assert err.value.offset == 59


def test_idx_bad_magic_and_type(tmp_path):
    (tmp_path / "m").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x00")
    with pytest.raises(ParseError, match="magic"):
        read_idx(tmp_path / "m")
    (tmp_path / "t").write_bytes(b"\x00\x00\x07\x01\x00\x00\x00\x00")
    with pytest.raises(ParseError, match="type"):
        read_idx(tmp_path / "t")
    (tmp_path / "s").write_bytes(b"\x00\x00")
    with pytest.raises(ParseError):
        read_idx(tmp_path / "s")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(ParseError, match="3 images.*2 labels"):
        load_idx(tmp_path / "i", tmp_path / "l")


# -- CIFAR ----------------------------------------------------------------------------------------------
def test_cifar_round_trip(tmp_path, rng):
    ds = LabeledImageSet(byte_images(rng, 5, (3, 32, 32)), rng.integers(0, 10, 5), 10)
    save_cifar_binary(ds, tmp_path / "b.bin")
    assert (tmp_path / "b.bin").stat().st_size == 5 * CIFAR_RECORD
    back = load_cifar_binary(tmp_path / "b.bin")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_cifar_record_layout(tmp_path):
    rec = np.zeros(CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 7
    rec[1] = 255                      # red plane, pixel (0, 0)
    rec[1 + 1024 + 33] = 255          # green plane, pixel (1, 1)
    rec.tofile(tmp_path / "r.bin")
    ds = load_cifar_binary(tmp_path / "r.bin")
    assert ds.labels.tolist() == [7]
    assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 1, 1, 1] == 1.0 and ds.images.sum() == 2.0


def test_cifar_errors(tmp_path):
    np.zeros(CIFAR_RECORD + 10, dtype=np.uint8).tofile(tmp_path / "short.bin")
    with pytest.raises(ParseError, match="multiple") as err:
        load_cifar_binary(tmp_path / "short.bin")
    assert err.value.offset == CIFAR_RECORD
    bad = np.zeros(2 * CIFAR_RECORD, dtype=np.uint8)
    bad[CIFAR_RECORD] = 10
    bad.tofile(tmp_path / "label.bin")
    with pytest.raises(ParseError, match="record 1") as err:
        load_cifar_binary(tmp_path / "label.bin")
    assert err.value.offset == CIFAR_RECORD


# -- bundled MNIST and splits ----------------------------------------------------------------------------------
def test_mnist_bundled_and_subset():
    full = mnist_bundled()
    assert full.images.shape == (5000, 1, 28, 28) and full.class_count == 10
    assert 0.0 <= full.images.min() and full.images.max() <= 1.0
    sub = mnist_subset((3, 7), per_class=20, source=full)
    assert len(sub) == 40 and set(sub.labels.tolist()) == {0, 1}
    assert np.array_equal(sub.images[sub.labels == 1][0], full.images[full.by_class(7)[0]])


def test_split_is_deterministic_and_disjoint(rng):
    ds = LabeledImageSet(rng.uniform(size=(200, 1, 2, 2)), rng.integers(0, 3, 200), 3)
    tr, va = split_train_val(ds)
    tr2, va2 = split_train_val(ds)
    assert np.array_equal(tr.images, tr2.images) and np.array_equal(va.images, va2.images)
    assert len(tr) + len(va) == 200 and 20 <= len(va) <= 60
    assert tr.split == "train" and va.split == "val"
    other, _ = split_train_val(ds, salt="another")
    assert not np.array_equal(other.images, tr.images)


def test_labeled_set_invariants():
    with pytest.raises(ContractError):
        LabeledImageSet(np.zeros((2, 1, 2, 2)), [0, 3], 3)
    with pytest.raises(ContractError):
        LabeledImageSet(np.zeros((2, 2, 2)), [0, 1], 3)


# -- noisy templates ---------------------------------------------------------------------------------------------
def test_noisy_templates(rng):
    templates = rng.uniform(size=(3, 16))
    clean = make_noisy_templates(templates, 6, 0.0)
    assert np.array_equal(clean.samples, templates[[0, 1, 2, 0, 1, 2]])
    a = make_noisy_templates(templates, 300, 0.5, seed=1, clip=False)
    b = make_noisy_templates(templates, 300, 0.5, seed=1, clip=False)
    assert np.array_equal(a.samples, b.samples)
    noise = a.samples - templates[a.template_index]
    assert abs(noise.mean()) <= 3 * 0.5 / np.sqrt(noise.size)
    clipped = make_noisy_templates(templates, 30, 0.5, seed=1)
    assert clipped.samples.min() >= 0 and clipped.samples.max() <= 1
    with pytest.raises(ContractError):
        make_noisy_templates(templates, 0, 0.1)


# -- confidence subsets ---------------------------------------------------------------------------------------
def test_subset_by_confidence(rng, caplog):
    ds = LabeledImageSet(rng.uniform(size=(30, 1, 6, 6)), np.arange(30) % 2, 2)
    net = tiny_net(seed=0)
    full = subset_by_confidence(ds, net, 15)
    assert sorted(map(tuple, full.images.reshape(30, -1).round(12))) == \
        sorted(map(tuple, ds.images.reshape(30, -1).round(12)))
    one = subset_by_confidence(ds, net, 1)
    assert sorted(one.labels.tolist()) == [0, 1]
    logits = net.predict(ds.images)
    score = logits[np.arange(30), ds.labels]
    top = subset_by_confidence(ds, net, 5)
    top_score = net.predict(top.images)[np.arange(10), top.labels]
    assert top_score.mean() >= score.mean()
    with caplog.at_level(logging.WARNING):
        subset_by_confidence(ds, net, 20)
    assert "taking all" in caplog.text
