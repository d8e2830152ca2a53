import logging

import numpy as np
import pytest
import torch

from ghnq.data import (
    DataError,
    Dataset,
    batch_stream,
    cifar10_available,
    load_cifar10,
    load_image_data,
    synthetic_dataset,
)


def _write_cifar(path, labels, seed):
    rng = np.random.default_rng(seed)
    rec = np.zeros((len(labels), 3073), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = rng.integers(0, 256, size=(len(labels), 3072))
    rec.tofile(path)
    return rec


def test_cifar_binary_reader(tmp_path):
    rec = _write_cifar(tmp_path / "data_batch_1.bin", [3, 7, 0], 0)
    _write_cifar(tmp_path / "test_batch.bin", [1, 2], 1)
    assert cifar10_available(tmp_path)
    train = load_cifar10(tmp_path, train=True)
    assert train.labels.tolist() == [3, 7, 0]
    assert train.images.shape == (3, 3, 32, 32)
    raw = rec[1, 1:].reshape(3, 32, 32)[0, 0, 5] / 255.0
    assert abs(float(train.images[1, 0, 0, 5]) - (raw - 0.4914) / 0.2470) < 1e-5
    assert len(load_cifar10(tmp_path, train=False)) == 2


def test_cifar_bad_file(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(DataError):
        load_cifar10(tmp_path, train=False)
    with pytest.raises(DataError):
        load_cifar10(tmp_path / "missing")


def test_fallback_is_loud(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        train, test = load_image_data(tmp_path, n_train=30, n_test=9)
    assert "SYNTHETIC" in caplog.text
    assert len(train) == 30 and len(test) == 9 and train.num_classes == 3


def test_synthetic_deterministic_balanced():
    a = synthetic_dataset(90, 3, seed=4)
    b = synthetic_dataset(90, 3, seed=4)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert torch.bincount(a.labels).tolist() == [30, 30, 30]
    assert not torch.equal(a.images, synthetic_dataset(90, 3, seed=5).images)


def test_synthetic_separability_controls_signal():
    def mean_gap(sep):
        d = synthetic_dataset(600, 3, sep, seed=0)
        m = torch.stack([d.images[d.labels == k].mean(dim=(0, 2, 3)) for k in range(3)])
        return float((m[0] - m[1]).norm())

    assert mean_gap(0.0) < 0.05 < mean_gap(1.0)


def test_batches_cover_dataset():
    d = Dataset(torch.arange(10.0).view(10, 1, 1, 1), torch.arange(10), 10)
    seen = torch.cat([y for _, y in d.batches(3, torch.Generator().manual_seed(0))])
    assert sorted(seen.tolist()) == list(range(10))
    stream = batch_stream(d, 4, torch.Generator().manual_seed(0))
    assert all(len(next(stream)[1]) == 4 for _ in range(6))
    with pytest.raises(DataError):
        Dataset(torch.zeros(2, 3), torch.zeros(2), 2)
