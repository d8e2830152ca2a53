"""Image datasets: CIFAR-10 binary batches and a synthetic offline fallback.

The synthetic task renders each class as a colour cast plus an oriented
sinusoidal grating with random phase, buried in Gaussian pixel noise.
``separability`` scales the class signal relative to the noise, so the task
ranges from trivial to near chance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

log = logging.getLogger(__name__)

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
_CIFAR_RECORD = 1 + 3 * 32 * 32
_TEMPLATE_SEED = 20_211_029


class DataError(IOError):
    pass


@dataclass
class Dataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = "data"

    def __post_init__(self):
        if self.images.dim() != 4:
            raise DataError(f"images must be NCHW, got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> "Dataset":
        """Random subset of ``min(n, len(self))`` examples without replacement."""
        if len(self) == 0:
            raise DataError("cannot sample from an empty dataset")
        perm = torch.randperm(len(self), generator=generator)[: min(n, len(self))]
        return self.subset(perm)

    def batches(
        self,
        batch_size: int,
        generator: Optional[torch.Generator] = None,
        shuffle: bool = True,
        drop_last: bool = False,
    ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        stop = n - n % batch_size if drop_last else n
        for i in range(0, stop, batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


def batch_stream(data: Dataset, batch_size: int, generator: torch.Generator) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Endless shuffled batches, reshuffling after every pass."""
    if len(data) == 0:
        raise DataError("cannot draw batches from an empty dataset")
    drop_last = len(data) >= batch_size
    while True:
        yield from data.batches(batch_size, generator, shuffle=True, drop_last=drop_last)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % _CIFAR_RECORD:
        raise DataError(f"{path} is not a CIFAR-10 binary batch ({raw.size} bytes)")
    rec = raw.reshape(-1, _CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def cifar10_available(root) -> bool:
    root = Path(root) if root else None
    return bool(root) and (root / "test_batch.bin").is_file() and (root / "data_batch_1.bin").is_file()


def load_cifar10(root, train: bool = True, limit: Optional[int] = None) -> Dataset:
    """Read the standard CIFAR-10 binary batches and normalize per channel."""
    root = Path(root)
    files = [root / f"data_batch_{i}.bin" for i in range(1, 6)] if train else [root / "test_batch.bin"]
    files = [f for f in files if f.is_file()]
    if not files:
        raise DataError(f"no CIFAR-10 binary batches under {root}")
    xs, ys = zip(*(_read_cifar_file(f) for f in files))
    x = np.concatenate(xs)[:limit]
    y = np.concatenate(ys)[:limit]
    images = torch.from_numpy(x.astype(np.float32) / 255.0)
    mean = torch.tensor(CIFAR_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CIFAR_STD).view(1, 3, 1, 1)
    return Dataset((images - mean) / std, torch.from_numpy(y), 10, "cifar10-" + ("train" if train else "test"))


# ---------------------------------------------------------------------------
# Synthetic
# ---------------------------------------------------------------------------


def _class_templates(num_classes: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([_TEMPLATE_SEED, num_classes])
    colours = rng.normal(size=(num_classes, 3))
    colours /= np.linalg.norm(colours, axis=1, keepdims=True)
    angles = np.pi * (np.arange(num_classes) + rng.uniform(0, 0.5)) / num_classes
    freqs = rng.uniform(2.0, 4.0, size=num_classes)
    return colours, angles, freqs


def synthetic_dataset(
    n: int,
    num_classes: int = 3,
    separability: float = 1.0,
    size: int = 32,
    seed: int = 0,
    colour_weight: float = 0.5,
) -> Dataset:
    """Balanced synthetic classification set.

    Class templates are fixed per ``num_classes`` so train and test sets drawn
    with different seeds share the same task.

    Args:
        n: number of images.
        separability: amplitude of the class signal; pixel noise has unit std.
        colour_weight: share of the signal carried by the global colour cast;
            the rest is the grating, which only spatial filters can detect.
    """
    if n <= 0:
        raise DataError("synthetic dataset needs n > 0")
    colours, angles, freqs = _class_templates(num_classes)
    rng = np.random.default_rng([seed, num_classes, n])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    theta = angles[labels][:, None, None] + rng.normal(0, 0.1, size=(n, 1, 1))
    phase = rng.uniform(0, 2 * math.pi, size=(n, 1, 1))
    proj = xx[None] * np.cos(theta) + yy[None] * np.sin(theta)
    grating = np.cos(2 * math.pi * freqs[labels][:, None, None] * proj / size + phase)
    signal = colour_weight * colours[labels][:, :, None, None] + (1 - colour_weight) * 2.0 * grating[:, None]
    images = separability * signal + rng.normal(size=(n, 3, size, size))
    return Dataset(torch.from_numpy(images.astype(np.float32)), torch.from_numpy(labels.astype(np.int64)),
                   num_classes, f"synthetic{num_classes}")


def load_image_data(
    cifar_dir=None,
    n_train: int = 5000,
    n_test: int = 1000,
    num_classes: int = 3,
    separability: float = 1.0,
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    """CIFAR-10 when ``cifar_dir`` holds the binary batches, else the synthetic task.

    Falling back is announced with a warning because accuracies on the two are
    not comparable.
    """
    if cifar_dir and cifar10_available(cifar_dir):
        return load_cifar10(cifar_dir, True, n_train), load_cifar10(cifar_dir, False, n_test)
    if cifar_dir:
        log.warning("CIFAR-10 not found under %s; USING SYNTHETIC %d-CLASS DATA INSTEAD", cifar_dir, num_classes)
    else:
        log.warning("no CIFAR-10 directory given; USING SYNTHETIC %d-CLASS DATA", num_classes)
    train = synthetic_dataset(n_train, num_classes, separability, seed=2 * seed)
    test = synthetic_dataset(n_test, num_classes, separability, seed=2 * seed + 1)
    return train, test
