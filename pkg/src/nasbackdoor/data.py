"""Datasets: seeded synthetic blobs and the CIFAR-10 binary record format."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter


@dataclass
class LabeledDataset:
    images: torch.Tensor  # (N, H, W, C) float32 in [0, 1]
    labels: torch.Tensor  # (N,) int64

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx) -> "LabeledDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx])


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    image_size: tuple[int, int, int] = (8, 8, 3)
    train_per_class: int = 500
    test_per_class: int = 125
    noise_std: float = 0.1
    smoothing: float = 1.0


def class_prototypes(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """One smoothed-noise image per class, rescaled to span [0.1, 0.9]."""
    rng = np.random.default_rng([seed, 0])
    h, w, c = spec.image_size
    protos = []
    for _ in range(spec.num_classes):
        img = gaussian_filter(rng.random((h, w, c)), sigma=(spec.smoothing, spec.smoothing, 0), mode="wrap")
        img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
        protos.append(0.1 + 0.8 * img)
    return np.stack(protos)


def make_synthetic(spec: SyntheticSpec, seed: int, split: str = "train") -> LabeledDataset:
    """Balanced Gaussian blobs around seeded class prototypes, clipped to [0, 1]."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    protos = class_prototypes(spec, seed)
    per_class = spec.train_per_class if split == "train" else spec.test_per_class
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    rng.shuffle(labels)
    noise = rng.normal(0.0, spec.noise_std, size=(len(labels), *spec.image_size))
    images = np.clip(protos[labels] + noise, 0.0, 1.0)
    return LabeledDataset(
        torch.as_tensor(images, dtype=torch.float32),
        torch.as_tensor(labels, dtype=torch.long),
    )


def make_synthetic_splits(spec: SyntheticSpec, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    return make_synthetic(spec, seed, "train"), make_synthetic(spec, seed, "test")


CIFAR_RECORD = 3073


def load_cifar10_binary(path: str | os.PathLike) -> LabeledDataset:
    """Read CIFAR-10 binary records (1 label byte + 3 x 1024 channel planes)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        full = raw.size // CIFAR_RECORD
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at byte offset {full * CIFAR_RECORD}"
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: label byte {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return LabeledDataset(
        torch.as_tensor(images.astype(np.float32) / 255.0),
        torch.as_tensor(labels.astype(np.int64)),
    )
