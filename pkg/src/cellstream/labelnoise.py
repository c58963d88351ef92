"""Asymmetric label noise and CIFAR-10 binary-format I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# truck -> automobile, bird -> airplane, deer -> horse, cat <-> dog
CIFAR10_PAIR_MAP = {9: 1, 2: 0, 4: 7, 3: 5, 5: 3}


class CifarFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: {msg} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class NoiseSpec:
    rate: float
    num_classes: int
    transition_map: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"noise rate must lie in [0, 1), got {self.rate}")
        for src, dst in self.transition_map.items():
            if not (0 <= int(src) < self.num_classes and 0 <= int(dst) < self.num_classes):
                raise ValueError(f"transition {src}->{dst} outside [0, {self.num_classes})")

    def table(self) -> np.ndarray:
        """Total class map as an array; unmapped classes map to themselves."""
        t = np.arange(self.num_classes)
        for src, dst in self.transition_map.items():
            t[int(src)] = int(dst)
        return t


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = "clean"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("image set is empty")
        if self.images.ndim != 4 or self.images.shape[0] != len(self.labels):
            raise ValueError(f"images {self.images.shape} do not match {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.provenance)


def asymmetric_flip(labels, spec: NoiseSpec, rng: np.random.Generator | None = None):
    """Flip each label to ``transition_map[label]`` with probability ``rate``.

    Returns the new labels and the sorted indices that actually changed.
    One uniform draw is made per sample, so a fixed seed reproduces the
    same flips whatever the map.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ValueError("labels outside [0, num_classes)")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    u = rng.random(labels.shape[0])
    target = spec.table()[labels]
    flip = (u < spec.rate) & (target != labels)
    out = np.where(flip, target, labels)
    return out, np.nonzero(flip)[0]


def expected_flip_fraction(labels, spec: NoiseSpec) -> float:
    labels = np.asarray(labels)
    return spec.rate * float(np.mean(spec.table()[labels] != labels))


def write_flip_audit(path, old_labels, new_labels, flipped) -> None:
    records = [{"index": int(i), "old": int(old_labels[i]), "new": int(new_labels[i])} for i in flipped]
    Path(path).write_text(json.dumps(records, indent=0))


# -- CIFAR-10 binary format ---------------------------------------------------

def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes of 32x32)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) == 0:
        raise CifarFormatError(path, 0, "empty file")
    whole = len(data) // RECORD
    if len(data) % RECORD:
        raise CifarFormatError(path, whole * RECORD, f"truncated record ({len(data) % RECORD} of {RECORD} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(whole, RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise CifarFormatError(path, int(bad[0]) * RECORD, f"label {labels[bad[0]]} outside [0, 9]")
    images = arr[:, 1:].reshape(whole, 3, 32, 32).copy()
    return images, labels


def write_cifar_batch(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32) or len(images) != len(labels):
        raise ValueError(f"expected images [N, 3, 32, 32] with N labels, got {images.shape}")
    rec = np.concatenate([labels[:, None], images.reshape(len(images), -1)], axis=1)
    Path(path).write_bytes(rec.tobytes())


def cifar10_load(path) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Load ``data_batch_{1..5}.bin`` and ``test_batch.bin`` from ``path``."""
    path = Path(path)
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (path / f).exists()]
    if missing:
        raise FileNotFoundError(f"{path}: missing CIFAR-10 batches {missing}")
    parts = [read_cifar_batch(path / f) for f in TRAIN_FILES]
    train = LabeledImageSet(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    test = LabeledImageSet(*read_cifar_batch(path / TEST_FILE))
    return train, test


# -- synthetic two-class stand-in ----------------------------------------------

def synthetic_two_class_set(n: int, seed: int, config=None, downsample: int = 4) -> LabeledImageSet:
    """Still cell images labelled WBC-high/low, box-downsampled to 32x32 by default.

    Each image is one degraded frame of a generator video (no motion), so
    the class signal is the same white-cell density cue as in the videos.
    """
    from . import synthcells as sc

    config = config or sc.GeneratorConfig()
    side_h, side_w = config.height // downsample, config.width // downsample
    images = np.empty((n, 3, side_h, side_w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    pop, pal = config.population, config.palette
    k = downsample * downsample
    for i in range(n):
        rng = np.random.default_rng(sc.video_seed(seed, i))
        rbc, wbc = sc.sample_population(rng, pop)
        deg = sc.assign_degradation(rng, config.noise_sigma_range, config.category_probs)
        rbc_xy = sc.init_positions(rng, rbc, config.width, config.height)
        wbc_xy = sc.init_positions(rng, wbc, config.width, config.height)
        frame = sc.degrade(sc.render_positions(rbc_xy, wbc_xy, config.width, config.height, pal), deg, rng)
        blocks = frame[:, :side_h * downsample, :side_w * downsample].astype(np.int64)
        sums = blocks.reshape(3, side_h, downsample, side_w, downsample).sum(axis=(2, 4))
        images[i] = (2 * sums + k) // (2 * k)
        labels[i] = sc.label_counts(rbc, wbc, pop)[1]
    return LabeledImageSet(images, labels, "synthetic")


def noisy_copy(data: LabeledImageSet, spec: NoiseSpec, rng=None):
    labels, flipped = asymmetric_flip(data.labels, spec, rng)
    out = LabeledImageSet(data.images, labels, f"noisy({spec.rate:g})")
    return out, flipped

