"""End-to-end protocols: video classification and the noisy-label study."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import labelnoise, trainer
from .augment import CropSpec
from .labelnoise import CIFAR10_PAIR_MAP, LabeledImageSet, NoiseSpec

logger = logging.getLogger(__name__)


@dataclass
class NoisyLabelConfig:
    n_train: int = 10_000
    n_val: int = 1_000
    n_test: int = 2_000
    noise_rate: float = 0.2
    transition_map: dict | None = None
    label_smoothing: float = 0.4
    epochs: int = 30
    batch_size: int = 128
    weight_decay: float = 0.01
    views: int = 50
    seeds: tuple[int, ...] = (42, 0, 17)
    crop: CropSpec = field(default_factory=CropSpec)
    cifar_dir: str | None = None
    data_seed: int = 2024

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, weight_decay=self.weight_decay,
            label_smoothing=self.label_smoothing, seeds=tuple(self.seeds), crop=self.crop,
            eval_views=self.views, lr_schedule="cosine",
        )


def load_image_data(cfg: NoisyLabelConfig) -> tuple[LabeledImageSet, LabeledImageSet, LabeledImageSet, str]:
    """(train, val, test, source name). CIFAR-10 when available, else synthetic cells."""
    rng = np.random.default_rng(cfg.data_seed)
    if cfg.cifar_dir and Path(cfg.cifar_dir).exists():
        full, test = labelnoise.cifar10_load(cfg.cifar_dir)
        order = rng.permutation(len(full))
        train = full.subset(order[:cfg.n_train])
        val = full.subset(order[cfg.n_train:cfg.n_train + cfg.n_val])
        test = test.subset(rng.permutation(len(test))[:cfg.n_test])
        return train, val, test, "cifar10"
    logger.info("CIFAR-10 not found; using the synthetic two-class cell image set")
    train = labelnoise.synthetic_two_class_set(cfg.n_train, cfg.data_seed)
    val = labelnoise.synthetic_two_class_set(cfg.n_val, cfg.data_seed + 1)
    test = labelnoise.synthetic_two_class_set(cfg.n_test, cfg.data_seed + 2)
    return train, val, test, "synthetic"


def default_map(num_classes: int) -> dict:
    if num_classes == 10:
        return dict(CIFAR10_PAIR_MAP)
    # two classes: high is mislabelled as low, never the reverse
    return {1: 0}


def noisy_label_protocol(cfg: NoisyLabelConfig, out_dir=None, data=None):
    """Train on noisy training labels (clean val/test), report baseline and multi-view accuracy."""
    train, val, test, source = data or load_image_data(cfg)
    k = int(max(train.labels.max(), test.labels.max())) + 1
    spec = NoiseSpec(cfg.noise_rate, k, cfg.transition_map or default_map(k), seed=cfg.data_seed)
    noisy, flipped = labelnoise.noisy_copy(train, spec)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        labelnoise.write_flip_audit(Path(out_dir) / "flipped_labels.json", train.labels, noisy.labels, flipped)
    tcfg = cfg.train_config()
    tr = trainer.ImageViewSet(noisy.images, noisy.labels, cfg.crop, k)
    va = trainer.ImageViewSet(val.images, val.labels, cfg.crop, k)
    te = trainer.ImageViewSet(test.images, test.labels, cfg.crop, k)
    runs = []
    for seed in cfg.seeds:
        model, metrics = trainer.train_views(tcfg, tr, va, seed)
        metrics.test_acc = trainer.evaluate(model, te, m=cfg.views, seed=tcfg.eval_seed)
        logger.info("seed %d: %s", seed, metrics.test_acc)
        runs.append(metrics)
        if out_dir is not None:
            trainer.write_run(out_dir, model, metrics, tcfg)
    summary = trainer.summarize(runs)
    summary["_meta"] = {"source": source, "flipped": int(len(flipped)), "n_train": len(train)}
    return runs, summary
