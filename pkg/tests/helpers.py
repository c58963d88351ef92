"""Fixtures built from package types: a hand-wired perfect classifier and a black/white dataset."""

import torch

import numpy as np

from cellstream import synthcells as sc
from cellstream.trainer import Classifier


def perfect_classifier(in_channels=3, channels=(32, 64, 128)):
    """Predicts class 1 for bright inputs and class 0 for dark ones.

    Channel 0 of every conv block carries the summed input intensity via the
    centre tap; the head thresholds its global average at half brightness.
    """
    model = Classifier(in_channels, 2, channels)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
        convs[0].weight[0, :, 1, 1] = 1.0
        for conv in convs[1:]:
            conv.weight[0, 0, 1, 1] = 1.0
        model.head.weight[1, 0] = 10.0
        model.head.bias[1] = -5.0 * in_channels
    return model.eval()


def uniform_dataset(out_dir, n=10, frames=4, side=16):
    """Videos that are all white (label 1) or all black (label 0) for both tasks."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "videos").mkdir(exist_ok=True)
    splits = sc.assign_splits(n, 0)
    entries = []
    for i in range(n):
        label = i % 2
        rel = f"videos/{i:05d}.vid"
        sc.write_sample(out_dir / rel, np.full((frames, 3, side, side), 255 * label, dtype=np.uint8))
        entries.append(sc.ManifestEntry(
            index=i, path=rel, seed=i, rbc_count=5000 + label, wbc_count=202 + label, rbc_high=label,
            wbc_high=label, category="clear", b=0, noise_sigma=0.0, l_rbc=float(label), l_wbc=float(label),
            split=splits[i], sha256=sc._file_digest(out_dir / rel)))
    cfg = sc.GeneratorConfig(n_videos=n, n_frames=frames, height=side, width=side)
    manifest = sc.DatasetManifest(entries, cfg.to_dict(), 0, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
