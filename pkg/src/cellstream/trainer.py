"""Small-CNN training and evaluation on augmented views.

The classifier sees one augmented view per sample per epoch. Validation
uses a fixed set of views so validation losses are comparable across
epochs, and the returned model is the checkpoint with the lowest one.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import augment, curriculum, multiview
from .augment import ClipSpec, CropSpec
from .curriculum import CurriculumParams
from .multiview import Method

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 0, 17, 9, 3)
CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1


# -- model --------------------------------------------------------------------

class Classifier(nn.Module):
    """Conv3x3 -> leaky ReLU -> 2x2 max-pool blocks, global average pool, linear head.

    ``forward`` returns class probabilities; ``logits`` the pre-softmax scores.
    Inputs are float tensors scaled to [0, 1].
    """

    def __init__(self, in_channels: int = 3, num_classes: int = 2, channels: Sequence[int] = (32, 64, 128)):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.channels = tuple(channels)
        layers = []
        c = in_channels
        for width in self.channels:
            layers += [nn.Conv2d(c, width, 3, padding=1), nn.LeakyReLU(0.01), nn.MaxPool2d(2)]
            c = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, num_classes)

    def reset_parameters(self, seed: int) -> "Classifier":
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    gain = math.sqrt(2.0 / (1 + 0.01 ** 2)) if isinstance(mod, nn.Conv2d) else 1.0
                    mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * (gain / math.sqrt(fan_in)))
                    mod.bias.zero_()
        return self

    def arch(self) -> dict:
        return {"in_channels": self.in_channels, "num_classes": self.num_classes, "channels": list(self.channels)}

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        x = self.features(x)
        return self.head(x.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def _check_batch(model: Classifier, batch) -> None:
    shape = tuple(batch.shape)
    if len(shape) != 4 or shape[1] != model.in_channels:
        raise ValueError(f"expected batch [N, {model.in_channels}, H, W], got {list(shape)}")
    min_side = 2 ** len(model.channels)
    if shape[2] < min_side or shape[3] < min_side:
        raise ValueError(f"spatial size {shape[2:]} below minimum {min_side}")


def to_input(views: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.asarray(views, dtype=np.float32) * np.float32(1 / 255)).to(dtype)


def forward(model: Classifier, batch) -> np.ndarray:
    """Prediction vectors for a batch of views in [0, 255] (numpy) or a prepared tensor."""
    _check_batch(model, batch)
    x = batch if isinstance(batch, torch.Tensor) else to_input(batch)
    with torch.no_grad():
        return model(x).double().numpy()


# -- loss and schedule --------------------------------------------------------

def smoothed_targets(target: int, k: int, ratio: float) -> np.ndarray:
    q = np.full(k, ratio / k)
    q[target] += 1.0 - ratio
    return q


def cross_entropy_ls(h, target: int, ratio: float = 0.0) -> float:
    """-sum_k q_k log h_k with q = (1 - ratio) onehot(target) + ratio / K."""
    if not 0 <= ratio < 1:
        raise ValueError(f"label smoothing ratio must lie in [0, 1), got {ratio}")
    h = multiview.check_prediction_vector(h)
    q = smoothed_targets(target, h.size, ratio)
    return float(-(q * np.log(h)).sum())


def smoothed_nll(logits: torch.Tensor, targets: torch.Tensor, ratio: float = 0.0) -> torch.Tensor:
    """Batch-mean label-smoothed cross-entropy computed from logits."""
    logp = F.log_softmax(logits, dim=1)
    k = logits.shape[1]
    nll = -logp.gather(1, targets[:, None]).squeeze(1)
    if ratio == 0:
        return nll.mean()
    return ((1 - ratio) * nll - (ratio / k) * logp.sum(dim=1)).mean()


def cosine_lr(t: float, T_total: float, lr0: float) -> float:
    if not 0 <= t <= T_total:
        raise ValueError(f"t={t} outside [0, {T_total}]")
    return 0.5 * lr0 * (1 + math.cos(math.pi * t / T_total))


# -- data ---------------------------------------------------------------------

class ViewSet:
    """Items of one split plus a rule for drawing augmented views of them."""

    num_classes = 2

    def __len__(self) -> int:
        return len(self.labels)

    def view(self, i: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def views(self, idx, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.view(int(i), rng) for i in idx])


class VideoViewSet(ViewSet):
    """Views of manifest videos: random clip, one crop shared by its frames."""

    def __init__(self, manifest, split: str, task: str, clip: ClipSpec, crop: CropSpec):
        self.manifest = manifest
        self.entries = manifest.split(split)
        self.task = task.upper()
        self.clip = clip
        self.crop = crop
        self.labels = np.array([e.label(self.task) for e in self.entries], dtype=np.int64)
        self._headers: dict = {}

    @property
    def in_channels(self) -> int:
        return 3 * self.clip.clip_len

    def _header(self, path: Path):
        if path not in self._headers:
            from .synthcells import SAMPLE_HEADER, SAMPLE_MAGIC

            with open(path, "rb") as fh:
                magic, n, h, w = SAMPLE_HEADER.unpack(fh.read(SAMPLE_HEADER.size))
            if magic != SAMPLE_MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}")
            self._headers[path] = (n, h, w)
        return self._headers[path]

    def read_frames(self, i: int, start: int, count: int) -> np.ndarray:
        from .synthcells import SAMPLE_HEADER

        path = self.manifest.sample_path(self.entries[i])
        n, h, w = self._header(path)
        frame_bytes = 3 * h * w
        with open(path, "rb") as fh:
            fh.seek(SAMPLE_HEADER.size + start * frame_bytes)
            buf = fh.read(count * frame_bytes)
        if len(buf) != count * frame_bytes:
            raise ValueError(f"{path}: truncated at frame {start}")
        return np.frombuffer(buf, dtype=np.uint8).reshape(count, 3, h, w)

    def view(self, i: int, rng: np.random.Generator) -> np.ndarray:
        n, h, w = self._header(self.manifest.sample_path(self.entries[i]))
        if self.clip.clip_len > n:
            raise ValueError(f"clip_len {self.clip.clip_len} exceeds video length {n}")
        # same draw order as augment.make_view: clip start, then crop
        start = int(rng.integers(0, n - self.clip.clip_len + 1))
        frames = self.read_frames(i, start, self.clip.clip_len)
        out = augment.random_resized_crop(frames, self.crop, rng)
        return out.reshape((-1,) + out.shape[-2:])


class ImageViewSet(ViewSet):
    """Views of still images [N, 3, H, W] by random resized crop."""

    def __init__(self, images: np.ndarray, labels, crop: CropSpec, num_classes: int | None = None):
        self.images = np.asarray(images, dtype=np.uint8)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.crop = crop
        self.num_classes = num_classes or int(self.labels.max()) + 1
        self.entries = None

    @property
    def in_channels(self) -> int:
        return self.images.shape[1]

    def view(self, i: int, rng: np.random.Generator) -> np.ndarray:
        return augment.random_resized_crop(self.images[i], self.crop, rng)


# -- configuration and metrics ------------------------------------------------

@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 60
    lr_schedule: str = "cosine"
    label_smoothing: float = 0.0
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    curriculum: CurriculumParams | None = None
    task: str = "WBC"
    clip_len: int = 1
    crop: CropSpec = field(default_factory=CropSpec)
    channels: tuple[int, ...] = (32, 64, 128)
    eval_views: int = 10
    eval_seed: int = 1234

    # free choices made by this package; listed in every manifest and checkpoint
    CONVENTIONS = ("beta2", "eps", "weight_decay", "batch_size", "channels", "eval_seed")

    def validate(self) -> None:
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.task.upper() not in ("WBC", "RBC"):
            raise ValueError(f"task must be WBC or RBC, got {self.task!r}")
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.eval_views < 1:
            raise ValueError("eval_views must be >= 1")

    def lr_at(self, t: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr0
        return cosine_lr(t, self.epochs, self.lr0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conventions"] = list(self.CONVENTIONS)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "conventions"}
        if isinstance(d.get("curriculum"), dict):
            d["curriculum"] = CurriculumParams(**d["curriculum"])
        if isinstance(d.get("crop"), dict):
            d["crop"] = CropSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["crop"].items()})
        for key in ("seeds", "channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class RunMetrics:
    seed: int
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    n_eligible: list[int] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    test_acc: dict = field(default_factory=dict)

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr", "n_eligible")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_FIELDS)
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.val_acc, self.lr, self.n_eligible):
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), repr(row[4]), row[5]])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize(runs: Sequence[RunMetrics]) -> dict:
    """Mean and sample standard deviation of test accuracy per method."""
    out = {}
    methods = sorted({k for r in runs for k in r.test_acc})
    for m in methods:
        vals = np.array([r.test_acc[m] for r in runs if m in r.test_acc], dtype=float)
        std = float(vals.std(ddof=1)) if len(vals) >= 2 else float("nan")
        out[m] = {"mean": float(vals.mean()), "std": std, "n": int(len(vals)), "values": vals.tolist()}
    return out


# -- training -----------------------------------------------------------------

def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _eval_loss_acc(model: Classifier, x: torch.Tensor, y: torch.Tensor, ratio: float, batch: int = 256):
    total, correct = 0.0, 0
    with torch.no_grad():
        for sl in _batches(len(y), batch):
            logits = model.logits(x[sl])
            total += float(smoothed_nll(logits, y[sl], ratio)) * (sl.stop - sl.start)
            correct += int((logits.argmax(dim=1) == y[sl]).sum())
    n = max(1, len(y))
    return total / n, 100.0 * correct / n


def train_views(config: TrainConfig, train_set: ViewSet, val_set: ViewSet, seed: int,
                on_epoch=None) -> tuple[Classifier, RunMetrics]:
    """Train one model; returns the lowest-validation-loss checkpoint and its history."""
    config.validate()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = Classifier(train_set.in_channels, train_set.num_classes, config.channels).reset_parameters(seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0, betas=(config.beta1, config.beta2),
                           eps=config.eps, weight_decay=config.weight_decay)
    # fixed validation views, identical every epoch
    val_x = to_input(val_set.views(range(len(val_set)), np.random.default_rng([seed, 7919])))
    val_y = torch.from_numpy(val_set.labels)
    ratio = config.label_smoothing
    entries = train_set.entries
    metrics = RunMetrics(seed=seed)
    best_state = None
    all_idx = np.arange(len(train_set))

    for t in range(config.epochs):
        if config.curriculum is not None:
            if entries is None:
                raise ValueError("curriculum needs a training set with difficulty features")
            chosen = curriculum.eligible_set(entries, t, config.curriculum, config.task)
            if not chosen:
                logger.warning("epoch %d: eligible set empty, using easiest 1%% of samples", t)
                chosen = curriculum.easiest(entries, config.curriculum, config.task, 0.01)
            keep = {id(e) for e in chosen}
            idx = np.array([i for i, e in enumerate(entries) if id(e) in keep], dtype=np.int64)
        else:
            idx = all_idx
        lr = config.lr_at(t)
        for group in opt.param_groups:
            group["lr"] = lr
        order = idx[rng.permutation(len(idx))]
        model.train()
        loss_sum = 0.0
        for sl in _batches(len(order), config.batch_size):
            b = order[sl]
            x = to_input(train_set.views(b, rng))
            y = torch.from_numpy(train_set.labels[b])
            loss = smoothed_nll(model.logits(x), y, ratio)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {t}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(b)
        model.eval()
        val_loss, val_acc = _eval_loss_acc(model, val_x, val_y, ratio)
        metrics.epochs.append(t)
        metrics.train_loss.append(loss_sum / max(1, len(order)))
        metrics.val_loss.append(val_loss)
        metrics.val_acc.append(val_acc)
        metrics.lr.append(lr)
        metrics.n_eligible.append(int(len(idx)))
        if val_loss < metrics.best_val_loss:
            metrics.best_val_loss = val_loss
            metrics.best_epoch = t
            best_state = copy.deepcopy(model.state_dict())
        logger.debug("seed %d epoch %d: train %.4f val %.4f acc %.1f n=%d", seed, t,
                     metrics.train_loss[-1], val_loss, val_acc, len(idx))
        if on_epoch is not None:
            on_epoch(t, metrics)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, metrics


def view_probabilities(model: Classifier, view_set: ViewSet, m: int, seed: int, batch: int = 256) -> np.ndarray:
    """[N, m, K] probabilities; sample i draws its m views from its own stream."""
    n = len(view_set)
    out = np.empty((n, m, view_set.num_classes))
    pending, where = [], []

    def flush():
        if pending:
            out[tuple(np.array(where).T)] = forward(model, np.stack(pending))
            pending.clear()
            where.clear()

    for i in range(n):
        rng = np.random.default_rng([seed, i])
        for j in range(m):
            pending.append(view_set.view(i, rng))
            where.append((i, j))
            if len(pending) >= batch:
                flush()
    flush()
    return out


def evaluate(model: Classifier, view_set: ViewSet, methods=("baseline", "mvm", "mvwcos"), m: int = 10,
             seed: int = 1234, trace=None) -> dict:
    """Accuracy in percent per method. The baseline uses the first of the m views."""
    methods = [Method.parse(x) for x in methods]
    probs = view_probabilities(model, view_set, m, seed)
    acc = {}
    for meth in methods:
        pred = multiview.aggregate_batch(probs, meth)
        acc[meth.value] = 100.0 * float(np.mean(pred == view_set.labels))
    if trace is not None:
        with open(trace, "w") as fh:
            for i in range(len(view_set)):
                views = [multiview.view_prediction(p) for p in probs[i]]
                for meth in methods:
                    if meth == Method.BASELINE:
                        res = multiview.multiview_predict(lambda v: v, probs[i, 0], 1, lambda s, r: s, meth, None)
                    else:
                        res = multiview.AGGREGATORS[meth](views, view_set.num_classes)
                    rec = json.loads(res.to_json())
                    rec.update(sample=i, label=int(view_set.labels[i]))
                    fh.write(json.dumps(rec) + "\n")
    return acc


# -- gradient check -----------------------------------------------------------

def gradient_check(model: Classifier, sample, target: int = 0, eps: float = 1e-4, n_params: int = 100,
                   ratio: float = 0.0, seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between autograd and central differences, in float64.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    exactly-zero gradients from dividing by zero.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    net = copy.deepcopy(model).double()
    x = torch.as_tensor(np.asarray(sample), dtype=torch.float64)
    if x.ndim == 3:
        x = x[None]
    _check_batch(net, x)
    y = torch.tensor([target])

    def loss_fn():
        return smoothed_nll(net.logits(x), y, ratio)

    net.zero_grad()
    loss_fn().backward()
    params = [p for p in net.parameters()]
    grads = [p.grad.detach().clone() for p in params]

    rng = np.random.default_rng(seed)
    per = max(4, int(math.ceil(n_params / len(params))))
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for k in rng.choice(flat.numel(), size=min(per, flat.numel()), replace=False):
                old = float(flat[k])
                flat[k] = old + eps
                up = float(loss_fn())
                flat[k] = old - eps
                down = float(loss_fn())
                flat[k] = old
                num = (up - down) / (2 * eps)
                ana = float(gflat[k])
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Classifier, sidecar: dict) -> None:
    """Binary blob (magic, layer table, little-endian float32) plus ``<path>.json``."""
    path = Path(path)
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(state)))
        for name, tensor in state.items():
            raw = name.encode()
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    side = dict(sidecar)
    side["arch"] = model.arch()
    side["weights_sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[Classifier, dict]:
    path = Path(path)
    side_path = Path(str(path) + ".json")
    if not path.exists() or not side_path.exists():
        raise FileNotFoundError(f"checkpoint or sidecar missing: {path}")
    side = json.loads(side_path.read_text())
    data = path.read_bytes()
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    off = 12
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    arch = side["arch"]
    model = Classifier(arch["in_channels"], arch["num_classes"], arch["channels"])
    model.load_state_dict(state)
    model.eval()
    return model, side


# -- manifest-level entry points ------------------------------------------------

def view_sets(config: TrainConfig, manifest) -> dict:
    clip = ClipSpec(config.clip_len)
    return {s: VideoViewSet(manifest, s, config.task, clip, config.crop) for s in ("train", "val", "test")}


def train(config: TrainConfig, manifest, seed: int | None = None, on_epoch=None) -> tuple[Classifier, RunMetrics]:
    """Train on the manifest's train split for one seed (default: first of ``config.seeds``)."""
    sets = view_sets(config, manifest)
    if len(sets["train"]) == 0 or len(sets["val"]) == 0:
        raise ValueError("manifest needs non-empty train and val splits")
    seed = config.seeds[0] if seed is None else seed
    return train_views(config, sets["train"], sets["val"], seed, on_epoch=on_epoch)


def run_seeds(config: TrainConfig, manifest, out_dir=None, methods=("baseline", "mvm", "mvwcos"),
              on_epoch=None) -> tuple[list[RunMetrics], dict]:
    """Train and evaluate one model per seed; optionally write checkpoints and CSVs."""
    sets = view_sets(config, manifest)
    runs = []
    for seed in config.seeds:
        model, metrics = train_views(config, sets["train"], sets["val"], seed, on_epoch=on_epoch)
        metrics.test_acc = evaluate(model, sets["test"], methods, config.eval_views, config.eval_seed)
        runs.append(metrics)
        if out_dir is not None:
            write_run(out_dir, model, metrics, config, manifest)
    return runs, summarize(runs)


def write_run(out_dir, model: Classifier, metrics: RunMetrics, config: TrainConfig, manifest=None) -> Path:
    run_dir = Path(out_dir) / f"seed_{metrics.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(run_dir / "metrics.csv")
    sidecar = {"config": config.to_dict(), "metrics": metrics.to_dict()}
    if manifest is not None:
        sidecar["manifest_checksum"] = manifest.checksum()
    save_checkpoint(run_dir / "model.ckpt", model, sidecar)
    return run_dir
