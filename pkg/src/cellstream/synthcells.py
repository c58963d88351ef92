"""Synthetic moving-blood-cell videos.

Each video holds a normally distributed number of red and white cells
that perform a +/-1/sqrt(n) random walk per coordinate per frame. Frames
are rendered as alpha-blended discs, then optionally box blurred and
corrupted with Gaussian noise. Labels mark whether the count of each cell
type is above the population mean.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

SAMPLE_MAGIC = b"CSV1"
SAMPLE_HEADER = struct.Struct("<4sIII")
SCHEMA_VERSION = 1
MAX_BLUR = 10

Color = tuple[float, float, float]


class CellKind(enum.IntEnum):
    RBC = 0
    WBC = 1


class Category(str, enum.Enum):
    CLEAR = "clear"
    BLURRED = "blurred"
    NOISY = "noisy"
    BLURRED_NOISY = "blurred_noisy"

    @property
    def blurred(self) -> bool:
        return self in (Category.BLURRED, Category.BLURRED_NOISY)

    @property
    def noisy(self) -> bool:
        return self in (Category.NOISY, Category.BLURRED_NOISY)


CATEGORY_ORDER = (Category.CLEAR, Category.BLURRED, Category.NOISY, Category.BLURRED_NOISY)
CATEGORY_PROBS = (0.130, 0.304, 0.217, 0.349)


@dataclass(frozen=True)
class PopulationSpec:
    rbc_mean: float = 5000.0
    rbc_std: float = 97.9
    wbc_mean: float = 202.0
    wbc_std: float = 95.5

    def __post_init__(self):
        if self.rbc_mean <= 0 or self.wbc_mean <= 0:
            raise ValueError("population means must be positive")
        if self.rbc_std < 0 or self.wbc_std < 0:
            raise ValueError("population standard deviations must be non-negative")

    def mean(self, task: str) -> float:
        return self.rbc_mean if task.upper() == "RBC" else self.wbc_mean

    def std(self, task: str) -> float:
        return self.rbc_std if task.upper() == "RBC" else self.wbc_std


@dataclass(frozen=True)
class Palette:
    background: Color = (235.0, 205.0, 205.0)
    rbc_color: Color = (180.0, 60.0, 60.0)
    rbc_radius: float = 2.0
    rbc_alpha: float = 0.85
    wbc_color: Color = (225.0, 215.0, 235.0)
    wbc_radius: float = 4.0
    wbc_alpha: float = 0.95

    def __post_init__(self):
        for name in ("background", "rbc_color", "wbc_color"):
            rgb = getattr(self, name)
            if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
                raise ValueError(f"palette {name} must be three values in [0, 255]")
        if self.rbc_radius <= 0 or self.wbc_radius <= 0:
            raise ValueError("cell radii must be positive")
        if not (0 <= self.rbc_alpha <= 1 and 0 <= self.wbc_alpha <= 1):
            raise ValueError("alpha must lie in [0, 1]")

    def radius(self, kind: CellKind) -> float:
        return self.rbc_radius if kind == CellKind.RBC else self.wbc_radius


@dataclass(frozen=True)
class Cell:
    """One cell. ``wiener_state`` starts equal to ``origin``."""

    kind: CellKind
    position: tuple[float, float]
    wiener_state: tuple[float, float]
    radius: float
    origin: tuple[float, float]

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not all(math.isfinite(v) for v in self.position):
            raise ValueError("cell position must be finite")


@dataclass(frozen=True)
class DegradationSpec:
    category: Category
    blur_radius: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        cat = Category(self.category)
        object.__setattr__(self, "category", cat)
        if cat.blurred:
            if not 1 <= self.blur_radius <= MAX_BLUR:
                raise ValueError(f"{cat.value} video needs blur radius in [1, {MAX_BLUR}], got {self.blur_radius}")
        elif self.blur_radius != 0:
            raise ValueError(f"{cat.value} video must have blur radius 0")
        if cat.noisy:
            if not 0 <= self.noise_sigma <= 255:
                raise ValueError("noise sigma must lie in [0, 255]")
        elif self.noise_sigma != 0:
            raise ValueError(f"{cat.value} video must have noise sigma 0")


@dataclass
class VideoSample:
    frames: np.ndarray
    rbc_count: int
    wbc_count: int
    degradation: DegradationSpec
    rbc_high: int
    wbc_high: int
    seed: int


@dataclass(frozen=True)
class GeneratorConfig:
    n_videos: int = 1150
    n_frames: int = 100
    height: int = 128
    width: int = 128
    population: PopulationSpec = field(default_factory=PopulationSpec)
    palette: Palette = field(default_factory=Palette)
    motion_scale: float = 8.0
    noise_sigma_range: tuple[float, float] = (5.0, 25.0)
    category_probs: tuple[float, float, float, float] = CATEGORY_PROBS
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    global_seed: int = 0

    # free choices made by this package; listed in every manifest and checkpoint
    CONVENTIONS = ("palette", "motion_scale", "noise_sigma_range", "global_seed")

    def validate(self) -> None:
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8")
        if self.motion_scale < 0:
            raise ValueError("motion_scale must be >= 0")
        lo, hi = self.noise_sigma_range
        if not 0 <= lo <= hi <= 255:
            raise ValueError("noise_sigma_range must satisfy 0 <= lo <= hi <= 255")
        probs = np.asarray(self.category_probs, dtype=float)
        if probs.shape != (4,) or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
            raise ValueError("category_probs must be 4 non-negative values summing to 1")
        fr = np.asarray(self.split_fractions, dtype=float)
        if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
            raise ValueError("split_fractions must be 3 non-negative values summing to 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conventions"] = list(self.CONVENTIONS)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = {k: v for k, v in d.items() if k != "conventions"}
        if "population" in d and isinstance(d["population"], dict):
            d["population"] = PopulationSpec(**d["population"])
        if "palette" in d and isinstance(d["palette"], dict):
            pal = {k: tuple(v) if isinstance(v, list) else v for k, v in d["palette"].items()}
            d["palette"] = Palette(**pal)
        for key in ("noise_sigma_range", "category_probs", "split_fractions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# -- population, placement, motion ------------------------------------------

def _round_count(x: float) -> int:
    return max(0, int(math.floor(x + 0.5)))


def sample_population(rng: np.random.Generator, spec: PopulationSpec) -> tuple[int, int]:
    rbc = _round_count(rng.normal(spec.rbc_mean, spec.rbc_std))
    wbc = _round_count(rng.normal(spec.wbc_mean, spec.wbc_std))
    return rbc, wbc


def init_positions(rng: np.random.Generator, count: int, width: float, height: float) -> np.ndarray:
    """Uniform i.i.d. positions, shape [count, 2] as (x, y)."""
    if count < 0:
        raise ValueError("count must be >= 0")
    xs = rng.uniform(0.0, width, size=count)
    ys = rng.uniform(0.0, height, size=count)
    pos = np.stack([xs, ys], axis=1)
    # uniform() can round up to the open upper bound
    np.minimum(pos, np.nextafter(np.array([width, height], dtype=float), 0), out=pos)
    return pos


def make_cells(kind: CellKind, positions: np.ndarray, palette: Palette) -> list[Cell]:
    r = palette.radius(kind)
    return [Cell(kind, (float(x), float(y)), (float(x), float(y)), r, (float(x), float(y))) for x, y in positions]


def _check_step(i: int, n: int) -> None:
    if n < 1 or not 1 <= i <= n:
        raise ValueError(f"step index i={i} outside [1, {n}]")


def wiener_step(cell: Cell, i: int, n: int, motion_scale: float, rng: np.random.Generator) -> Cell:
    """Advance one cell by one frame: W(i/n) = W((i-1)/n) + Y/sqrt(n), Y = +/-1."""
    _check_step(i, n)
    if motion_scale < 0:
        raise ValueError("motion_scale must be >= 0")
    y = rng.integers(0, 2, size=2) * 2 - 1
    w = np.asarray(cell.wiener_state) + y / math.sqrt(n)
    origin = np.asarray(cell.origin)
    pos = origin + motion_scale * (w - origin)
    return dataclasses.replace(cell, position=(float(pos[0]), float(pos[1])), wiener_state=(float(w[0]), float(w[1])))


def wiener_steps(state: np.ndarray, i: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``wiener_step`` over an [N, 2] array of W values."""
    _check_step(i, n)
    y = rng.integers(0, 2, size=state.shape) * 2 - 1
    return state + y / math.sqrt(n)


# -- rendering and degradation -----------------------------------------------

def render_positions(rbc_xy: np.ndarray, wbc_xy: np.ndarray, width: int, height: int,
                     palette: Palette) -> np.ndarray:
    """Render RBCs then WBCs on the background; returns uint8 [3, H, W]."""
    n_r, n_w = len(rbc_xy), len(wbc_xy)
    xy = np.concatenate([np.reshape(rbc_xy, (-1, 2)), np.reshape(wbc_xy, (-1, 2))], axis=0)
    radii = np.concatenate([np.full(n_r, palette.rbc_radius), np.full(n_w, palette.wbc_radius)])
    colors = np.concatenate([np.tile(palette.rbc_color, (n_r, 1)), np.tile(palette.wbc_color, (n_w, 1))])
    alphas = np.concatenate([np.full(n_r, palette.rbc_alpha), np.full(n_w, palette.wbc_alpha)])
    return kernels.render_discs(xy[:, 0], xy[:, 1], radii, colors, alphas, palette.background, height, width)


def render_frame(cells: list[Cell], width: int, height: int, palette: Palette) -> np.ndarray:
    rbc = np.array([c.position for c in cells if c.kind == CellKind.RBC], dtype=float).reshape(-1, 2)
    wbc = np.array([c.position for c in cells if c.kind == CellKind.WBC], dtype=float).reshape(-1, 2)
    return render_positions(rbc, wbc, width, height, palette)


def box_blur(image: np.ndarray, b: int) -> np.ndarray:
    """Per-channel (2b+1)^2 mean with clamp-to-edge, rounded half up."""
    if not 0 <= b <= MAX_BLUR or int(b) != b:
        raise ValueError(f"blur radius must be an integer in [0, {MAX_BLUR}], got {b}")
    return kernels.box_blur(image, int(b))


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array(image, dtype=np.uint8, copy=True)
    noisy = image.astype(np.float64) + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)


def assign_degradation(rng: np.random.Generator, noise_sigma_range=(5.0, 25.0),
                       probs=CATEGORY_PROBS) -> DegradationSpec:
    cat = CATEGORY_ORDER[int(rng.choice(4, p=np.asarray(probs, dtype=float)))]
    b = int(rng.integers(1, MAX_BLUR + 1)) if cat.blurred else 0
    sigma = float(rng.uniform(*noise_sigma_range)) if cat.noisy else 0.0
    return DegradationSpec(cat, b, sigma)


def degrade(frame: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    out = box_blur(frame, spec.blur_radius) if spec.blur_radius else frame
    if spec.noise_sigma > 0:
        out = add_noise(out, spec.noise_sigma, rng)
    return out


def label_counts(rbc_count: int, wbc_count: int, spec: PopulationSpec) -> tuple[int, int]:
    if rbc_count < 0 or wbc_count < 0:
        raise ValueError("counts must be non-negative")
    return int(rbc_count > spec.rbc_mean), int(wbc_count > spec.wbc_mean)


# -- whole videos and datasets ----------------------------------------------

def video_seed(global_seed: int, index: int) -> int:
    """64-bit per-video seed: first 8 bytes of BLAKE2b("<global>:<index>")."""
    digest = hashlib.blake2b(f"{int(global_seed)}:{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def generate_video(seed: int, config: GeneratorConfig) -> VideoSample:
    rng = np.random.default_rng(seed)
    pop, pal = config.population, config.palette
    rbc_count, wbc_count = sample_population(rng, pop)
    deg = assign_degradation(rng, config.noise_sigma_range, config.category_probs)
    rbc0 = init_positions(rng, rbc_count, config.width, config.height)
    wbc0 = init_positions(rng, wbc_count, config.width, config.height)
    origin = np.concatenate([rbc0, wbc0], axis=0)
    w = origin.copy()
    n = config.n_frames
    frames = np.empty((n, 3, config.height, config.width), dtype=np.uint8)
    for i in range(1, n + 1):
        w = wiener_steps(w, i, n, rng)
        pos = origin + config.motion_scale * (w - origin)
        frame = render_positions(pos[:rbc_count], pos[rbc_count:], config.width, config.height, pal)
        frames[i - 1] = degrade(frame, deg, rng)
    rbc_high, wbc_high = label_counts(rbc_count, wbc_count, pop)
    return VideoSample(frames, rbc_count, wbc_count, deg, rbc_high, wbc_high, int(seed))


def write_sample(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected frames [n, 3, H, W], got {frames.shape}")
    n, _, h, w = frames.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(SAMPLE_HEADER.pack(SAMPLE_MAGIC, n, h, w))
            fh.write(frames.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write sample file {path}: {exc}") from exc


def read_sample(path, mmap: bool = True) -> np.ndarray:
    """Load a sample file as [n_frames, 3, H, W] uint8 (memory-mapped by default)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(SAMPLE_HEADER.size)
    if len(head) < SAMPLE_HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(head)} bytes)")
    magic, n, h, w = SAMPLE_HEADER.unpack(head)
    if magic != SAMPLE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = SAMPLE_HEADER.size + n * 3 * h * w
    actual = path.stat().st_size
    if actual != expected:
        raise ValueError(f"{path}: size {actual} does not match header ({expected} bytes)")
    if mmap:
        return np.memmap(path, dtype=np.uint8, mode="r", offset=SAMPLE_HEADER.size, shape=(n, 3, h, w))
    return np.fromfile(path, dtype=np.uint8, offset=SAMPLE_HEADER.size).reshape(n, 3, h, w)


def export_png_frames(frames: np.ndarray, out_dir, every: int = 1) -> list[Path]:
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(0, len(frames), every):
        p = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(np.transpose(np.asarray(frames[i]), (1, 2, 0))).save(p)
        paths.append(p)
    return paths


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    path: str
    seed: int
    rbc_count: int
    wbc_count: int
    rbc_high: int
    wbc_high: int
    category: str
    b: int
    noise_sigma: float
    l_rbc: float
    l_wbc: float
    split: str
    sha256: str

    def label(self, task: str) -> int:
        return self.rbc_high if task.upper() == "RBC" else self.wbc_high

    def l_raw(self, task: str) -> float:
        return self.l_rbc if task.upper() == "RBC" else self.l_wbc


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    config: dict
    global_seed: int
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def sample_path(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "global_seed": self.global_seed,
            "config": self.config,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path) -> None:
        d = self.to_dict()
        d["checksum"] = self.checksum()
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        d = json.loads(path.read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version {d.get('schema_version')}")
        entries = [ManifestEntry(**e) for e in d["entries"]]
        m = cls(entries, d["config"], d["global_seed"], root=path.parent)
        if "checksum" in d and d["checksum"] != m.checksum():
            raise ValueError(f"{path}: checksum mismatch, manifest was modified")
        return m


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """floor for train, floor for validation, remainder to test."""
    n_train = int(math.floor(round(fractions[0] * n, 9)))
    n_val = int(math.floor(round(fractions[1] * n, 9)))
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, global_seed: int, fractions=(0.6, 0.2, 0.2)) -> list[str]:
    n_train, n_val, _ = split_sizes(n, fractions)
    rng = np.random.default_rng(video_seed(global_seed, -1))
    order = rng.permutation(n)
    splits = ["test"] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            splits[idx] = "train"
        elif rank < n_train + n_val:
            splits[idx] = "val"
    return splits


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _generate_one(args) -> dict:
    index, config, out_dir = args
    seed = video_seed(config.global_seed, index)
    sample = generate_video(seed, config)
    rel = f"videos/{index:05d}.vid"
    path = Path(out_dir) / rel
    write_sample(path, sample.frames)
    pop = config.population
    return dict(
        index=index,
        path=rel,
        seed=seed,
        rbc_count=sample.rbc_count,
        wbc_count=sample.wbc_count,
        rbc_high=sample.rbc_high,
        wbc_high=sample.wbc_high,
        category=sample.degradation.category.value,
        b=sample.degradation.blur_radius,
        noise_sigma=sample.degradation.noise_sigma,
        l_rbc=abs(sample.rbc_count - pop.rbc_mean),
        l_wbc=abs(sample.wbc_count - pop.wbc_mean),
        sha256=_file_digest(path),
    )


def generate_dataset(config: GeneratorConfig, out_dir, workers: int = 1, progress=None) -> DatasetManifest:
    """Generate ``config.n_videos`` videos into ``out_dir`` and write ``manifest.json``.

    Output does not depend on ``workers``: every video draws from its own
    seed, derived from the global seed and the video index.
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    jobs = [(i, config, out_dir) for i in range(config.n_videos)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_generate_one, jobs, chunksize=4))
    else:
        records = []
        for job in jobs:
            records.append(_generate_one(job))
            if progress is not None:
                progress(len(records), config.n_videos)
    splits = assign_splits(config.n_videos, config.global_seed, config.split_fractions)
    entries = [ManifestEntry(split=s, **r) for r, s in zip(records, splits)]
    manifest = DatasetManifest(entries, config.to_dict(), config.global_seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    logger.info("wrote %d videos to %s", len(entries), out_dir)
    return manifest
