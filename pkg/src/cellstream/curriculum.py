"""Competence-based curriculum: per-sample difficulty and the competence schedule."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

MAX_BLUR = 10


@dataclass(frozen=True)
class CurriculumParams:
    """Weights and schedule constants.

    ``l_norm_scale`` is the count distance at which the label-distance
    feature saturates at 1; by default three standard deviations of the
    task's count distribution.
    """

    alpha: float = 0.5
    beta: float = 0.5
    c0: float = 0.05
    T: int = 1000
    p: float = 2.0
    l_norm_scale: float = 3 * 95.5

    def __post_init__(self):
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1) > 1e-12:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if not 0 < self.c0 <= 1:
            raise ValueError("c0 must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.l_norm_scale <= 0:
            raise ValueError("l_norm_scale must be positive")

    @classmethod
    def for_task(cls, task: str, population=None, **kw) -> "CurriculumParams":
        """Params with ``l_norm_scale`` set to 3 sigma of the task's counts."""
        from .synthcells import PopulationSpec

        population = population or PopulationSpec()
        kw.setdefault("l_norm_scale", 3 * population.std(task))
        return cls(**kw)


@dataclass(frozen=True)
class SampleDifficulty:
    b_raw: float
    l_raw: float
    b_norm: float
    l_norm: float
    d: float


def difficulty(b_raw: float, l_raw: float, params: CurriculumParams) -> SampleDifficulty:
    if not 0 <= b_raw <= MAX_BLUR:
        raise ValueError(f"blur radius {b_raw} outside [0, {MAX_BLUR}]")
    if l_raw < 0:
        raise ValueError("label distance must be >= 0")
    b_norm = b_raw / MAX_BLUR
    l_norm = min(1.0, l_raw / params.l_norm_scale)
    d = params.alpha * b_norm + params.beta * l_norm
    return SampleDifficulty(b_raw, l_raw, b_norm, l_norm, min(1.0, d))


def competence(t: int, params: CurriculumParams) -> float:
    """c(t) = min(1, (t (1 - c0^p) / T + c0^p)^(1/p)); exactly c0 at t=0, 1 from t=T on."""
    if t < 0:
        raise ValueError("epoch index must be >= 0")
    if t == 0:
        return params.c0
    if t >= params.T:
        return 1.0
    c0p = params.c0 ** params.p
    return min(1.0, (t * (1 - c0p) / params.T + c0p) ** (1.0 / params.p))


def _features(entry, task: str) -> tuple[float, float]:
    try:
        if isinstance(entry, dict):
            return entry["b"], entry["l_rbc" if task.upper() == "RBC" else "l_wbc"]
        return entry.b, entry.l_raw(task)
    except (KeyError, AttributeError) as exc:
        raise ValueError(f"entry lacks difficulty features for task {task}: {entry!r}") from exc


def eligible_set(entries: Sequence, t: int, params: CurriculumParams, task: str) -> list:
    """Entries whose difficulty does not exceed the competence at epoch ``t``, in input order."""
    c = competence(t, params)
    out = []
    for e in entries:
        b, l_raw = _features(e, task)
        if difficulty(b, l_raw, params).d <= c:
            out.append(e)
    return out


def easiest(entries: Sequence, params: CurriculumParams, task: str, fraction: float = 0.01) -> list:
    """The lowest-difficulty ``fraction`` of entries (at least one), in input order."""
    if not entries:
        return []
    scored = sorted(range(len(entries)), key=lambda i: (difficulty(*_features(entries[i], task), params).d, i))
    keep = set(scored[:max(1, int(math.ceil(fraction * len(entries))))])
    return [e for i, e in enumerate(entries) if i in keep]


def report(params: CurriculumParams, path, entries: Sequence = (), task: str = "WBC",
           epochs: Iterable[int] | None = None) -> Path:
    """Write the competence curve, and eligible-set sizes when entries are given, as CSV."""
    epochs = range(0, params.T + 1) if epochs is None else epochs
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "competence", "n_eligible"])
        for t in epochs:
            n = len(eligible_set(entries, t, params, task)) if entries else ""
            w.writerow([t, repr(competence(t, params)), n])
    return path
