"""Multi-view prediction: aggregate class predictions over augmented copies.

Each view yields ``(class, confidence)`` where the class is the argmax of
the normalised prediction vector and the confidence its maximum. Views are
combined either by majority (mode) or by confidence-weighted bin count.
All argmax decisions break ties towards the smallest class index.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_TOL = 1e-6
CONF_CEIL = 1.0 - 1e-9


class Method(str, enum.Enum):
    BASELINE = "baseline"
    MVM = "mvm"
    MVWCOS = "mvwcos"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        key = str(name).lower().replace("-", "").replace("_", "")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown method {name!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class ViewPrediction:
    class_id: int
    confidence: float


@dataclass(frozen=True)
class AggregateResult:
    final_class: int
    weights: tuple[float, ...]
    views_used: int
    method: str

    def to_json(self) -> str:
        return json.dumps({"final_class": self.final_class, "weights": list(self.weights),
                           "views_used": self.views_used, "method": self.method})


class PredictorError(RuntimeError):
    def __init__(self, view_index: int, cause: BaseException):
        super().__init__(f"predictor failed on view {view_index}: {cause}")
        self.view_index = view_index


def check_prediction_vector(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.size < 2:
        raise ValueError(f"prediction vector must be 1-D with K >= 2, got shape {h.shape}")
    total = float(h.sum())
    # with every entry positive, a finite sum rules out inf; NaN fails the min test
    if not (h.min() > 0 and math.isfinite(total)):
        raise ValueError("prediction vector components must be positive and finite")
    if abs(total - 1.0) > NORM_TOL:
        raise ValueError(f"prediction vector sums to {total!r}, not 1")
    return h


def view_prediction(h) -> ViewPrediction:
    h = check_prediction_vector(h)
    k = int(h.argmax())  # first maximum wins
    return ViewPrediction(k, min(float(h[k]), CONF_CEIL))


def _num_classes(views: Sequence[ViewPrediction], num_classes: int | None) -> int:
    top = max(v.class_id for v in views) + 1
    return max(top, num_classes or 0)


def _tally(views: Sequence[ViewPrediction], num_classes: int | None, weighted: bool) -> list[float]:
    z = [0.0] * _num_classes(views, num_classes)
    for v in views:
        z[v.class_id] += v.confidence if weighted else 1.0
    return z


def _first_max(z: list[float]) -> int:
    return z.index(max(z))


def aggregate_mvm(views: Sequence[ViewPrediction], num_classes: int | None = None) -> AggregateResult:
    if not views:
        raise ValueError("need at least one view")
    counts = _tally(views, num_classes, weighted=False)
    return AggregateResult(_first_max(counts), tuple(counts), len(views), Method.MVM.value)


def aggregate_mvwcos(views: Sequence[ViewPrediction], num_classes: int | None = None) -> AggregateResult:
    if not views:
        raise ValueError("need at least one view")
    for v in views:
        if not 0 < v.confidence < 1:
            raise ValueError(f"confidence {v.confidence} outside (0, 1)")
    z = _tally(views, num_classes, weighted=True)
    return AggregateResult(_first_max(z), tuple(z), len(views), Method.MVWCOS.value)


AGGREGATORS = {Method.MVM: aggregate_mvm, Method.MVWCOS: aggregate_mvwcos}


def multiview_predict(predictor: Callable, sample, m: int, augmenter: Callable, method,
                      rng: np.random.Generator) -> AggregateResult:
    """Predict ``m`` independently augmented views of ``sample`` and aggregate them.

    ``augmenter(sample, rng)`` returns one view; ``predictor(view)`` returns
    a prediction vector. Views are drawn sequentially from ``rng``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    method = Method.parse(method)
    views = []
    k = None
    for j in range(m):
        try:
            h = check_prediction_vector(predictor(augmenter(sample, rng)))
        except Exception as exc:
            raise PredictorError(j, exc) from exc
        k = h.size
        views.append(view_prediction(h))
    if method == Method.BASELINE:
        v = views[0]
        w = np.zeros(k)
        w[v.class_id] = 1.0
        return AggregateResult(v.class_id, tuple(w.tolist()), 1, method.value)
    return AGGREGATORS[method](views, k)


def aggregate_batch(probs: np.ndarray, method) -> np.ndarray:
    """Vectorised aggregation of [N, m, K] view probabilities -> [N] classes.

    Same rules as the per-sample aggregators; ``baseline`` uses view 0 only.
    """
    method = Method.parse(method)
    probs = np.asarray(probs, dtype=np.float64)
    n, m, k = probs.shape
    cls = probs.argmax(axis=2)
    if method == Method.BASELINE:
        return cls[:, 0]
    onehot = np.zeros((n, m, k))
    np.put_along_axis(onehot, cls[:, :, None], 1.0, axis=2)
    if method == Method.MVM:
        return onehot.sum(axis=1).argmax(axis=1)
    conf = np.minimum(probs.max(axis=2), CONF_CEIL)
    # accumulate view by view, matching aggregate_mvwcos summation order
    z = np.zeros((n, k))
    for j in range(m):
        z += onehot[:, j, :] * conf[:, j, None]
    return z.argmax(axis=1)
