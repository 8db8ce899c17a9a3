"""Data-driven early-exit search for the output layer.

Calibration runs the exact model over a training set and keeps, for every
class ``i``, the logits ``z_i`` of correctly answered samples: *positives*
when ``i`` was the answer, *negatives* otherwise. Gaussian KDEs over both
sets give a posterior ``p(y=i | z_i)``; the threshold ``theta_i`` is the
smallest positive sample whose posterior reaches ``rho``. At inference the
classes are scanned in descending silhouette order and the first logit that
strictly exceeds its threshold is accepted without computing the rest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .counters import OpCounters
from .errors import CalibrationError, InvalidInputError
from .model import ModelWeights, forward

TABLE_FORMAT = "mannflow-threshold-table"
TABLE_VERSION = 1
INF_TOKEN = "+inf"
_SQRT_2PI = math.sqrt(2.0 * math.pi)
# kernel-sum evaluation is chunked to bound the (candidates x points) matrix
_CHUNK = 256


@dataclass
class LogitSampleSet:
    """Per-class positive/negative logit samples, stored sorted ascending.

    Sorting makes every downstream quantity independent of dataset order.
    """

    positives: list
    negatives: list
    class_counts: np.ndarray
    n_samples: int = 0
    n_correct: int = 0

    def __post_init__(self):
        self.positives = [np.sort(np.asarray(p, dtype=np.float64)) for p in self.positives]
        self.negatives = [np.sort(np.asarray(n, dtype=np.float64)) for n in self.negatives]
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        for arr in self.positives + self.negatives:
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError("logit samples must be finite")

    @property
    def num_classes(self) -> int:
        return len(self.positives)

    @classmethod
    def from_logits(cls, logits, labels) -> "LogitSampleSet":
        """Sort logits of correctly predicted samples into positive/negative pools.

        ``class_counts`` tallies every label, correct or not.
        """
        logits = np.asarray(logits, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if logits.ndim != 2 or len(logits) == 0:
            raise InvalidInputError("need a non-empty (n_samples, n_classes) logit matrix")
        n, I = logits.shape
        if labels.shape != (n,):
            raise InvalidInputError(f"got {labels.shape} labels for {n} logit rows")
        if np.any(labels < 0) or np.any(labels >= I):
            raise InvalidInputError(f"labels must lie in [0, {I})")
        # first maximum, same tie-break as exact_argmax
        predicted = np.argmax(logits, axis=1)
        correct = predicted == labels
        if not np.any(correct):
            raise CalibrationError("the model answered no calibration sample correctly")
        z, y = logits[correct], labels[correct]
        positives, negatives = [], []
        for i in range(I):
            hit = y == i
            positives.append(z[hit, i])
            negatives.append(z[~hit, i])
        counts = np.bincount(labels, minlength=I)
        return cls(positives, negatives, counts, n_samples=n, n_correct=int(correct.sum()))


def dataset_logits(model: ModelWeights, dataset) -> tuple[np.ndarray, np.ndarray]:
    """Run the reference model over ``(story, question, label)`` triples."""
    logits, labels = [], []
    for story, q, y in dataset:
        if not 0 <= y < model.dims.output_dim:
            raise InvalidInputError(f"label {y} out of range for {model.dims.output_dim} classes")
        logits.append(forward(model, story, q).logits)
        labels.append(y)
    return np.array(logits).reshape(len(logits), model.dims.output_dim), np.array(labels, dtype=np.int64)


def collect_samples(model: ModelWeights, dataset) -> LogitSampleSet:
    dataset = list(dataset)
    if not dataset:
        raise InvalidInputError("calibration dataset is empty")
    return LogitSampleSet.from_logits(*dataset_logits(model, dataset))


def silverman_bandwidth(x) -> float:
    """1.06 * sample std * n^(-1/5), floored so degenerate samples stay usable."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise InvalidInputError("bandwidth of an empty sample is undefined")
    floor = 1e-6 * (1.0 + abs(float(np.mean(x))))
    if len(x) < 2:
        return floor
    return max(1.06 * float(np.std(x, ddof=1)) * len(x) ** -0.2, floor)


@dataclass(frozen=True, eq=False)
class GaussianKDE:
    points: np.ndarray
    bandwidth: float

    @classmethod
    def fit(cls, x) -> "GaussianKDE":
        x = np.sort(np.asarray(x, dtype=np.float64))
        return cls(x, silverman_bandwidth(x))

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=np.float64))
        out = np.empty(len(z))
        h = self.bandwidth
        for start in range(0, len(z), _CHUNK):
            u = (z[start:start + _CHUNK, None] - self.points[None, :]) / h
            out[start:start + _CHUNK] = np.exp(-0.5 * u * u).sum(axis=1)
        return out / (len(self.points) * h * _SQRT_2PI)


@dataclass(frozen=True, eq=False)
class DensityModel:
    """Per-class KDEs; ``None`` where a pool is too small to estimate."""

    positive: list
    negative: list
    priors: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.positive)

    def thresholdable(self, i: int) -> bool:
        return self.positive[i] is not None and self.priors[i] > 0


def estimate_densities(samples: LogitSampleSet) -> DensityModel:
    if not any(len(p) >= 2 for p in samples.positives):
        raise CalibrationError("no class has two or more positive samples")
    total = samples.class_counts.sum()
    if total <= 0:
        raise CalibrationError("no class labels were observed")
    positive = [GaussianKDE.fit(p) if len(p) >= 2 else None for p in samples.positives]
    negative = [GaussianKDE.fit(n) if len(n) >= 1 else None for n in samples.negatives]
    priors = samples.class_counts / total
    return DensityModel(positive, negative, priors)


def posterior(density: DensityModel, i: int, z) -> np.ndarray | float:
    """``p(y=i | z)`` with the negative-pool density as the competing hypothesis.

    Returns 0 where both weighted densities vanish.
    """
    scalar = np.ndim(z) == 0
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if not density.thresholdable(i):
        raise InvalidInputError(f"class {i} has no usable positive density")
    prior = float(density.priors[i])
    pos = density.positive[i](z) * prior
    neg_kde = density.negative[i]
    neg = neg_kde(z) * (1.0 - prior) if neg_kde is not None else np.zeros_like(z)
    denom = pos + neg
    with np.errstate(invalid="ignore", divide="ignore"):
        post = np.where(denom > 0, pos / np.where(denom > 0, denom, 1.0), 0.0)
    post = np.clip(post, 0.0, 1.0)
    return float(post[0]) if scalar else post


def _check_rho(rho) -> float:
    rho = float(rho)
    if not (0.0 < rho <= 1.0):
        raise InvalidInputError(f"rho must lie in (0, 1], got {rho}")
    return rho


class ThresholdCalibrator:
    """Posteriors at every candidate logit, computed once and reused across ``rho`` values."""

    def __init__(self, density: DensityModel, samples: LogitSampleSet):
        self.density = density
        self.candidates = []
        self.posteriors = []
        for i in range(density.num_classes):
            if density.thresholdable(i) and len(samples.positives[i]):
                cand = samples.positives[i]
                self.candidates.append(cand)
                self.posteriors.append(posterior(density, i, cand))
            else:
                self.candidates.append(None)
                self.posteriors.append(None)

    def thresholds(self, rho) -> np.ndarray:
        rho = _check_rho(rho)
        theta = np.full(len(self.candidates), np.inf)
        for i, (cand, post) in enumerate(zip(self.candidates, self.posteriors)):
            if cand is None:
                continue
            ok = post >= rho
            if np.any(ok):
                theta[i] = float(np.min(cand[ok]))
        return theta


def compute_thresholds(density: DensityModel, samples: LogitSampleSet, rho) -> np.ndarray:
    return ThresholdCalibrator(density, samples).thresholds(rho)


def _sum_abs_diffs(sorted_ref: np.ndarray, z: np.ndarray) -> np.ndarray:
    """For each value in ``z``: sum over ``sorted_ref`` of ``|z - r|`` in O(log n)."""
    prefix = np.concatenate([[0.0], np.cumsum(sorted_ref)])
    total = prefix[-1]
    k = np.searchsorted(sorted_ref, z, side="right")
    below = z * k - prefix[k]
    above = (total - prefix[k]) - z * (len(sorted_ref) - k)
    return below + above


def silhouette_scores(samples: LogitSampleSet) -> np.ndarray:
    """Mean 1-D silhouette of each positive pool against its negative pool.

    Classes missing either pool score -1.
    """
    scores = np.full(samples.num_classes, -1.0)
    for i, (pos, neg) in enumerate(zip(samples.positives, samples.negatives)):
        if len(pos) == 0 or len(neg) == 0:
            continue
        n = len(pos)
        a = _sum_abs_diffs(pos, pos) / (n - 1) if n > 1 else np.zeros(n)
        b = _sum_abs_diffs(neg, pos) / len(neg)
        # sums of |differences| can come out a hair negative
        a, b = np.maximum(a, 0.0), np.maximum(b, 0.0)
        m = np.maximum(a, b)
        s = np.where(m > 0, (b - a) / np.where(m > 0, m, 1.0), 0.0)
        scores[i] = float(np.clip(s.mean(), -1.0, 1.0))
    return scores


def silhouette_order(samples: LogitSampleSet) -> tuple[np.ndarray, tuple]:
    scores = silhouette_scores(samples)
    order = tuple(sorted(range(len(scores)), key=lambda i: (-scores[i], i)))
    return scores, order


@dataclass(frozen=True, eq=False)
class ThresholdTable:
    theta: np.ndarray
    order: tuple
    rho: float
    silhouette: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        sil = np.array(self.silhouette, dtype=np.float64)
        order = tuple(int(i) for i in self.order)
        I = len(theta)
        if sorted(order) != list(range(I)):
            raise InvalidInputError(f"order {order} is not a permutation of range({I})")
        if sil.shape != (I,):
            raise InvalidInputError("silhouette must have one score per class")
        if np.any(np.isnan(theta)):
            raise InvalidInputError("thresholds must not be NaN")
        theta.setflags(write=False)
        sil.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "silhouette", sil)
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def num_classes(self) -> int:
        return len(self.theta)

    @classmethod
    def disabled(cls, num_classes: int) -> "ThresholdTable":
        """Every threshold infinite: always falls back to the full scan."""
        return cls(np.full(num_classes, np.inf), tuple(range(num_classes)), 1.0, np.zeros(num_classes))

    def with_order(self, order: Optional[Sequence[int]] = None) -> "ThresholdTable":
        order = tuple(range(self.num_classes)) if order is None else tuple(order)
        return ThresholdTable(self.theta, order, self.rho, self.silhouette, dict(self.metadata))

    def equals(self, other: "ThresholdTable") -> bool:
        return (
            self.rho == other.rho
            and self.order == other.order
            and np.array_equal(self.theta, other.theta)
            and np.array_equal(self.silhouette, other.silhouette)
        )

    def to_json(self) -> str:
        doc = {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "rho": self.rho,
            "theta": [INF_TOKEN if math.isinf(t) and t > 0 else
                      ("-inf" if math.isinf(t) else float(t)) for t in self.theta],
            "order": list(self.order),
            "silhouette": [float(s) for s in self.silhouette],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        doc = json.loads(text)
        if doc.get("format") != TABLE_FORMAT:
            raise InvalidInputError("not a threshold table")
        if doc.get("version") != TABLE_VERSION:
            raise InvalidInputError(f"unsupported threshold table version {doc.get('version')}")
        theta = [math.inf if t == INF_TOKEN else (-math.inf if t == "-inf" else float(t))
                 for t in doc["theta"]]
        return cls(theta, doc["order"], doc["rho"], doc["silhouette"], doc.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def thresholded_argmax(h, W_o, table: ThresholdTable, counters: Optional[OpCounters] = None):
    """Early-exit maximum inner-product search over the rows of ``W_o``.

    Returns ``(label, dot_products_used)``. When no logit clears its
    threshold, falls back to the exact argmax over all logits (smallest
    index on ties) and reports ``I`` dot products.
    """
    I, E = W_o.shape
    if table.num_classes != I:
        raise InvalidInputError(f"table covers {table.num_classes} classes, W_o has {I} rows")
    z = np.empty(I)
    used = 0
    label = None
    for a in table.order:
        z[a] = W_o[a] @ h
        used += 1
        if z[a] > table.theta[a]:
            label = a
            break
    comparisons = used
    if label is None:
        label = 0
        for i in range(1, I):
            if z[i] > z[label]:
                label = i
        comparisons += I - 1
    if counters is not None:
        counters.multiplications += used * E
        counters.logit_comparisons += comparisons
    return label, used


def tables_from_samples(samples: LogitSampleSet, rhos, ordering=True) -> list[ThresholdTable]:
    density = estimate_densities(samples)
    calibrator = ThresholdCalibrator(density, samples)
    scores, order = silhouette_order(samples)
    if not ordering:
        order = tuple(range(samples.num_classes))
    meta = {"n_samples": samples.n_samples, "n_correct": samples.n_correct}
    return [ThresholdTable(calibrator.thresholds(rho), order, rho, scores, dict(meta)) for rho in rhos]


def calibrate(model: ModelWeights, dataset, rho, ordering=True) -> ThresholdTable:
    """Collect logit samples, fit densities, set thresholds and the scan order."""
    rho = _check_rho(rho)
    (table,) = tables_from_samples(collect_samples(model, dataset), [rho], ordering)
    return table
