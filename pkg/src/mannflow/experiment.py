"""Sweeps and verification runs shared by the CLI and the scripts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .counters import OpCounters
from .data import Dataset, train_test_split
from .engine import Pipeline, PipelineConfig, story_stream
from .model import ModelWeights, oracle_infer
from .thresholding import LogitSampleSet, ThresholdTable, dataset_logits, tables_from_samples

DEFAULT_RHOS = (1.0, 0.999, 0.99, 0.9, 0.5)
SWEEP_COLUMNS = [
    "family", "rho", "accuracy", "agreement_with_exact", "mean_dot_products",
    "mean_scalar_comparisons", *OpCounters.field_names(), "n_test",
]


@dataclass
class EvalRun:
    labels: np.ndarray
    dot_products: np.ndarray
    counters: OpCounters
    logits: Optional[np.ndarray] = None
    by_unit: dict = field(default_factory=dict)


def run_engine(model: ModelWeights, dataset: Dataset, indices, cfg: PipelineConfig) -> EvalRun:
    samples = [dataset.samples[i] for i in indices]
    pipe = Pipeline(model, cfg)
    answers = pipe.run(story_stream((s.story, s.question) for s in samples))
    logits = None
    if cfg.thresholding is None:
        logits = np.array([a.logits for a in answers]).reshape(len(answers), model.dims.output_dim)
    return EvalRun(
        np.array([a.label for a in answers], dtype=np.int64),
        np.array([a.dot_products for a in answers], dtype=np.int64),
        pipe.counters(),
        logits,
        pipe.counters_by_unit(),
    )


@dataclass
class SweepRow:
    family: str
    rho: Optional[float]
    accuracy: float
    agreement_with_exact: float
    mean_dot_products: float
    mean_scalar_comparisons: float
    counters: OpCounters
    n_test: int

    def as_record(self) -> list:
        c = self.counters.as_dict()
        return [
            self.family,
            "" if self.rho is None else repr(self.rho),
            repr(self.accuracy),
            repr(self.agreement_with_exact),
            repr(self.mean_dot_products),
            repr(self.mean_scalar_comparisons),
            *(c[k] for k in OpCounters.field_names()),
            self.n_test,
        ]


@dataclass
class SweepResult:
    """Baseline row first, then one row per (rho, family) in descending rho."""

    rows: list
    train_indices: np.ndarray
    test_indices: np.ndarray
    tables: dict = field(default_factory=dict)

    def family(self, name: str) -> list:
        return [r for r in self.rows if r.family == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in self.rows:
            w.writerow(row.as_record())
        return buf.getvalue()


def _row(family, rho, run: EvalRun, answers, exact) -> SweepRow:
    n = len(answers)
    return SweepRow(
        family,
        rho,
        float(np.mean(run.labels == answers)),
        float(np.mean(run.labels == exact)),
        float(np.mean(run.dot_products)),
        run.counters.logit_comparisons / n,
        run.counters,
        n,
    )


def sweep(model: ModelWeights, dataset: Dataset, rhos: Sequence[float] = DEFAULT_RHOS, *,
          split_seed: int = 0, ordering: bool = True, identity: bool = True,
          cfg: PipelineConfig = PipelineConfig(scheduler="sequential")) -> SweepResult:
    """Calibrate on the train split, then evaluate each threshold table on the test split.

    Row families: ``exact`` (full scan), ``ith+order`` (silhouette order)
    and ``ith`` (identity order). Thresholds are identical across the two
    thresholded families for a given rho.
    """
    if not rhos:
        raise ValueError("need at least one rho")
    rhos = sorted({float(r) for r in rhos}, reverse=True)
    train_idx, test_idx = train_test_split(len(dataset), split_seed)
    logits, labels = dataset_logits(model, dataset.triples(train_idx))
    samples = LogitSampleSet.from_logits(logits, labels)
    tables = tables_from_samples(samples, rhos, ordering=True)

    answers = np.array([dataset.samples[i].answer for i in test_idx], dtype=np.int64)
    base = run_engine(model, dataset, test_idx, cfg)
    exact = base.labels
    rows = [_row("exact", None, base, answers, exact)]
    families = []
    if ordering:
        families.append(("ith+order", lambda t: t))
    if identity:
        families.append(("ith", lambda t: t.with_order()))
    kept = {}
    for rho, table in zip(rhos, tables):
        for name, adapt in families:
            t = adapt(table)
            kept[(name, rho)] = t
            run = run_engine(model, dataset, test_idx, _with_table(cfg, t))
            rows.append(_row(name, rho, run, answers, exact))
    return SweepResult(rows, train_idx, test_idx, kept)


def _with_table(cfg: PipelineConfig, table: ThresholdTable) -> PipelineConfig:
    return PipelineConfig(cfg.queue_capacity, cfg.hops, table, cfg.scheduler)


@dataclass
class VerifyReport:
    n_samples: int
    accuracy: float
    counters: OpCounters
    by_unit: dict
    total_words: int
    mismatch: Optional[tuple] = None  # (sample index, oracle logits, engine logits)

    @property
    def ok(self) -> bool:
        return self.mismatch is None


def verify(model: ModelWeights, dataset: Dataset, tol: float = 1e-9,
           cfg: PipelineConfig = PipelineConfig(scheduler="sequential")) -> VerifyReport:
    """Run every sample through both the reference model and the engine."""
    idx = range(len(dataset))
    run = run_engine(model, dataset, idx, cfg)
    hits = 0
    mismatch = None
    for i in idx:
        s = dataset.samples[i]
        label, z = oracle_infer(model, s.story, s.question, cfg.hops)
        if mismatch is None and (label != run.labels[i] or not np.allclose(z, run.logits[i], rtol=0, atol=tol)):
            mismatch = (i, z, run.logits[i])
        hits += int(run.labels[i] == s.answer)
    return VerifyReport(len(dataset), hits / max(len(dataset), 1), run.counters, run.by_unit,
                        dataset.total_word_occurrences(), mismatch)
