"""Metrics, cross-validation splits, decision-stump training and evaluation reports."""

from __future__ import annotations

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from sibling_scanner.classifiers import (
    CLASSIFIER_NAMES,
    ClassifierSuite,
    Ml1Model,
    classify_ml1,
    first_order_filter,
)
from sibling_scanner.features import FeatureExtractor, FeatureVector
from sibling_scanner.ingest import synthesize_nonsiblings
from sibling_scanner.models import CandidatePair, Decision, Label, Verdict

logger = logging.getLogger(__name__)

CLASSIFIER_TYPES = {"ht": "hand-tuned", "ml1": "learned", "beverly": "baseline"}


class SingleClass(Exception):
    """Raised when stump training data does not contain both classes."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def precision(c: ConfusionCounts) -> float | None:
    """tp / (tp + fp); None when nothing was predicted positive."""
    if c.tp + c.fp == 0:
        return None
    return c.tp / (c.tp + c.fp)


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation coefficient; 0 when any denominator factor is 0."""
    product = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if product == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(product)


def predicts_sibling(decision: Decision) -> bool:
    """Binary scoring: unknown and error count as non-sibling."""
    return decision.verdict is Verdict.SIBLING


def confusion(
    decisions: Iterable[Decision], labels: Iterable[Label]
) -> ConfusionCounts:
    counts = Counter()
    for decision, label in zip(decisions, labels, strict=True):
        predicted = predicts_sibling(decision)
        actual = label is Label.SIBLING
        if predicted and actual:
            counts["tp"] += 1
        elif predicted:
            counts["fp"] += 1
        elif actual:
            counts["fn"] += 1
        else:
            counts["tn"] += 1
    return ConfusionCounts(**counts)


def tally_verdicts(decisions: Iterable[Decision]) -> dict[str, int]:
    """Verdict counts with unknown and error kept apart."""
    counts = Counter(d.verdict.value for d in decisions)
    return {v.value: counts.get(v.value, 0) for v in Verdict}


def nonsibling_ids(siblings: Sequence[CandidatePair]) -> list[str]:
    return [f"{a.id}/{b.id}" for a in siblings for b in siblings if a is not b]


@dataclass(frozen=True)
class Fold:
    index: int
    train_siblings: tuple[CandidatePair, ...]
    test_siblings: tuple[CandidatePair, ...]

    def train_ids(self) -> list[str]:
        return [p.id for p in self.train_siblings] + nonsibling_ids(self.train_siblings)

    def test_ids(self) -> list[str]:
        return [p.id for p in self.test_siblings] + nonsibling_ids(self.test_siblings)


def _group_of(pair: CandidatePair) -> str:
    return pair.group or ""


def stratified_kfold(
    pairs: Sequence[CandidatePair],
    k: int = 10,
    group_key: Callable[[CandidatePair], str] = _group_of,
    seed: int = 0,
) -> list[Fold]:
    """
    Split labeled siblings into k folds with proportional selection per group.

    Non-siblings are synthesized afterwards, inside each split (see Fold).
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    siblings = [p for p in pairs if p.label is Label.SIBLING]
    groups: dict[str, list[CandidatePair]] = defaultdict(list)
    for pair in siblings:
        groups[group_key(pair)].append(pair)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 10])))
    assignment: list[list[CandidatePair]] = [[] for _ in range(k)]
    position = 0
    for name in sorted(groups):
        members = groups[name]
        if len(members) < k:
            logger.warning(
                "Group '%s' has %s siblings, fewer than k=%s folds", name, len(members), k
            )
        for index in rng.permutation(len(members)):
            assignment[position % k].append(members[int(index)])
            position += 1

    folds = []
    for i in range(k):
        test = tuple(assignment[i])
        train = tuple(p for j in range(k) if j != i for p in assignment[j])
        folds.append(Fold(index=i, train_siblings=train, test_siblings=test))
    return folds


def sweep_thresholds(
    labeled: Sequence[tuple[FeatureVector, Label]],
) -> tuple[np.ndarray, np.ndarray]:
    """
    MCC of every candidate threshold (midpoints of sorted distinct raw deltas).

    Pairs rejected by the first-order filter always count as predicted
    non-siblings.
    """
    total_pos = sum(1 for _, label in labeled if label is Label.SIBLING)
    total_neg = len(labeled) - total_pos
    passing = [
        (fv.delta_tcpraw, label is Label.SIBLING)
        for fv, label in labeled
        if first_order_filter(fv) is None and fv.delta_tcpraw is not None
    ]
    if not passing or len({positive for _, positive in passing}) < 2:
        raise SingleClass("both classes must pass the first-order filter")

    values = np.array([value for value, _ in passing], dtype=np.float64)
    positive = np.array([flag for _, flag in passing], dtype=bool)
    distinct, inverse = np.unique(values, return_inverse=True)
    if len(distinct) < 2:
        raise SingleClass("all raw deltas are equal; no threshold separates them")

    pos_at = np.bincount(inverse, weights=positive, minlength=len(distinct))
    neg_at = np.bincount(inverse, weights=~positive, minlength=len(distinct))
    tp = np.cumsum(pos_at)[:-1]
    fp = np.cumsum(neg_at)[:-1]
    fn = total_pos - tp
    tn = total_neg - fp
    thresholds = (distinct[:-1] + distinct[1:]) / 2

    denominator = np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(denominator > 0, (tp * tn - fp * fn) / denominator, 0.0)
    return thresholds, scores


def train_stump(labeled: Sequence[tuple[FeatureVector, Label]]) -> Ml1Model:
    """Pick the raw-delta threshold with the best MCC; ties go to the larger one."""
    thresholds, scores = sweep_thresholds(labeled)
    best = float(scores.max())
    chosen = int(np.flatnonzero(scores >= best - 1e-12)[-1])
    logger.debug("Stump threshold %.6f s with MCC %.4f", thresholds[chosen], best)
    return Ml1Model(tcpraw_threshold=float(thresholds[chosen]))


@dataclass(frozen=True)
class EvalRow:
    classifier: str
    train_ds: str
    test_ds: str
    counts: ConfusionCounts
    fold: str = "all"
    group: str = "all"
    threshold: float | None = None

    @property
    def precision(self) -> float | None:
        return precision(self.counts)

    @property
    def mcc(self) -> float:
        return mcc(self.counts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "classifier": self.classifier,
            "type": CLASSIFIER_TYPES.get(self.classifier, ""),
            "train_ds": self.train_ds,
            "test_ds": self.test_ds,
            "fold": self.fold,
            "group": self.group,
            "threshold": self.threshold,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "tn": self.counts.tn,
            "fn": self.counts.fn,
            "precision": self.precision,
            "mcc": self.mcc,
        }


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    means: list[dict[str, Any]] = field(default_factory=list)

    def select(self, classifier: str, fold: str = "all", group: str = "all") -> EvalRow:
        for row in self.rows:
            if (row.classifier, row.fold, row.group) == (classifier, fold, group):
                return row
        raise KeyError(f"no row for {classifier}/{fold}/{group}")

    def to_dict(self) -> dict[str, Any]:
        return {"rows": [row.to_dict() for row in self.rows], "means": self.means}

    def format_table(self) -> str:
        header = (
            f"{'Algo':<8} {'Train DS':<10} {'Test DS':<12} {'Fold':<5} "
            f"{'Group':<10} {'Prec.':>7} {'MCC':>7} {'Type':<10}"
        )
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row.classifier:<8} {row.train_ds:<10} {row.test_ds:<12} "
                f"{row.fold:<5} {row.group:<10} {_fmt(row.precision):>7} "
                f"{_fmt(row.mcc):>7} {CLASSIFIER_TYPES.get(row.classifier, ''):<10}"
            )
        for mean in self.means:
            lines.append(
                f"{mean['classifier']:<8} {mean['train_ds']:<10} {mean['test_ds']:<12} "
                f"{'mean':<5} {'all':<10} {_fmt(mean['precision']):>7} "
                f"{_fmt(mean['mcc']):>7} {CLASSIFIER_TYPES.get(mean['classifier'], ''):<10}"
            )
        return "\n".join(lines)


def _fmt(value: float | None) -> str:
    return "undef" if value is None else f"{value:.4f}"


def mean_rows(rows: Iterable[EvalRow], **labels: str) -> list[dict[str, Any]]:
    """Arithmetic mean of precision and MCC per classifier."""
    by_classifier: dict[str, list[EvalRow]] = defaultdict(list)
    for row in rows:
        by_classifier[row.classifier].append(row)
    means = []
    for name in sorted(by_classifier):
        group = by_classifier[name]
        precisions = [r.precision for r in group if r.precision is not None]
        means.append(
            {
                "classifier": name,
                "train_ds": labels.get("train_ds", group[0].train_ds),
                "test_ds": labels.get("test_ds", group[0].test_ds),
                "precision": float(np.mean(precisions)) if precisions else None,
                "mcc": float(np.mean([r.mcc for r in group])),
                "n": len(group),
            }
        )
    return means


def combine_reports(reports: Sequence[EvalReport]) -> list[dict[str, Any]]:
    """Means across several runs (e.g. one report per simulator seed)."""
    whole = [row for report in reports for row in report.rows if row.fold == "all"]
    return mean_rows(
        [row for row in whole if row.group == "all"], test_ds="seed-mean"
    )


class Evaluator:
    """Scores all classifiers on a labeled batch, as a whole, per group and per fold."""

    def __init__(
        self,
        suite: ClassifierSuite | None = None,
        extractor: FeatureExtractor | None = None,
        dataset: str = "batch",
    ) -> None:
        self.suite = suite or ClassifierSuite()
        self.extractor = extractor or FeatureExtractor()
        self.dataset = dataset

    def _score(
        self,
        ids: Sequence[str],
        decisions: Mapping[str, Decision],
        labels: Mapping[str, Label],
    ) -> ConfusionCounts:
        return confusion((decisions[i] for i in ids), (labels[i] for i in ids))

    def evaluate(
        self, pairs: Sequence[CandidatePair], k: int = 10, seed: int = 0
    ) -> EvalReport:
        labeled = [p for p in pairs if p.label is not None]
        siblings = [p for p in labeled if p.label is Label.SIBLING]
        if len(siblings) < 2:
            raise SingleClass("evaluation needs at least two labeled siblings")

        synthesized = synthesize_nonsiblings(siblings)
        population = labeled + synthesized
        vectors = dict(
            zip(
                (p.id for p in population),
                self.extractor.extract_all(population),
                strict=True,
            )
        )
        labels = {p.id: p.label for p in population}
        groups = {p.id: _group_of(p) for p in population}
        decisions = {
            name: {pid: self.suite.classify(name, fv) for pid, fv in vectors.items()}
            for name in CLASSIFIER_NAMES
        }

        report = EvalReport()
        all_ids = [p.id for p in population]
        for name in CLASSIFIER_NAMES:
            report.rows.append(
                EvalRow(
                    classifier=name,
                    train_ds="fixed",
                    test_ds=self.dataset,
                    counts=self._score(all_ids, decisions[name], labels),
                    threshold=self.suite.ml1.tcpraw_threshold if name == "ml1" else None,
                )
            )
        for group in sorted({_group_of(p) for p in siblings} - {""}):
            ids = [pid for pid in all_ids if groups[pid] == group]
            for name in CLASSIFIER_NAMES:
                report.rows.append(
                    EvalRow(
                        classifier=name,
                        train_ds="fixed",
                        test_ds=self.dataset,
                        counts=self._score(ids, decisions[name], labels),
                        group=group,
                    )
                )

        fold_rows = self._cross_validate(siblings, vectors, labels, decisions, k, seed)
        report.rows.extend(fold_rows)
        report.means = mean_rows(fold_rows, test_ds=f"{self.dataset}-cv")
        return report

    def _cross_validate(
        self,
        siblings: Sequence[CandidatePair],
        vectors: Mapping[str, FeatureVector],
        labels: Mapping[str, Label],
        decisions: Mapping[str, Mapping[str, Decision]],
        k: int,
        seed: int,
    ) -> list[EvalRow]:
        rows: list[EvalRow] = []
        for fold in stratified_kfold(siblings, k=k, seed=seed):
            if len(fold.test_siblings) < 2:
                logger.warning("Fold %s has fewer than 2 test siblings; skipped", fold.index)
                continue
            train_ids = fold.train_ids()
            test_ids = fold.test_ids()
            try:
                model = train_stump([(vectors[i], labels[i]) for i in train_ids])
            except SingleClass as exc:
                logger.warning("Fold %s: stump not trained (%s)", fold.index, exc)
                model = self.suite.ml1
            learned = {i: classify_ml1(vectors[i], model) for i in test_ids}
            rows.append(
                EvalRow(
                    classifier="ml1",
                    train_ds="cv-train",
                    test_ds="cv-test",
                    counts=self._score(test_ids, learned, labels),
                    fold=str(fold.index),
                    threshold=model.tcpraw_threshold,
                )
            )
            for name in ("ht", "beverly"):
                rows.append(
                    EvalRow(
                        classifier=name,
                        train_ds="fixed",
                        test_ds="cv-test",
                        counts=self._score(test_ids, decisions[name], labels),
                        fold=str(fold.index),
                    )
                )
        return rows
