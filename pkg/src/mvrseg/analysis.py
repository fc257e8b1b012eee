"""Diagnostics over segmentations and prediction files.

Segmentation granularity per group, accuracy deltas bucketed by predictive
entropy, distance of a run to the baseline/SR ensemble, and per-group score
deltas. Everything returns plain data ready for JSON; nothing plots.
"""

from __future__ import annotations

import math
from collections import defaultdict
from collections.abc import Collection, Mapping, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .data import Prediction
from .trainer import entropy, kl_divergence

GRANULARITY_BUCKETS = ("1", "2", "3", "4", "5", "6", "7", "8", "9", "9+")


def pieces_bucket(n: int) -> str:
    if n < 1:
        raise ValueError("a word has at least one piece")
    return "9+" if n > 9 else str(n)


@dataclass
class GranularityReport:
    histograms: dict[str, dict[str, float]]
    mean_pieces: dict[str, float]
    num_words: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def granularity(
    corpus: Sequence[str],
    segmenter,
    groups: Sequence[str],
    known_groups: Collection[str] | None = None,
) -> GranularityReport:
    """Share of words per pieces-per-word bucket, and mean pieces per word, by group.

    ``segmenter`` needs an ``encode(sentence) -> TokenSeq`` method. Passing
    ``known_groups`` turns on strict mode: any other label is an error.
    """
    if len(corpus) != len(groups):
        raise ValueError(f"{len(corpus)} sentences but {len(groups)} group labels")
    counts: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(GRANULARITY_BUCKETS, 0))
    totals: dict[str, int] = defaultdict(int)
    piece_sums: dict[str, int] = defaultdict(int)
    for sentence, group in zip(corpus, groups):
        if known_groups is not None and group not in known_groups:
            raise ValueError(f"unknown group {group!r}")
        tokens = segmenter.encode(sentence)
        for start, end in tokens.word_spans:
            counts[group][pieces_bucket(end - start)] += 1
            totals[group] += 1
            piece_sums[group] += end - start
    histograms = {
        g: {b: c / totals[g] for b, c in counts[g].items()} for g in sorted(counts) if totals[g]
    }
    means = {g: piece_sums[g] / totals[g] for g in histograms}
    return GranularityReport(histograms, means, {g: totals[g] for g in histograms})


def granularity_gain_pairs(report: GranularityReport, gains: Mapping[str, float]) -> list[tuple[str, float, float]]:
    """``(group, mean pieces per word, gain)`` for every group present in both."""
    return [(g, report.mean_pieces[g], float(gains[g])) for g in sorted(report.mean_pieces) if g in gains]


def _align(*runs: Sequence[Prediction]) -> list[tuple[Prediction, ...]]:
    keyed = []
    for run in runs:
        by_id = {}
        for rec in run:
            if rec.id in by_id:
                raise ValueError(f"duplicate prediction id {rec.id!r}")
            by_id[rec.id] = rec
        keyed.append(by_id)
    ids = set(keyed[0])
    for other in keyed[1:]:
        if set(other) != ids:
            missing = sorted(ids.symmetric_difference(other))[:5]
            raise ValueError(f"prediction files are not aligned; mismatched ids e.g. {missing}")
    rows = []
    for i in sorted(ids, key=lambda s: (len(s), s)):
        recs = tuple(k[i] for k in keyed)
        if len({len(r.probs) for r in recs}) != 1:
            raise ValueError(f"id {i!r}: runs disagree on the number of classes")
        rows.append(recs)
    return rows


@dataclass
class EntropyBucketReport:
    edges: list[float]
    counts: list[int]
    metric_a: list[float | None]
    metric_b: list[float | None]
    delta: list[float | None]

    def to_dict(self) -> dict:
        return asdict(self)


def entropy_buckets(
    run_a: Sequence[Prediction],
    run_b: Sequence[Prediction],
    num_buckets: int = 5,
) -> EntropyBucketReport:
    """Bucket examples by the entropy of run A's prediction; report accuracy of B minus A.

    Buckets are equal-width over ``[0, ln C]``; the last one is closed.
    """
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    rows = _align(run_a, run_b)
    if not rows:
        raise ValueError("no predictions")
    num_classes = len(rows[0][0].probs)
    top = math.log(num_classes)
    edges = np.linspace(0.0, top, num_buckets + 1).tolist()
    counts = [0] * num_buckets
    hits_a = [0] * num_buckets
    hits_b = [0] * num_buckets
    for a, b in rows:
        if a.gold != b.gold:
            raise ValueError(f"id {a.id!r}: runs disagree on the gold label")
        h = entropy(a.probs)
        k = min(int(h / top * num_buckets), num_buckets - 1) if top > 0 else 0
        counts[k] += 1
        hits_a[k] += a.predicted == a.gold
        hits_b[k] += b.predicted == b.gold
    metric_a = [ha / c if c else None for ha, c in zip(hits_a, counts)]
    metric_b = [hb / c if c else None for hb, c in zip(hits_b, counts)]
    delta = [None if ma is None else mb - ma for ma, mb in zip(metric_a, metric_b)]
    return EntropyBucketReport(edges, counts, metric_a, metric_b, delta)


def ensemble_kl(
    base: Sequence[Prediction],
    sr: Sequence[Prediction],
    test: Sequence[Prediction],
) -> dict[str, float]:
    """Per group, mean ``KL(ensemble || test)`` with ensemble = mean of base and SR."""
    sums: dict[str, float] = defaultdict(float)
    counts: dict[str, int] = defaultdict(int)
    for b, s, t in _align(base, sr, test):
        ens = 0.5 * (np.asarray(b.probs) + np.asarray(s.probs))
        sums[t.group] += kl_divergence(ens, t.probs)
        counts[t.group] += 1
    return {g: sums[g] / counts[g] for g in sorted(sums)}


def group_scores(run: Sequence[Prediction]) -> dict[str, float]:
    """Accuracy per group."""
    hits: dict[str, int] = defaultdict(int)
    counts: dict[str, int] = defaultdict(int)
    for rec in run:
        hits[rec.group] += rec.predicted == rec.gold
        counts[rec.group] += 1
    return {g: hits[g] / counts[g] for g in sorted(counts)}


def grouped_delta(
    scores_a: Mapping[str, float],
    scores_b: Mapping[str, float],
    group_labels: Mapping[str, str] | None = None,
) -> dict[str, float]:
    """Mean of ``B - A`` per label, where ``group_labels`` maps each group to its label.

    Without ``group_labels`` every group is its own label.
    """
    if set(scores_a) != set(scores_b):
        raise ValueError("runs cover different groups")
    by_label: dict[str, list[float]] = defaultdict(list)
    for group in scores_a:
        label = group if group_labels is None else group_labels.get(group)
        if label is None:
            raise ValueError(f"group {group!r} has no label")
        by_label[label].append(scores_b[group] - scores_a[group])
    return {lab: float(np.mean(v)) for lab, v in sorted(by_label.items())}
