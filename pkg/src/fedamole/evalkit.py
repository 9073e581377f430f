"""Accuracy metrics and per-round metric logs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "MetricRecord",
    "MetricLog",
    "exact_match_accuracy",
    "lcs_length",
    "rouge_l",
    "mta",
    "mtal",
]


def exact_match_accuracy(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions for {len(references)} references")
    if not references:
        raise ValueError("exact_match_accuracy needs at least one example")
    hits = sum(list(p) == list(r) for p, r in zip(predictions, references))
    return hits / len(references)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis: Sequence, reference: Sequence) -> float:
    """LCS-based F1 (beta = 1) between two token sequences."""
    if len(reference) == 0:
        raise ValueError("rouge_l needs a non-empty reference")
    if len(hypothesis) == 0:
        return 0.0
    lcs = lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricRecord:
    """Accuracy of every client's model at one round, plus extras.

    ``extras`` holds per-client ``loss`` and ``experts_assigned`` lists when
    the simulator produced them.
    """

    round: int
    acc: list[float]
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.acc):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def mta(self) -> float:
        return float(np.mean(self.acc))


@dataclass
class MetricLog:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, record: MetricRecord) -> None:
        expected = self.records[-1].round + 1 if self.records else record.round
        if record.round != expected:
            raise ValueError(f"round {record.round} breaks contiguity (expected {expected})")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> MetricRecord:
        return self.records[index]


def mta(log: MetricLog, t: int) -> float:
    """Mean test accuracy at round ``t``; negative ``t`` counts back from the last round."""
    if not log.records:
        raise ValueError("empty metric log")
    if t < 0:
        return log.records[t].mta
    for record in log.records:
        if record.round == t:
            return record.mta
    raise KeyError(f"no record for round {t}")


def mtal(log: MetricLog) -> float:
    return mta(log, -1)
