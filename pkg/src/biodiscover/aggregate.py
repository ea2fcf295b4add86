"""Specimen-level decision rules over per-image confidence vectors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class SpecimenPrediction:
    specimen_id: str
    rule: str
    predicted: int
    scores: tuple[float, ...]
    n_images: int


def _as_matrix(vectors) -> np.ndarray:
    probs = np.asarray(vectors, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("at least one confidence vector is required")
    return probs


def _column_sums(probs: np.ndarray) -> list[float]:
    # fsum makes the tie-break independent of image order
    return [math.fsum(col) for col in probs.T]


def _pick(candidates: Iterable[int], totals: Sequence[float]) -> int:
    """Candidate with the largest total; lowest index among equals."""
    return min(candidates, key=lambda k: (-totals[k], k))


def majority_vote(vectors, specimen_id: str = "") -> SpecimenPrediction:
    """Modal per-image label.

    An image whose top probability is shared between classes votes for the
    one with more summed probability over the specimen's images (then the
    lower index). Tied vote counts are broken the same way.
    """
    probs = _as_matrix(vectors)
    totals = _column_sums(probs)
    votes = [0] * probs.shape[1]
    for row in probs:
        top = row.max()
        votes[_pick(np.flatnonzero(row == top).tolist(), totals)] += 1
    best = max(votes)
    winner = _pick([k for k, v in enumerate(votes) if v == best], totals)
    return SpecimenPrediction(specimen_id, "majority", winner, tuple(float(v) for v in votes), len(probs))


def weighted_sum(vectors, specimen_id: str = "") -> SpecimenPrediction:
    """Sum of vectors, each weighted by its own top confidence."""
    probs = _as_matrix(vectors)
    weights = probs.max(axis=1, keepdims=True)
    scores = _column_sums(weights * probs)
    best = max(scores)
    winner = scores.index(best)
    return SpecimenPrediction(specimen_id, "weighted", winner, tuple(scores), len(probs))


Rule = Callable[..., SpecimenPrediction]

RULES: dict[str, Rule] = {"majority": majority_vote, "weighted": weighted_sum}


def get_rule(name: str | Rule) -> Rule:
    if callable(name):
        return name
    try:
        return RULES[name]
    except KeyError:
        raise ValueError(f"unknown decision rule {name!r}; choose from {sorted(RULES)}") from None


def write_predictions(path: Path, rows: Sequence[tuple[SpecimenPrediction, int]], names: Sequence[str] | None = None) -> None:
    """CSV of ``specimen_id,rule,predicted,true,n_images``; labels as names when given."""
    def fmt(k: int):
        return names[k] if names else k

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["specimen_id", "rule", "predicted", "true", "n_images"])
        for pred, true in rows:
            w.writerow([pred.specimen_id, pred.rule, fmt(pred.predicted), fmt(true), pred.n_images])
