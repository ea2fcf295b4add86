"""Experimental protocol: repeated specimen-level splits and the reports built on them."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .aggregate import SpecimenPrediction, get_rule
from .core import CameraSettings, DataError, Dataset, FrameImage, SpecimenRecord

log = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


class Role(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class SplitPlan:
    repetition: int
    seed: int
    assignment: Mapping[str, Role]

    def ids(self, role: Role) -> list[str]:
        return [sid for sid, r in self.assignment.items() if r is role]

    @property
    def train_ids(self) -> list[str]:
        return self.ids(Role.TRAIN)

    @property
    def val_ids(self) -> list[str]:
        return self.ids(Role.VAL)

    @property
    def test_ids(self) -> list[str]:
        return self.ids(Role.TEST)

    def restricted(self, keep: set[str]) -> "SplitPlan":
        return SplitPlan(self.repetition, self.seed, {s: r for s, r in self.assignment.items() if s in keep})

    def to_dict(self) -> dict:
        return {
            "repetition": self.repetition,
            "seed": self.seed,
            "assignment": {s: r.value for s, r in sorted(self.assignment.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(int(d["repetition"]), int(d["seed"]), {s: Role(r) for s, r in d["assignment"].items()})


def bucket_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    """Largest-remainder split of ``n`` specimens; remainder ties favour train, then val."""
    quotas = [Fraction(f).limit_denominator(10**6) * n for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def make_splits(
    ds: Dataset, n_reps: int = 10, seed: int = 0, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> list[SplitPlan]:
    """Per-species stratified train/val/test plans.

    Specimen ids are sorted before shuffling, so datasets holding the same
    ids (for instance the nine camera settings) receive identical plans.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be at least 1")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {list(fractions)}")
    by_species: dict[int, list[str]] = {}
    for spec in ds.specimens:
        by_species.setdefault(spec.label.id, []).append(spec.specimen_id)
    sizes = {}
    for k, ids in sorted(by_species.items()):
        sizes[k] = bucket_sizes(len(ids), fractions)
        if min(sizes[k]) < 1:
            name = ds.registry.label(k).name
            raise DataError(
                f"species {name!r} has {len(ids)} specimens; split {sizes[k]} leaves a bucket empty"
            )
    plans = []
    for rep in range(n_reps):
        rng = np.random.default_rng([seed, rep])
        assignment: dict[str, Role] = {}
        for k, ids in sorted(by_species.items()):
            perm = rng.permutation(sorted(ids))
            n_train, n_val, _ = sizes[k]
            for i, sid in enumerate(perm):
                assignment[str(sid)] = Role.TRAIN if i < n_train else Role.VAL if i < n_train + n_val else Role.TEST
        plans.append(SplitPlan(rep, seed, dict(sorted(assignment.items()))))
    return plans


def save_plans(plans: Sequence[SplitPlan], path: Path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in plans], indent=1) + "\n", encoding="utf-8")


def load_plans(path: Path) -> list[SplitPlan]:
    return [SplitPlan.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


class Predictor(Protocol):
    def predict_frames(self, frames: Sequence[FrameImage]) -> np.ndarray: ...


class Classifier(Protocol):
    def fit(self, ds: Dataset, train_ids: Sequence[str], val_ids: Sequence[str], seed: int) -> Predictor: ...


def model_seed(plan: SplitPlan) -> int:
    return int(np.random.SeedSequence([plan.seed, plan.repetition]).generate_state(1)[0])


@dataclass
class RepetitionScores:
    """Per-image probabilities of one repetition's test specimens."""

    repetition: int
    probs: dict[str, np.ndarray]
    labels: dict[str, int]


def score_repetition(ds: Dataset, plan: SplitPlan, classifier: Classifier) -> RepetitionScores:
    predictor = classifier.fit(ds, plan.train_ids, plan.val_ids, model_seed(plan))
    by_id = ds.by_id()
    probs, labels = {}, {}
    for sid in plan.test_ids:
        spec = by_id[sid]
        p = predictor.predict_frames(spec.frames)
        if len(p) == 0:
            raise DataError(f"test specimen {sid} has no scored images")
        probs[sid] = p
        labels[sid] = spec.label.id
    return RepetitionScores(plan.repetition, probs, labels)


@dataclass
class RepetitionResult:
    repetition: int
    accuracy: float
    counts: np.ndarray
    predictions: list[tuple[SpecimenPrediction, int]]


def aggregate_repetition(scores: RepetitionScores, rule, n_classes: int, rows: Mapping[str, np.ndarray] | None = None) -> RepetitionResult:
    """Apply ``rule`` per test specimen; ``rows`` optionally selects image rows."""
    rule = get_rule(rule)
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    preds = []
    for sid, p in scores.probs.items():
        if rows is not None:
            p = p[rows[sid]]
        pred = rule(p, specimen_id=sid)
        true = scores.labels[sid]
        counts[true, pred.predicted] += 1
        preds.append((pred, true))
    n = counts.sum()
    return RepetitionResult(scores.repetition, float(np.trace(counts) / n) if n else 0.0, counts, preds)


def row_normalize(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, counts / totals, np.nan)


def summarize(accuracies: Sequence[float]) -> tuple[float, float]:
    acc = np.asarray(accuracies, dtype=float)
    std = float(acc.std(ddof=1)) if len(acc) > 1 else 0.0
    return float(acc.mean()), std


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    std: float
    confusion: np.ndarray
    species: list[str]
    rule: str
    settings: CameraSettings | None = None
    counts: list[np.ndarray] = field(default_factory=list, repr=False)
    predictions: list[list[tuple[SpecimenPrediction, int]]] = field(default_factory=list, repr=False)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Sequence[RepetitionResult], species: Sequence[str], rule: str, settings=None, **extra) -> "EvalReport":
        results = sorted(results, key=lambda r: r.repetition)
        accuracies = [r.accuracy for r in results]
        mean, std = summarize(accuracies)
        stacked = np.stack([row_normalize(r.counts) for r in results])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            confusion = np.nanmean(stacked, axis=0)
        return cls(
            accuracies, mean, std, confusion, list(species), rule, settings,
            [r.counts for r in results], [r.predictions for r in results], extra,
        )

    def to_dict(self) -> dict:
        return {
            "rule": self.rule,
            "settings": None if self.settings is None else self.settings.to_dict(),
            "accuracies": self.accuracies,
            "mean": self.mean,
            "std": self.std,
            "species": self.species,
            "confusion": [[None if math.isnan(v) else v for v in row] for row in self.confusion.tolist()],
            **self.extra,
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def write_confusion_csv(path: Path, confusion: np.ndarray, species: Sequence[str]) -> None:
    """True species on rows, predicted species on columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\predicted", *species])
        for name, row in zip(species, confusion):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_confusion_csv(path: Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    species = rows[0][1:]
    if [r[0] for r in rows[1:]] != species:
        raise DataError(f"{path}: row labels do not match column labels")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), species


def _map(fn, items, jobs: int):
    if jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(x) for x in items)


def _score_all(ds: Dataset, plans: Sequence[SplitPlan], classifier: Classifier, jobs: int) -> list[RepetitionScores]:
    keep = set(ds.specimen_ids())
    plans = [p.restricted(keep) for p in plans]
    return _map(lambda p: score_repetition(ds, p, classifier), plans, jobs)


def rule_name(rule) -> str:
    return rule if isinstance(rule, str) else getattr(rule, "__name__", "custom")


def evaluate(ds: Dataset, plans: Sequence[SplitPlan], classifier: Classifier, rule="majority", jobs: int = 1) -> EvalReport:
    """Train, checkpoint and test once per plan; accuracy is per test specimen."""
    scores = _score_all(ds, plans, classifier, jobs)
    results = [aggregate_repetition(s, rule, ds.n_classes) for s in scores]
    return EvalReport.from_results(results, ds.registry.names, rule_name(rule), ds.settings)


@dataclass
class GridReport:
    cells: dict[CameraSettings, EvalReport]

    @property
    def best(self) -> CameraSettings:
        return max(self.cells, key=lambda c: (self.cells[c].mean, -self.cells[c].std))

    def axes(self) -> tuple[list[float], list[int]]:
        return sorted({c.aperture_f for c in self.cells}), sorted({c.exposure_us for c in self.cells})

    def table(self) -> list[list[str]]:
        """Aperture rows by exposure columns of ``mean (std)``; best cell starred."""
        apertures, exposures = self.axes()
        best = self.best
        out = [["aperture", *(str(e) for e in exposures)]]
        for f in apertures:
            row = [CameraSettings(exposures[0], f).aperture_label]
            for e in exposures:
                rep = self.cells.get(CameraSettings(e, f))
                if rep is None:
                    row.append("")
                    continue
                mark = "*" if rep.settings == best else ""
                row.append(f"{rep.mean:.3f} ({rep.std:.3f}){mark}")
            out.append(row)
        return out

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(self.table())

    def to_dict(self) -> dict:
        return {"best": self.best.key, "cells": {c.key: r.to_dict() for c, r in sorted(self.cells.items())}}


def settings_grid(
    datasets: Mapping[CameraSettings, Dataset], plans: Sequence[SplitPlan], classifier: Classifier, rule="majority", jobs: int = 1
) -> GridReport:
    if not datasets:
        raise ValueError("no datasets given")
    ids = {cell: set(ds.specimen_ids()) for cell, ds in datasets.items()}
    reference = next(iter(ids.values()))
    for cell, s in ids.items():
        if s != reference:
            diff = sorted(s ^ reference)
            raise DataError(f"dataset {cell.key} does not share specimen ids: {diff[:5]}")
    cells = list(datasets)
    jobs_list = [(cell, p) for cell in cells for p in plans]
    scores = _map(lambda cp: score_repetition(datasets[cp[0]], cp[1], classifier), jobs_list, jobs)
    out = {}
    for i, cell in enumerate(cells):
        ds = datasets[cell]
        chunk = scores[i * len(plans) : (i + 1) * len(plans)]
        results = [aggregate_repetition(s, rule, ds.n_classes) for s in chunk]
        out[cell] = EvalReport.from_results(results, ds.registry.names, rule_name(rule), cell)
    return GridReport(out)


@dataclass
class AblationReport:
    camera1: EvalReport
    camera2: EvalReport
    both: EvalReport
    excluded: list[str]
    image_counts: dict[str, int]

    def rows(self) -> list[tuple[str, EvalReport]]:
        return [("camera 1", self.camera1), ("camera 2", self.camera2), ("both", self.both)]

    def to_dict(self) -> dict:
        return {
            "excluded": self.excluded,
            "image_counts": self.image_counts,
            "reports": {name: rep.to_dict() for name, rep in self.rows()},
        }

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["images", "mean", "std"])
            for name, rep in self.rows():
                w.writerow([name, repr(rep.mean), repr(rep.std)])


def equalized_camera_sets(ds: Dataset, seed: int = 0) -> tuple[Dataset, Dataset, Dataset, list[str]]:
    """Camera 1, camera 2 and mixed datasets with ``min(n1, n2)`` images per specimen."""
    sets: tuple[list, list, list] = ([], [], [])
    excluded = []
    for idx, spec in enumerate(sorted(ds.specimens, key=lambda s: s.specimen_id)):
        cam1, cam2 = spec.frames_for(1), spec.frames_for(2)
        m = min(len(cam1), len(cam2))
        if m == 0:
            excluded.append(spec.specimen_id)
            continue
        rng = np.random.default_rng([seed, idx])
        pools = (cam1, cam2, cam1 + cam2)
        for out, pool in zip(sets, pools):
            pick = np.sort(rng.choice(len(pool), size=m, replace=False))
            out.append(spec.with_frames([pool[i] for i in pick]))
    if excluded:
        log.warning("%d specimens lack images from one camera and were excluded", len(excluded))
    return (*(ds.with_specimens(s) for s in sets), excluded)


def camera_ablation(
    ds: Dataset, plans: Sequence[SplitPlan], classifier: Classifier, rule="majority", seed: int = 0, jobs: int = 1
) -> AblationReport:
    """Compare camera 1 only, camera 2 only and both cameras at equal image counts."""
    one, two, both, excluded = equalized_camera_sets(ds, seed)
    reports = [evaluate(d, plans, classifier, rule, jobs) for d in (one, two, both)]
    counts = {s.specimen_id: len(s.frames) for s in both.specimens}
    for rep in reports:
        rep.extra["excluded_specimens"] = len(excluded)
    return AblationReport(*reports, excluded=excluded, image_counts=counts)


@dataclass
class NmaxCurve:
    points: list[tuple[float, float, float]]
    reports: dict[float, EvalReport]

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["n_max", "mean", "std"])
            for n, mean, std in self.points:
                w.writerow(["inf" if math.isinf(n) else int(n), repr(mean), repr(std)])


def subsample_rows(scores: RepetitionScores, n_max: float, seed: int) -> dict[str, np.ndarray]:
    """Up to ``n_max`` image rows per specimen, drawn without replacement."""
    rows = {}
    for idx, (sid, p) in enumerate(sorted(scores.probs.items())):
        n = len(p)
        if n <= n_max:
            rows[sid] = np.arange(n)
        else:
            rng = np.random.default_rng([seed, scores.repetition, int(n_max), idx])
            rows[sid] = np.sort(rng.choice(n, size=int(n_max), replace=False))
    return rows


def nmax_sweep(
    ds: Dataset,
    plans: Sequence[SplitPlan],
    classifier: Classifier,
    rule="majority",
    nmax_values: Sequence[float] = (1, 5, 10, 20, 50, math.inf),
    seed: int = 0,
    jobs: int = 1,
) -> NmaxCurve:
    """Accuracy when each test specimen is judged from at most ``N_max`` images.

    The cap applies at prediction time; each plan trains one model that is
    shared by every ``N_max`` value.
    """
    if any(not n > 0 for n in nmax_values):
        raise ValueError("N_max values must be positive")
    scores = _score_all(ds, plans, classifier, jobs)
    points, reports = [], {}
    for n_max in nmax_values:
        results = [aggregate_repetition(s, rule, ds.n_classes, subsample_rows(s, n_max, seed)) for s in scores]
        rep = EvalReport.from_results(results, ds.registry.names, rule_name(rule), ds.settings, n_max=None if math.isinf(n_max) else n_max)
        reports[n_max] = rep
        points.append((float(n_max), rep.mean, rep.std))
    return NmaxCurve(points, reports)
