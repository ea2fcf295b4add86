"""Per-image classification.

The built-in baseline is a multinomial logistic model on 30 hand-made image
features, trained by plain minibatch SGD over a staged learning-rate
schedule with a validation checkpoint after every epoch. Scores from any
external network can be loaded instead, one probability row per image.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, Dataset, FrameImage, SpecimenRecord, check_confidence

log = logging.getLogger(__name__)

N_BINS = 8
N_FEATURES = 3 + 3 * N_BINS + 3
FEATURE_NAMES = (
    [f"mean_{c}" for c in "rgb"]
    + [f"hist_{c}{i}" for c in "rgb" for i in range(N_BINS)]
    + ["area", "aspect", "fill"]
)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    degenerate: bool = False


def extract_features(img: np.ndarray, mask: np.ndarray) -> FeatureVector:
    """Colour and silhouette features of a rescaled crop.

    ``img`` holds RGB values in [0, 1]; ``mask`` is the specimen silhouette
    at the same size. Colour statistics are taken over the silhouette (the
    whole image when the silhouette is empty). The last three entries are
    silhouette fraction of the image, bbox height/width and bbox fill ratio.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.shape[:2] != mask.shape or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"image {img.shape} and mask {mask.shape} do not match")
    n_mask = int(mask.sum())
    degenerate = n_mask == 0
    px = img.reshape(-1, 3) if degenerate else img[mask]
    means = px.mean(axis=0)
    bins = np.minimum((px * N_BINS).astype(np.intp), N_BINS - 1)
    hist = np.stack([np.bincount(bins[:, c], minlength=N_BINS) for c in range(3)]) / len(px)
    if degenerate:
        geom = np.zeros(3)
    else:
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        h = rows[-1] - rows[0] + 1
        w = cols[-1] - cols[0] + 1
        geom = np.array([n_mask / mask.size, h / w, n_mask / (h * w)])
    return FeatureVector(np.concatenate([means, hist.ravel(), geom]), degenerate)


def image_features(frame: FrameImage) -> np.ndarray:
    if frame.features is not None:
        return frame.features
    from .imgproc import estimate_mask, rescale_for_classifier, rescale_mask

    pixels = frame.load_pixels()
    mask = frame.load_mask()
    if mask is None:
        mask = estimate_mask(pixels)
    return extract_features(rescale_for_classifier(pixels), rescale_mask(mask)).values


def feature_matrix(frames: Sequence[FrameImage]) -> np.ndarray:
    if not frames:
        return np.zeros((0, N_FEATURES))
    return np.stack([image_features(f) for f in frames])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed cross-entropy of a batch and its gradients w.r.t. weights and bias."""
    probs = softmax(x @ weights.T + bias)
    n = len(y)
    loss = -float(np.sum(np.log(np.maximum(probs[np.arange(n), y], 1e-300))))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    return loss, delta.T @ x, delta.sum(axis=0)


@dataclass(frozen=True)
class TrainSchedule:
    learning_rates: tuple[float, ...] = (1e-3, 1e-4, 1e-5, 1e-6)
    epochs_per_rate: int = 50
    batch_size: int = 128

    def __post_init__(self):
        rates = self.learning_rates
        if any(r <= 0 for r in rates) or any(b >= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"learning rates must be positive and strictly decreasing: {rates}")
        if self.epochs_per_rate < 0 or self.batch_size < 1:
            raise ValueError("epochs_per_rate must be >= 0 and batch_size >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs_per_rate * len(self.learning_rates)

    def to_dict(self) -> dict:
        return {
            "learning_rates": list(self.learning_rates),
            "epochs_per_rate": self.epochs_per_rate,
            "batch_size": self.batch_size,
        }


@dataclass
class BaselineModel:
    weights: np.ndarray
    bias: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    species: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_scale

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return softmax(self.standardize(x) @ self.weights.T + self.bias)

    def predict_frames(self, frames: Sequence[FrameImage]) -> np.ndarray:
        return self.predict_proba(feature_matrix(frames)) if frames else np.zeros((0, self.n_classes))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "feature_names": FEATURE_NAMES,
            "species": list(self.species),
            "metadata": self.metadata,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "BaselineModel":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            np.asarray(d["weights"], float), np.asarray(d["bias"], float),
            np.asarray(d["feature_mean"], float), np.asarray(d["feature_scale"], float),
            tuple(d.get("species", ())), d.get("metadata", {}),
        )


def predict_image(model: BaselineModel, img: FrameImage | np.ndarray) -> np.ndarray:
    """Confidence vector for one image (a FrameImage or a raw feature vector)."""
    x = image_features(img) if isinstance(img, FrameImage) else np.asarray(img, dtype=float)
    return model.predict_proba(x)[0]


def _specimen_accuracy(model: BaselineModel, x: np.ndarray, groups: list[np.ndarray], labels: np.ndarray) -> float:
    from .aggregate import majority_vote

    probs = model.predict_proba(x)
    hits = [majority_vote(probs[idx]).predicted == lab for idx, lab in zip(groups, labels)]
    return float(np.mean(hits)) if hits else 0.0


def fit_softmax(
    x_train: np.ndarray,
    y_train: np.ndarray,
    n_classes: int,
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    x_val: np.ndarray | None = None,
    val_groups: Sequence[np.ndarray] | None = None,
    val_labels: Sequence[int] | None = None,
    selection: str = "specimen",
    species: Sequence[str] = (),
) -> BaselineModel:
    """Train the softmax baseline and return the best validation checkpoint.

    ``val_groups`` index rows of ``x_val`` per validation specimen and
    ``val_labels`` give their classes. Selection scores each epoch by
    specimen-level majority-vote accuracy (``selection="specimen"``) or
    per-image accuracy (``"image"``); ties keep the earliest epoch.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.intp)
    present = set(np.unique(y_train).tolist())
    missing = [k for k in range(n_classes) if k not in present]
    if missing:
        names = [species[k] if k < len(species) else str(k) for k in missing]
        raise DataError(f"classes absent from the training set: {names}")
    if selection not in ("specimen", "image"):
        raise ValueError(f"unknown selection criterion {selection!r}")

    rng = np.random.default_rng(seed)
    mean = x_train.mean(axis=0)
    scale = x_train.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x_train - mean) / scale
    n_feat = xs.shape[1]
    weights = rng.normal(0.0, 0.01, (n_classes, n_feat))
    bias = np.zeros(n_classes)
    model = BaselineModel(weights.copy(), bias.copy(), mean, scale, tuple(species))

    has_val = x_val is not None and len(x_val) > 0
    if has_val:
        x_val = np.asarray(x_val, dtype=np.float64)
        if selection == "specimen":
            groups = [np.asarray(g, dtype=np.intp) for g in val_groups]
            labels = np.asarray(val_labels)
        else:
            image_labels = np.concatenate(
                [np.full(len(g), lab) for g, lab in zip(val_groups, val_labels)]
            )
            order = np.concatenate([np.asarray(g, dtype=np.intp) for g in val_groups])

    def score(m: BaselineModel) -> float:
        if not has_val:
            return 0.0
        if selection == "specimen":
            return _specimen_accuracy(m, x_val, groups, labels)
        pred = m.predict_proba(x_val[order]).argmax(axis=1)
        return float(np.mean(pred == image_labels))

    stages, history = [], []
    best = (-math.inf, 0, weights.copy(), bias.copy())
    epoch = 0
    n = len(xs)
    for stage, lr in enumerate(schedule.learning_rates):
        log.info(
            "stage %d: learning rate %g for %d epochs, batch size %d",
            stage, lr, schedule.epochs_per_rate, schedule.batch_size,
        )
        stages.append({"stage": stage, "learning_rate": lr, "epochs": schedule.epochs_per_rate, "batch_size": schedule.batch_size})
        for _ in range(schedule.epochs_per_rate):
            epoch += 1
            perm = rng.permutation(n)
            for start in range(0, n, schedule.batch_size):
                idx = perm[start : start + schedule.batch_size]
                _, gw, gb = cross_entropy(weights, bias, xs[idx], y_train[idx])
                weights -= lr * gw
                bias -= lr * gb
            model.weights, model.bias = weights, bias
            val = score(model)
            train_loss = cross_entropy(weights, bias, xs, y_train)[0] / n
            history.append({"epoch": epoch, "learning_rate": lr, "train_loss": train_loss, "val_score": val})
            if val > best[0]:
                best = (val, epoch, weights.copy(), bias.copy())

    flagged = schedule.total_epochs == 0
    if flagged:
        log.warning("schedule has no epochs; returning the initial model")
    model.weights, model.bias = best[2], best[3]
    model.metadata = {
        "seed": seed,
        "schedule": schedule.to_dict(),
        "stages": stages,
        "selection": selection,
        "best_epoch": best[1],
        "best_val_score": None if flagged else best[0],
        "untrained": flagged,
        "history": history,
    }
    return model


def _frames_and_labels(specimens: Sequence[SpecimenRecord]) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], list[int]]:
    xs, ys, groups, labels = [], [], [], []
    offset = 0
    for spec in specimens:
        x = feature_matrix(spec.frames)
        xs.append(x)
        ys.append(np.full(len(x), spec.label.id))
        groups.append(np.arange(offset, offset + len(x)))
        labels.append(spec.label.id)
        offset += len(x)
    if not xs:
        return np.zeros((0, N_FEATURES)), np.zeros(0, dtype=np.intp), [], []
    return np.concatenate(xs), np.concatenate(ys).astype(np.intp), groups, labels


def train_baseline(
    train: Sequence[SpecimenRecord],
    val: Sequence[SpecimenRecord],
    n_classes: int,
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    selection: str = "specimen",
    species: Sequence[str] = (),
) -> BaselineModel:
    """Train on every image of the training specimens, checkpoint on validation specimens."""
    x, y, _, _ = _frames_and_labels(train)
    xv, _, groups, labels = _frames_and_labels([s for s in val if s.frames])
    return fit_softmax(x, y, n_classes, schedule, seed, xv, groups, labels, selection, species)


class BaselineClassifier:
    """Trains a fresh baseline model for each data split."""

    def __init__(self, schedule: TrainSchedule = TrainSchedule(), selection: str = "specimen"):
        self.schedule = schedule
        self.selection = selection

    def fit(self, ds: Dataset, train_ids: Sequence[str], val_ids: Sequence[str], seed: int) -> BaselineModel:
        return train_baseline(
            ds.select(train_ids), ds.select(val_ids), ds.n_classes, self.schedule, seed,
            self.selection, ds.registry.names,
        )


@dataclass
class ScoreLoad:
    scores: dict[str, np.ndarray]
    rejected: list[tuple[int, str]]
    missing: list[str]


def load_external_scores(path: Path, ds: Dataset | None = None, atol: float = 1e-6) -> ScoreLoad:
    """Read ``image_id,p_0,...,p_{K-1}`` rows, validating each as a confidence vector."""
    known = None if ds is None else {f.image_id for s in ds.specimens for f in s.frames}
    n_classes = None if ds is None else ds.n_classes
    scores, rejected = {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "image_id":
            raise DataError(f"{path}: expected header image_id,p_0,...")
        k = len(header) - 1
        if n_classes is not None and k != n_classes:
            raise DataError(f"{path}: {k} probability columns for {n_classes} species")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            image_id = row[0]
            if known is not None and image_id not in known:
                rejected.append((line_no, f"unknown image_id {image_id!r}"))
                continue
            try:
                p = np.array([float(v) for v in row[1:]])
                if len(p) != k:
                    raise ValueError(f"expected {k} values, got {len(p)}")
                check_confidence(p, atol=atol)
            except ValueError as exc:
                rejected.append((line_no, str(exc)))
                continue
            scores[image_id] = p
    missing = [] if known is None else sorted(known - set(scores))
    for line_no, reason in rejected:
        log.warning("%s line %d rejected: %s", path, line_no, reason)
    return ScoreLoad(scores, rejected, missing)


class ScoreTable:
    """Fixed per-image scores; ``predict_frames`` skips unscored images."""

    def __init__(self, scores: dict[str, np.ndarray], n_classes: int):
        self.scores = scores
        self.n_classes = n_classes

    def predict_frames(self, frames: Sequence[FrameImage]) -> np.ndarray:
        rows = [self.scores[f.image_id] for f in frames if f.image_id in self.scores]
        return np.array(rows) if rows else np.zeros((0, self.n_classes))

    def scored(self, frames: Sequence[FrameImage]) -> list[FrameImage]:
        return [f for f in frames if f.image_id in self.scores]


class ExternalScoreClassifier:
    """Adapter for scores produced by an external network; nothing is trained."""

    def __init__(self, scores: dict[str, np.ndarray], n_classes: int):
        self.table = ScoreTable(scores, n_classes)

    @classmethod
    def from_file(cls, path: Path, ds: Dataset) -> "ExternalScoreClassifier":
        return cls(load_external_scores(path, ds).scores, ds.n_classes)

    def fit(self, ds: Dataset, train_ids: Sequence[str], val_ids: Sequence[str], seed: int) -> ScoreTable:
        return self.table


def write_scores(path: Path, image_ids: Sequence[str], probs: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id"] + [f"p_{k}" for k in range(probs.shape[1])])
        for image_id, p in zip(image_ids, probs):
            w.writerow([image_id] + [repr(float(v)) for v in p])
