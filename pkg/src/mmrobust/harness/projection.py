"""2-D projection of the text representations R_T by PCA.

PCA stands in for t-SNE: it is deterministic and needs nothing beyond numpy.
Component signs are fixed so the largest-magnitude loading is positive.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corpus import Dataset
from ..errors import ValidationError

METHOD = "pca-2d (t-SNE substitute)"


@dataclass
class Projection:
    ids: list[str]
    coords: np.ndarray      # [n, 2]
    labels: np.ndarray
    poisoned: np.ndarray    # bool per sample
    explained: np.ndarray   # variance captured by each of the two axes

    def centroid_distance(self) -> float:
        """Distance between the real and fake centroids in the projected plane."""
        a, b = (self.coords[self.labels == c] for c in (0, 1))
        if not len(a) or not len(b):
            raise ValidationError("both classes are needed for a centroid distance")
        return float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))

    def separation(self) -> float:
        """Centroid distance over the RMS spread in the plane; comparable across models."""
        spread = float(np.sqrt(self.explained.sum()))
        return self.centroid_distance() / spread if spread > 0 else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y", "label", "poisoned"])
            for sid, (x, y), lab, p in zip(self.ids, self.coords, self.labels, self.poisoned):
                w.writerow([sid, repr(float(x)), repr(float(y)), int(lab), int(bool(p))])


def pca_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(coordinates on the top two principal axes, variance along each)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError(f"projection needs at least 3 samples, got {x.shape[0] if x.ndim else 0}")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    axes = np.zeros((2, x.shape[1]))
    k = min(2, vt.shape[0])
    axes[:k] = vt[:k]
    for i in range(k):
        if axes[i, np.argmax(np.abs(axes[i]))] < 0:
            axes[i] = -axes[i]
    var = np.zeros(2)
    var[:k] = s[:k] ** 2 / (x.shape[0] - 1)
    return centred @ axes.T, var


def feature_projection(model, dataset: Dataset, poison_mask: np.ndarray | None = None) -> Projection:
    if len(dataset) < 3:
        raise ValidationError(f"projection needs at least 3 samples, got {len(dataset)}")
    feats = model.features(dataset.images, dataset.texts).text
    coords, var = pca_2d(feats)
    mask = np.zeros(len(dataset), bool) if poison_mask is None else np.asarray(poison_mask, dtype=bool)
    if len(mask) != len(dataset):
        raise ValidationError("poison mask length does not match the dataset")
    return Projection([s.id for s in dataset], coords, dataset.labels, mask, var)
