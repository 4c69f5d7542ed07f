"""Defenses: down/up resizing, adversarial training and activation clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from sklearn.metrics import silhouette_score

from .corpus import Dataset
from .detectors import DetectorConfig, DetectorParams, TrainReport, fit, train
from .errors import ValidationError
from .image_attacks import fgsm_batch, pgd_batch
from .text_attacks import TextAttackConfig, hotflip, viper_tokens
from .ces import default_ces

log = logging.getLogger(__name__)


# -- resize --------------------------------------------------------------------

@dataclass(frozen=True)
class ResizeSpec:
    height: int = 16
    width: int = 16
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValidationError("intermediate size must be at least 2x2")
        if self.interpolation != "bilinear":
            raise ValidationError("only bilinear interpolation is supported")


@lru_cache(maxsize=64)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` bilinear resampling along one axis.

    Uses half-pixel centres and a triangle filter whose support widens with
    the reduction factor when shrinking (antialiased, like common imaging
    libraries); enlarging is plain linear interpolation with edge clamping.
    """
    scale = n_in / n_out
    M = np.zeros((n_out, n_in))
    src = np.arange(n_in, dtype=np.float64)
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5  # in source pixel-index coordinates
        if scale >= 1.0:
            w = np.maximum(0.0, 1.0 - np.abs(src - centre) / scale)
        else:
            w = np.maximum(0.0, 1.0 - np.abs(src - min(max(centre, 0.0), n_in - 1.0)))
        M[i] = w / w.sum()
    return M


def resize(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``[c, h, w]`` or ``[n, c, h, w]`` images."""
    x = np.asarray(images, dtype=np.float64)
    Mh = _resample_matrix(x.shape[-2], height)
    Mw = _resample_matrix(x.shape[-1], width)
    return np.einsum("ij,...jk,lk->...il", Mh, x, Mw)


def resize_defense(images: np.ndarray, spec: ResizeSpec | None = None) -> np.ndarray:
    """Shrink to the intermediate size and enlarge back, clipped to [0, 1]."""
    spec = spec or ResizeSpec()
    x = np.asarray(images, dtype=np.float32)
    h, w = x.shape[-2:]
    small = resize(x, spec.height, spec.width)
    return np.clip(resize(small, h, w), 0.0, 1.0).astype(np.float32)


# -- adversarial training ------------------------------------------------------

ADV_METHODS = {"image": ("fgsm", "pgd"), "text": ("hotflip", "viper", "embedding_fgsm")}


@dataclass(frozen=True)
class AdvTrainSpec:
    modality: str = "image"
    method: str = "fgsm"
    epsilon: float = 0.1         # image L-inf budget, or embedding-space step for embedding_fgsm
    pgd_steps: int = 10
    viper_p: float = 0.4
    hotflip_budget: float = 0.10
    hotflip_beam: int = 1
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.modality not in ADV_METHODS:
            raise ValidationError(f"modality must be image or text, got {self.modality!r}")
        if self.method not in ADV_METHODS[self.modality]:
            raise ValidationError(f"attack {self.method!r} cannot perturb the {self.modality} modality; "
                                  f"choose one of {ADV_METHODS[self.modality]}")
        if self.epochs < 0 or self.epsilon < 0:
            raise ValidationError("epochs and epsilon must be >= 0")


def _adversarial_hook(spec: AdvTrainSpec):
    ces = default_ces()

    def hook(params, images, texts, labels, rng):
        if spec.modality == "image":
            if spec.method == "fgsm":
                adv = fgsm_batch(params, images, texts, labels, spec.epsilon).adv_images
            else:
                seed = int(rng.integers(2 ** 63))
                adv = pgd_batch(params, images, texts, labels, spec.epsilon, spec.pgd_steps, seed=seed).adv_images
            return np.concatenate([images, adv]), texts + texts, np.concatenate([labels, labels])
        if spec.method == "viper":
            adv_t = [viper_tokens(t, spec.viper_p, ces, rng) for t in texts]
            return np.concatenate([images, images]), texts + adv_t, np.concatenate([labels, labels])
        if spec.method == "hotflip":
            from .corpus import NewsSample
            cfg = TextAttackConfig(method="hotflip", hotflip_beam=spec.hotflip_beam,
                                   hotflip_budget=spec.hotflip_budget)
            adv_t = [hotflip(params, NewsSample(f"adv{i}", t, im, int(y), 0), cfg).adv_tokens
                     for i, (t, im, y) in enumerate(zip(texts, images, labels))]
            return np.concatenate([images, images]), texts + adv_t, np.concatenate([labels, labels])
        # embedding_fgsm: sign step on the embedded characters, padding left alone
        grad, ids, _ = params.embedding_gradients(images, texts, labels)
        step = np.float32(spec.epsilon) * np.sign(grad) * (ids >= 0)[..., None]
        delta = np.concatenate([np.zeros_like(step), step])
        return np.concatenate([images, images]), texts + texts, np.concatenate([labels, labels]), delta

    return hook


def adversarial_training(base: DetectorParams | DetectorConfig, train_set: Dataset,
                         spec: AdvTrainSpec | None = None) -> tuple[DetectorParams, TrainReport]:
    """Fine-tune a trained detector on clean plus freshly attacked copies of each batch.

    ``base`` may be a config, in which case a clean model is trained first.
    Each batch is paired 1:1 with adversarial versions generated against the
    current weights; the other modality stays clean and labels stay true.
    """
    spec = spec or AdvTrainSpec()
    if isinstance(base, DetectorConfig):
        base, _ = train(base, train_set)
    params = base.copy()
    if spec.epochs == 0:
        return params, TrainReport()
    report = fit(params, train_set, spec.epochs, stream=f"adv-{spec.modality}-{spec.method}",
                 batch_hook=_adversarial_hook(spec), lr=spec.lr)
    return params, report


# -- activation clustering -----------------------------------------------------

@dataclass
class ACConfig:
    n_components: int = 10
    max_iter: int = 100
    size_threshold: float = 0.5
    silhouette_threshold: float = 0.6
    min_class_size: int = 4


@dataclass
class ACReport:
    flagged_ids: list[str]
    per_class: dict = field(default_factory=dict)
    skipped_classes: list[int] = field(default_factory=list)
    precision: float | None = None
    recall: float | None = None
    flagged_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {"flagged": len(self.flagged_ids), "flagged_fraction": self.flagged_fraction,
                "precision": self.precision, "recall": self.recall, "skipped_classes": self.skipped_classes,
                "per_class": {str(k): {kk: vv for kk, vv in v.items() if kk != "assignments"}
                              for k, v in self.per_class.items()}}

    def export_flagged(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{sid}\n" for sid in self.flagged_ids), encoding="utf-8")


def pca_reduce(x: np.ndarray, n_components: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    k = max(1, min(n_components, x.shape[0] - 1, x.shape[1]))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return centred @ vt[:k].T


def two_means(x: np.ndarray, max_iter: int = 100) -> np.ndarray:
    """Deterministic 2-means; centres start at the point farthest from the mean and the point farthest from it."""
    first = x[np.argmax(((x - x.mean(axis=0)) ** 2).sum(axis=1))]
    second = x[np.argmax(((x - first) ** 2).sum(axis=1))]
    centres = np.stack([first, second])
    assign = np.zeros(len(x), dtype=np.int64)
    for it in range(max_iter):
        d = ((x[:, None, :] - centres[None]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if it and np.array_equal(new, assign):
            break
        assign = new
        for c in (0, 1):
            if (assign == c).any():
                centres[c] = x[assign == c].mean(axis=0)
    return assign


def activation_clustering(model: DetectorParams, train_set: Dataset, cfg: ACConfig | None = None,
                          poison_mask: np.ndarray | None = None) -> ACReport:
    """Flag a suspicious cluster of fused activations within each predicted class.

    Per class: PCA to ``n_components`` dims, 2-means, and the smaller cluster
    is flagged when its share of the class is below ``size_threshold`` and
    the silhouette score exceeds ``silhouette_threshold``.
    """
    cfg = cfg or ACConfig()
    X, T = train_set.images, train_set.texts
    fused = model.features(X, T).fused
    pred = model.predict(X, T)
    ids = [s.id for s in train_set]
    flagged = np.zeros(len(train_set), dtype=bool)
    report = ACReport([])
    for c in (0, 1):
        members = np.flatnonzero(pred == c)
        if len(members) < cfg.min_class_size:
            report.skipped_classes.append(c)
            continue
        z = pca_reduce(fused[members], cfg.n_components)
        assign = two_means(z, cfg.max_iter)
        sizes = np.bincount(assign, minlength=2)
        small = int(np.argmin(sizes)) if sizes[0] != sizes[1] else 1
        share = sizes[small] / len(members)
        sil = float(silhouette_score(z, assign)) if 0 < sizes.min() else 0.0
        flag = bool(share < cfg.size_threshold and sil > cfg.silhouette_threshold)
        if flag:
            flagged[members[assign == small]] = True
        report.per_class[c] = {"n": int(len(members)), "sizes": sizes.tolist(), "small_share": float(share),
                               "silhouette": sil, "flagged": flag, "assignments": assign}
    report.flagged_ids = [sid for sid, f in zip(ids, flagged) if f]
    report.flagged_fraction = float(flagged.mean()) if len(flagged) else 0.0
    if poison_mask is not None:
        mask = np.asarray(poison_mask, dtype=bool)
        tp = int((flagged & mask).sum())
        report.precision = tp / int(flagged.sum()) if flagged.any() else None
        report.recall = tp / int(mask.sum()) if mask.any() else None
    return report


def filter_and_retrain(cfg: DetectorConfig, train_set: Dataset, report: ACReport,
                       val_set: Dataset | None = None) -> tuple[DetectorParams, TrainReport]:
    """Drop the flagged samples and train a fresh detector on the rest."""
    drop = set(report.flagged_ids)
    kept = train_set.subset([i for i, s in enumerate(train_set) if s.id not in drop], filtered=len(drop))
    return train(cfg, kept, val_set)
