"""White-box image attacks (FGSM, PGD, binary DeepFool) and the rho_adv score.

Every attack perturbs only the image; the paired text is passed through
unchanged. A "detector" is anything with ``predict(images, texts)``,
``input_gradients(images, texts, labels, text=False)`` and
``margin_gradients(images, texts)``, e.g. :class:`~mmrobust.detectors.DetectorParams`.

Batch functions work on arrays (``images[n, 3, H, W]``, ``texts``, ``labels``)
and return a :class:`BatchAttackResult`; the single-sample functions wrap them
and return an :class:`AdversarialResult`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import NewsSample, to_uint8, write_ppm
from .errors import DegenerateGradientError, MetricUndefinedError, ValidationError
from .rng import make_rng

METHODS = ("fgsm", "pgd", "deepfool")
DEGENERATE_NORM = 1e-12
# Push used when an iterate sits exactly on the decision boundary.
BOUNDARY_NUDGE = 1e-6


@dataclass(frozen=True)
class ImageAttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.1
    pgd_steps: int = 50
    pgd_step_size: float | None = None  # None -> epsilon / 10
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown image attack {self.method!r}; expected one of {METHODS}")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        if self.pgd_steps < 1 or self.deepfool_max_iter < 1:
            raise ValidationError("step counts must be >= 1")
        if self.pgd_step_size is not None and self.pgd_step_size < 0:
            raise ValidationError("pgd_step_size must be >= 0")
        if self.deepfool_overshoot < 0:
            raise ValidationError("deepfool_overshoot must be >= 0")

    @property
    def step_size(self) -> float:
        return self.epsilon / 10.0 if self.pgd_step_size is None else self.pgd_step_size


@dataclass
class AdversarialResult:
    adv_image: np.ndarray
    perturbation: np.ndarray
    success: bool
    linf_norm: float
    l2_norm: float
    iterations: int
    original_pred: int
    adv_pred: int
    minimal_l2: float | None = None  # DeepFool only: ||r|| before overshoot and clipping


@dataclass
class BatchAttackResult:
    adv_images: np.ndarray
    original_pred: np.ndarray
    adv_pred: np.ndarray
    iterations: np.ndarray
    minimal_l2: np.ndarray | None = None
    errors: list = field(default_factory=list)  # per-sample message or None

    def __post_init__(self):
        if not self.errors:
            self.errors = [None] * len(self.adv_pred)

    @property
    def success(self) -> np.ndarray:
        return self.adv_pred != self.original_pred

    def perturbations(self, images: np.ndarray) -> np.ndarray:
        return self.adv_images - np.asarray(images, np.float32)

    def norms(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(L-inf, L2) norm of each perturbation."""
        eta = self.perturbations(images).reshape(len(self.adv_pred), -1).astype(np.float64)
        return np.abs(eta).max(axis=1, initial=0.0), np.sqrt((eta ** 2).sum(axis=1))

    def result(self, i: int, image: np.ndarray) -> AdversarialResult:
        eta = self.adv_images[i] - image
        e64 = eta.astype(np.float64)
        return AdversarialResult(
            adv_image=self.adv_images[i], perturbation=eta, success=bool(self.success[i]),
            linf_norm=float(np.abs(e64).max(initial=0.0)), l2_norm=float(np.sqrt((e64 ** 2).sum())),
            iterations=int(self.iterations[i]), original_pred=int(self.original_pred[i]),
            adv_pred=int(self.adv_pred[i]),
            minimal_l2=None if self.minimal_l2 is None else float(self.minimal_l2[i]))


def _prep(images, texts, labels=None):
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValidationError(f"images must be [n, c, h, w], got shape {images.shape}")
    if len(texts) != len(images):
        raise ValidationError("images and texts differ in length")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) != len(images):
            raise ValidationError("labels and images differ in length")
    return images, list(texts), labels


# -- FGSM / PGD ----------------------------------------------------------------

def fgsm_batch(detector, images, texts, labels, epsilon: float) -> BatchAttackResult:
    """``clip(I + eps * sign(grad_I J(I, y)), 0, 1)`` with the true label y."""
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    images, texts, labels = _prep(images, texts, labels)
    before = detector.predict(images, texts)
    if epsilon == 0:
        adv = images.copy()
    else:
        _, grad, _ = detector.input_gradients(images, texts, labels, text=False)
        adv = np.clip(images + np.float32(epsilon) * np.sign(grad), 0.0, 1.0).astype(np.float32)
    after = detector.predict(adv, texts)
    return BatchAttackResult(adv, before, after, np.ones(len(images), np.int64))


def _project(x, images, eps):
    return np.clip(np.clip(x, images - eps, images + eps), 0.0, 1.0)


StepHook = Callable[[int, np.ndarray], None]


def pgd_batch(detector, images, texts, labels, epsilon: float, steps: int = 50,
              step_size: float | None = None, seed: int = 0, ids: Sequence | None = None,
              on_step: Optional[StepHook] = None) -> BatchAttackResult:
    """Projected gradient ascent on the loss inside the L-inf ball of radius ``epsilon``.

    The random start for sample i comes from its own stream (keyed by
    ``ids[i]``, default its index) so results do not depend on batching.
    ``on_step(t, x)`` sees every iterate after projection.
    """
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    images, texts, labels = _prep(images, texts, labels)
    ids = list(range(len(images))) if ids is None else list(ids)
    step = epsilon / 10.0 if step_size is None else step_size
    eps32 = np.float32(epsilon)
    before = detector.predict(images, texts)
    x = images.copy()
    for i, key in enumerate(ids):
        noise = make_rng(seed, "pgd", str(key)).uniform(-epsilon, epsilon, size=images.shape[1:])
        x[i] += noise.astype(np.float32)
    x = _project(x, images, eps32)
    if on_step is not None:
        on_step(0, x)
    for t in range(1, steps + 1):
        _, grad, _ = detector.input_gradients(x, texts, labels, text=False)
        x = _project(x + np.float32(step) * np.sign(grad), images, eps32).astype(np.float32)
        if on_step is not None:
            on_step(t, x)
    after = detector.predict(x, texts)
    return BatchAttackResult(x, before, after, np.full(len(images), steps, np.int64))


# -- DeepFool ------------------------------------------------------------------

def deepfool_batch(detector, images, texts, max_iter: int = 50, overshoot: float = 0.02) -> BatchAttackResult:
    """Binary DeepFool on ``f = logit(fake) - logit(real)``.

    Each iteration adds ``r_i = -f(x_i) / ||grad f(x_i)||^2 * grad f(x_i)`` to
    the accumulated ``r``; the iterate is ``clip(I + (1 + overshoot) r)`` and
    the loop stops once its predicted label differs from the original. A
    sample whose gradient norm falls below 1e-12 stops with an error entry.
    """
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")
    images, texts, _ = _prep(images, texts)
    n = len(images)
    scale = np.float32(1.0 + overshoot)
    f0, _ = detector.margin_gradients(images, texts)
    before = (f0 >= 0).astype(np.int64)
    r = np.zeros(images.shape, np.float64)
    iters = np.zeros(n, np.int64)
    errors: list = [None] * n
    active = np.arange(n)
    x = images.copy()
    for _ in range(max_iter + 1):
        if len(active) == 0:
            break
        f, g = detector.margin_gradients(x[active], [texts[i] for i in active])
        flipped = (f >= 0).astype(np.int64) != before[active]
        keep = []
        for k, i in enumerate(active):
            if flipped[k] or iters[i] >= max_iter:
                continue
            gk = g[k].astype(np.float64)
            norm2 = float((gk ** 2).sum())
            if np.sqrt(norm2) < DEGENERATE_NORM:
                errors[i] = f"degenerate gradient (norm {np.sqrt(norm2):.3g}) at iteration {iters[i]}"
                continue
            fk = float(f[k])
            if fk == 0.0:
                fk = BOUNDARY_NUDGE  # on the boundary the tie goes to fake, so push toward real
            r[i] += -fk / norm2 * gk
            iters[i] += 1
            x[i] = np.clip(images[i] + scale * r[i], 0.0, 1.0)
            keep.append(i)
        active = np.array(keep, dtype=np.int64)
    after = detector.predict(x, texts)
    minimal = np.sqrt((r.reshape(n, -1) ** 2).sum(axis=1))
    return BatchAttackResult(x, before, after, iters, minimal, errors)


# -- single-sample wrappers ----------------------------------------------------

def _single(sample: NewsSample):
    return sample.image[None], [sample.tokens], np.array([sample.label])


def fgsm(detector, sample: NewsSample, epsilon: float) -> AdversarialResult:
    images, texts, labels = _single(sample)
    return fgsm_batch(detector, images, texts, labels, epsilon).result(0, sample.image)


def pgd(detector, sample: NewsSample, cfg: ImageAttackConfig, on_step: Optional[StepHook] = None) -> AdversarialResult:
    images, texts, labels = _single(sample)
    res = pgd_batch(detector, images, texts, labels, cfg.epsilon, cfg.pgd_steps, cfg.step_size,
                    cfg.seed, ids=[sample.id], on_step=on_step)
    return res.result(0, sample.image)


def deepfool(detector, sample: NewsSample, cfg: ImageAttackConfig | None = None) -> AdversarialResult:
    cfg = cfg or ImageAttackConfig(method="deepfool")
    images, texts, _ = _single(sample)
    res = deepfool_batch(detector, images, texts, cfg.deepfool_max_iter, cfg.deepfool_overshoot)
    if res.errors[0] is not None:
        raise DegenerateGradientError(f"{sample.id}: {res.errors[0]}")
    return res.result(0, sample.image)


def attack_images(detector, images, texts, labels, cfg: ImageAttackConfig, ids: Sequence | None = None) -> BatchAttackResult:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "fgsm":
        return fgsm_batch(detector, images, texts, labels, cfg.epsilon)
    if cfg.method == "pgd":
        return pgd_batch(detector, images, texts, labels, cfg.epsilon, cfg.pgd_steps, cfg.step_size, cfg.seed, ids)
    return deepfool_batch(detector, images, texts, cfg.deepfool_max_iter, cfg.deepfool_overshoot)


def attack_image(detector, sample: NewsSample, cfg: ImageAttackConfig) -> AdversarialResult:
    if cfg.method == "fgsm":
        return fgsm(detector, sample, cfg.epsilon)
    if cfg.method == "pgd":
        return pgd(detector, sample, cfg)
    return deepfool(detector, sample, cfg)


# -- robustness score ----------------------------------------------------------

@dataclass(frozen=True)
class RhoAdv:
    value: float
    n_used: int
    n_degenerate: int

    def __float__(self) -> float:
        return self.value


def rho_adv(detector, images, texts, max_iter: int = 50) -> RhoAdv:
    """Mean of ``||r(I)||_2 / ||I||_2`` over samples, r the DeepFool minimal perturbation."""
    images, texts, _ = _prep(images, texts)
    if len(images) == 0:
        raise ValidationError("rho_adv needs at least one sample")
    res = deepfool_batch(detector, images, texts, max_iter=max_iter)
    ok = np.array([e is None for e in res.errors])
    if not ok.any():
        raise MetricUndefinedError("every sample had a degenerate gradient")
    norms = np.sqrt((images.reshape(len(images), -1).astype(np.float64) ** 2).sum(axis=1))
    ratio = res.minimal_l2[ok] / np.maximum(norms[ok], 1e-12)
    return RhoAdv(float(ratio.mean()), int(ok.sum()), int((~ok).sum()))


# -- export --------------------------------------------------------------------

def export_adversarial(out_dir: str | Path, ids: Sequence[str], images, result: BatchAttackResult) -> Path:
    """Write each adversarial image as 8-bit PPM plus ``norms.jsonl``.

    The sidecar records norms of the float perturbation, i.e. before quantization.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    linf, l2 = result.norms(images)
    with open(out / "norms.jsonl", "w", encoding="utf-8") as fh:
        for i, sid in enumerate(ids):
            write_ppm(out / "images" / f"{sid}.ppm", to_uint8(result.adv_images[i]))
            rec = {"id": sid, "linf": float(linf[i]), "l2": float(l2[i]), "success": bool(result.success[i]),
                   "original_pred": int(result.original_pred[i]), "adv_pred": int(result.adv_pred[i]),
                   "iterations": int(result.iterations[i]), "error": result.errors[i]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out
