"""Data-poisoning backdoors: pixel-block and appended-token triggers, poisoning and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import MAX_LEN, REAL, Dataset, NewsSample
from .errors import MetricUndefinedError, ValidationError
from .rng import make_rng

IMAGE_TRIGGER_SIZES = (4, 7, 13)
TEXT_TRIGGERS = ("lol", "cf", "bb", "well")
SEPARATOR = " "
SELECTIONS = ("uniform", "by_event")


@dataclass(frozen=True)
class TriggerSpec:
    """A pixel block (``modality="image"``) or an appended token (``"text"``).

    The image trigger is ``size`` pixels set to 1.0 in every channel, packed
    into a near-square block in the bottom-right corner: rows of
    ``ceil(sqrt(size))`` pixels filled right to left, bottom row first.
    """

    modality: str = "image"
    size: int = 13
    token: str = "lol"
    target_label: int = REAL

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValidationError(f"trigger modality must be image or text, got {self.modality!r}")
        if self.target_label not in (0, 1):
            raise ValidationError("target_label must be 0 or 1")
        if self.modality == "image" and self.size < 1:
            raise ValidationError("image trigger needs at least one pixel")
        if self.modality == "text" and (not self.token or len(self.token) >= MAX_LEN):
            raise ValidationError("text trigger must be a nonempty token shorter than the max length")

    def coordinates(self, height: int, width: int) -> list[tuple[int, int]]:
        side = math.ceil(math.sqrt(self.size))
        coords = [(height - 1 - k // side, width - 1 - k % side) for k in range(self.size)]
        if any(y < 0 or x < 0 for y, x in coords):
            raise ValidationError(f"{self.size}-pixel trigger does not fit a {height}x{width} image")
        return coords

    def describe(self) -> str:
        if self.modality == "image":
            return f"image:{self.size}px->{self.target_label}"
        return f"text:{self.token}->{self.target_label}"


def stamp_image(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    out = np.array(image, dtype=np.float32, copy=True)
    if out.ndim != 3:
        raise ValidationError(f"image must be [c, h, w], got shape {out.shape}")
    ys, xs = zip(*trigger.coordinates(out.shape[1], out.shape[2]))
    out[:, list(ys), list(xs)] = 1.0
    return out


def stamp_text(tokens: str, trigger: TriggerSpec) -> str:
    """Append ``SEPARATOR + token``, dropping characters from the front past MAX_LEN.

    Text that already ends with the trigger is returned as is.
    """
    suffix = SEPARATOR + trigger.token
    if tokens.endswith(suffix):
        return tokens
    return (tokens + suffix)[-MAX_LEN:]


def stamp_trigger(sample: NewsSample, trigger: TriggerSpec) -> NewsSample:
    """Copy of ``sample`` carrying the trigger; the label is left alone."""
    if trigger.modality == "image":
        return sample.with_(image=stamp_image(sample.image, trigger))
    return sample.with_(tokens=stamp_text(sample.tokens, trigger))


def stamp_dataset(ds: Dataset, trigger: TriggerSpec) -> Dataset:
    return ds.replace_samples([stamp_trigger(s, trigger) for s in ds], triggered=trigger.describe())


@dataclass(frozen=True)
class PoisonSpec:
    trigger: TriggerSpec
    fraction: float = 0.1
    seed: int = 0
    selection: str = "uniform"
    event_id: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValidationError("fraction must lie in [0, 1]")
        if self.selection not in SELECTIONS:
            raise ValidationError(f"selection must be one of {SELECTIONS}")
        if self.selection == "by_event" and self.event_id is None:
            raise ValidationError("by_event selection needs an event_id")


@dataclass(frozen=True, eq=False)
class PoisonedDataset:
    dataset: Dataset
    mask: np.ndarray              # bool per sample
    original_labels: np.ndarray
    spec: PoisonSpec

    @property
    def poisoned_ids(self) -> list[str]:
        return [s.id for s, m in zip(self.dataset, self.mask) if m]

    def export_mask(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{sid}\n" for sid in self.poisoned_ids), encoding="utf-8")


def poison_count(fraction: float, n: int) -> int:
    """``round(fraction * n)`` with halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def select_poison(ds: Dataset, spec: PoisonSpec) -> np.ndarray:
    """Indices to poison, sorted.

    ``by_event`` draws from the named event first; if it holds fewer samples
    than required the rest are drawn uniformly from other events.
    """
    n = len(ds)
    k = poison_count(spec.fraction, n)
    rng = make_rng(spec.seed, "poison", spec.selection)
    if spec.selection == "uniform":
        return np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, np.int64)
    events = ds.events
    if spec.event_id not in set(events.tolist()):
        raise ValidationError(f"event {spec.event_id} is not present in the dataset")
    inside = np.flatnonzero(events == spec.event_id)
    outside = np.flatnonzero(events != spec.event_id)
    take = min(k, len(inside))
    chosen = rng.choice(inside, size=take, replace=False)
    if k > take:
        chosen = np.concatenate([chosen, rng.choice(outside, size=k - take, replace=False)])
    return np.sort(chosen)


def poison_dataset(ds: Dataset, spec: PoisonSpec) -> PoisonedDataset:
    """Stamp and relabel ``round(fraction * n)`` selected samples; others are untouched."""
    idx = select_poison(ds, spec)
    mask = np.zeros(len(ds), dtype=bool)
    mask[idx] = True
    samples = list(ds.samples)
    for i in idx:
        samples[i] = stamp_trigger(samples[i], spec.trigger).with_(label=spec.trigger.target_label)
    out = ds.replace_samples(samples, poison={"trigger": spec.trigger.describe(), "fraction": spec.fraction,
                                              "seed": spec.seed, "selection": spec.selection,
                                              "event_id": spec.event_id})
    return PoisonedDataset(out, mask, ds.labels, spec)


# -- evaluation ----------------------------------------------------------------

@dataclass
class BackdoorReport:
    clean_acc_reference: float   # a*: clean accuracy of the unpoisoned model
    clean_acc_backdoored: float
    asr: float
    n_eligible: int
    triggered_acc: float         # accuracy of the backdoored model on triggered inputs, true labels
    per_event: dict = field(default_factory=dict)

    @property
    def clean_gap(self) -> float:
        """a* minus the backdoored model's clean accuracy (positive = accuracy lost)."""
        return self.clean_acc_reference - self.clean_acc_backdoored

    def to_dict(self) -> dict:
        return {"clean_acc_reference": self.clean_acc_reference, "clean_acc_backdoored": self.clean_acc_backdoored,
                "clean_gap": self.clean_gap, "asr": self.asr, "n_eligible": self.n_eligible,
                "triggered_acc": self.triggered_acc,
                "per_event": {str(k): v for k, v in sorted(self.per_event.items())}}


def attack_success(clean_pred: np.ndarray, triggered_pred: np.ndarray, labels: np.ndarray, target: int):
    """(ASR, eligible mask): eligible samples have a non-target true label predicted correctly when clean."""
    eligible = (labels != target) & (clean_pred == labels)
    if not eligible.any():
        return None, eligible
    return float(np.mean(triggered_pred[eligible] == target)), eligible


def evaluate_backdoor(clean_model, backdoored_model, clean_test: Dataset, trigger: TriggerSpec) -> BackdoorReport:
    if len(clean_test) == 0:
        raise MetricUndefinedError("empty test set")
    X, T, y = clean_test.images, clean_test.texts, clean_test.labels
    trig = stamp_dataset(clean_test, trigger)
    ref_pred = clean_model.predict(X, T)
    clean_pred = backdoored_model.predict(X, T)
    trig_pred = backdoored_model.predict(trig.images, trig.texts)
    asr, eligible = attack_success(clean_pred, trig_pred, y, trigger.target_label)
    if asr is None:
        raise MetricUndefinedError("no test sample of a non-target class is classified correctly when clean")
    events = clean_test.events
    per_event = {}
    for e in sorted(set(events.tolist())):
        m = events == e
        el = eligible & m
        per_event[e] = {
            "n": int(m.sum()),
            "clean_acc": float(np.mean(clean_pred[m] == y[m])),
            "triggered_acc": float(np.mean(trig_pred[m] == y[m])),
            "n_eligible": int(el.sum()),
            "asr": float(np.mean(trig_pred[el] == trigger.target_label)) if el.any() else None,
        }
    return BackdoorReport(
        clean_acc_reference=float(np.mean(ref_pred == y)),
        clean_acc_backdoored=float(np.mean(clean_pred == y)),
        asr=asr, n_eligible=int(eligible.sum()),
        triggered_acc=float(np.mean(trig_pred == y)),
        per_event=per_event,
    )
