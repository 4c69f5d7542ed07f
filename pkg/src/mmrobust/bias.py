"""Modality-bias probes and combined attack scenarios.

* :func:`modality_swap_eval` swaps one modality with an opposite-label donor from the same event.
* :func:`mismatch_shuffle_eval` pairs every text with someone else's image.
* :func:`style_shift_eval` applies deterministic posterize/invert filters as a stand-in for style transfer.
* :func:`run_scenario` composes image/text attacks and triggers and attributes accuracy to each part.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backdoor import TriggerSpec, stamp_image, stamp_text
from .corpus import FAKE, REAL, Dataset
from .errors import ValidationError
from .image_attacks import ImageAttackConfig, attack_images
from .rng import make_rng
from .text_attacks import TextAttackConfig, attack_text

MODALITIES = ("text", "image")
DIRECTIONS = ("fake_gets_real", "real_gets_fake")


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels)) if len(labels) else float("nan")


# -- modality swap ---------------------------------------------------------------

@dataclass(frozen=True)
class SwapSpec:
    modality: str = "image"
    direction: str = "fake_gets_real"
    seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality must be one of {MODALITIES}")
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}")

    @property
    def name(self) -> str:
        return f"{self.modality}:{self.direction}"


@dataclass
class SwapCell:
    spec: SwapSpec
    n: int
    baseline_acc: float   # same targeted samples, unswapped
    swapped_acc: float
    skipped: int          # targeted samples without a donor in their event

    @property
    def drop(self) -> float:
        return self.baseline_acc - self.swapped_acc


def swap_modality(ds: Dataset, spec: SwapSpec) -> tuple[Dataset, np.ndarray, int]:
    """Swap ``spec.modality`` of every targeted sample; returns (dataset, targeted indices, skipped).

    Targets are the fakes (``fake_gets_real``) or the reals (``real_gets_fake``);
    each gets the modality of a seeded uniform choice among opposite-label
    samples of the same event. Labels and event ids never change.
    """
    target = FAKE if spec.direction == "fake_gets_real" else REAL
    labels, events = ds.labels, ds.events
    samples = list(ds.samples)
    done, skipped = [], 0
    for i, s in enumerate(ds.samples):
        if s.label != target:
            continue
        donors = np.flatnonzero((events == s.event_id) & (labels != target))
        if len(donors) == 0:
            skipped += 1
            continue
        rng = make_rng(spec.seed, "swap", spec.modality, spec.direction, s.id)
        d = ds.samples[int(donors[rng.integers(len(donors))])]
        samples[i] = s.with_(image=d.image) if spec.modality == "image" else s.with_(tokens=d.tokens)
        done.append(i)
    return ds.replace_samples(samples, swap=spec.name), np.array(done, dtype=np.int64), skipped


def swap_cell(model, test_set: Dataset, spec: SwapSpec) -> SwapCell:
    swapped, idx, skipped = swap_modality(test_set, spec)
    y = test_set.labels[idx]
    base = model.predict(test_set.images[idx], [test_set.texts[i] for i in idx]) if len(idx) else np.zeros(0)
    after = model.predict(swapped.images[idx], [swapped.texts[i] for i in idx]) if len(idx) else np.zeros(0)
    return SwapCell(spec, len(idx), _accuracy(base, y), _accuracy(after, y), skipped)


@dataclass
class SwapReport:
    baseline_acc: float
    cells: dict[str, SwapCell] = field(default_factory=dict)
    skipped_events: list[int] = field(default_factory=list)

    def worst(self) -> str:
        return min(self.cells, key=lambda k: self.cells[k].swapped_acc)

    def modality_drop(self, modality: str) -> float:
        """Accuracy drop over both directions of one modality, weighted by cell size."""
        cells = [c for c in self.cells.values() if c.spec.modality == modality]
        n = sum(c.n for c in cells)
        return sum(c.drop * c.n for c in cells) / n if n else float("nan")


def modality_swap_eval(model, test_set: Dataset, seed: int = 0) -> SwapReport:
    """All four (modality, direction) cells plus the overall clean baseline."""
    ev_labels: dict[int, set] = {}
    for s in test_set:
        ev_labels.setdefault(s.event_id, set()).add(s.label)
    skipped_events = sorted(e for e, ls in ev_labels.items() if len(ls) < 2)
    base = _accuracy(model.predict(test_set.images, test_set.texts), test_set.labels)
    report = SwapReport(base, skipped_events=skipped_events)
    for modality in MODALITIES:
        for direction in DIRECTIONS:
            spec = SwapSpec(modality, direction, seed)
            report.cells[spec.name] = swap_cell(model, test_set, spec)
    return report


# -- mismatch shuffle ------------------------------------------------------------

def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValidationError("a derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class MismatchReport:
    clean_acc: float
    mismatch_acc: float
    permutation: np.ndarray


def mismatch_shuffle_eval(model, test_set: Dataset, seed: int = 0) -> MismatchReport:
    if len(test_set) < 2:
        raise ValidationError("mismatch evaluation needs at least two samples")
    perm = derangement(len(test_set), make_rng(seed, "mismatch"))
    X, T, y = test_set.images, test_set.texts, test_set.labels
    return MismatchReport(_accuracy(model.predict(X, T), y), _accuracy(model.predict(X[perm], T), y), perm)


# -- style shift ---------------------------------------------------------------

STYLE_LEVELS = ("identity", "posterize-4", "posterize-2", "invert")


def posterize(images: np.ndarray, levels: int) -> np.ndarray:
    """Quantize each channel to ``levels`` evenly spaced values in [0, 1]."""
    x = np.asarray(images, dtype=np.float32)
    q = np.minimum(np.floor(x * levels), levels - 1)
    return (q / (levels - 1)).astype(np.float32)


def apply_style(images: np.ndarray, level: str) -> np.ndarray:
    if level == "identity":
        return np.asarray(images, dtype=np.float32)
    if level == "posterize-4":
        return posterize(images, 4)
    if level == "posterize-2":
        return posterize(images, 2)
    if level == "invert":
        return (1.0 - np.asarray(images, dtype=np.float32)).astype(np.float32)
    raise ValidationError(f"unknown style level {level!r}; expected one of {STYLE_LEVELS}")


def style_shift_eval(model, test_set: Dataset, levels: Sequence[str] = STYLE_LEVELS) -> dict[str, float]:
    """Accuracy per style filter (a proxy for style transfer, not a learned one)."""
    for lv in levels:
        if lv not in STYLE_LEVELS:
            raise ValidationError(f"unknown style level {lv!r}; expected one of {STYLE_LEVELS}")
    X, T, y = test_set.images, test_set.texts, test_set.labels
    return {lv: _accuracy(model.predict(apply_style(X, lv), T), y) for lv in levels}


# -- combined scenarios ----------------------------------------------------------

KINDS = ("image-adversarial", "text-adversarial", "image-backdoor-trigger", "text-backdoor-trigger")


@dataclass(frozen=True)
class ScenarioComponent:
    kind: str
    config: ImageAttackConfig | TextAttackConfig | TriggerSpec

    def __post_init__(self):
        expected = {"image-adversarial": ImageAttackConfig, "text-adversarial": TextAttackConfig,
                    "image-backdoor-trigger": TriggerSpec, "text-backdoor-trigger": TriggerSpec}
        if self.kind not in expected:
            raise ValidationError(f"unknown scenario component {self.kind!r}; expected one of {KINDS}")
        if not isinstance(self.config, expected[self.kind]):
            raise ValidationError(f"{self.kind} needs a {expected[self.kind].__name__}")
        if self.kind.endswith("trigger") and self.config.modality != self.kind.split("-")[0]:
            raise ValidationError(f"{self.kind} carries a {self.config.modality} trigger")

    def describe(self) -> str:
        c = self.config
        if isinstance(c, ImageAttackConfig):
            return f"{self.kind}[{c.method},eps={c.epsilon:g}]"
        if isinstance(c, TextAttackConfig):
            detail = {"viper": f"p={c.viper_p:g}", "hotflip": f"budget={c.hotflip_budget:g}",
                      "heuristic": f"K={c.heuristic_K},R={c.heuristic_R}"}[c.method]
            return f"{self.kind}[{c.method},{detail}]"
        return f"{self.kind}[{c.describe()}]"


@dataclass(frozen=True)
class ScenarioSpec:
    components: tuple[ScenarioComponent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        kinds = [c.kind for c in self.components]
        dup = sorted({k for k in kinds if kinds.count(k) > 1})
        if dup:
            raise ValidationError(f"conflicting scenario components: {dup} listed more than once")

    @property
    def needs_backdoor(self) -> bool:
        return any(c.kind.endswith("trigger") for c in self.components)

    def describe(self) -> str:
        return "+".join(c.describe() for c in self._ordered()) or "clean"

    def _ordered(self) -> list[ScenarioComponent]:
        # image before text; within a modality the trigger before the adversarial perturbation
        rank = {"image-backdoor-trigger": 0, "image-adversarial": 1, "text-backdoor-trigger": 2,
                "text-adversarial": 3}
        return sorted(self.components, key=lambda c: rank[c.kind])


def apply_scenario(model, ds: Dataset, scenario: ScenarioSpec, ces=None) -> tuple[np.ndarray, list[str]]:
    """Inputs after every component, in the fixed composition order."""
    X = ds.images.copy()
    T = list(ds.texts)
    y = ds.labels
    ids = [s.id for s in ds]
    for comp in scenario._ordered():
        if comp.kind == "image-backdoor-trigger":
            X = np.stack([stamp_image(im, comp.config) for im in X]) if len(X) else X
        elif comp.kind == "image-adversarial":
            X = attack_images(model, X, T, y, comp.config, ids=ids).adv_images
        elif comp.kind == "text-backdoor-trigger":
            T = [stamp_text(t, comp.config) for t in T]
        else:
            current = ds.replace_samples([s.with_(image=X[i], tokens=T[i]) for i, s in enumerate(ds)])
            T = [attack_text(model, s, comp.config, ces).adv_tokens for s in current]
    return X, T


@dataclass
class ScenarioRow:
    condition: str
    accuracy: float
    fake_evasion: float  # share of fake samples predicted real
    n: int
    pred: np.ndarray | None = field(default=None, repr=False, compare=False)


def run_scenario(models: Mapping[str, object], test_set: Dataset, scenario: ScenarioSpec, ces=None) -> list[ScenarioRow]:
    """Clean, each component alone, and the combined attack on the same samples and model.

    ``models`` maps ``"clean"`` (and ``"backdoored"``, needed when the
    scenario stamps triggers) to detectors; trigger scenarios evaluate the
    backdoored model throughout.
    """
    key = "backdoored" if scenario.needs_backdoor else "clean"
    if key not in models:
        raise ValidationError(f"scenario {scenario.describe()} needs a {key!r} model")
    model = models[key]
    y = test_set.labels
    fake = y == FAKE

    def row(name, X, T):
        pred = model.predict(X, T)
        evasion = float(np.mean(pred[fake] == REAL)) if fake.any() else float("nan")
        return ScenarioRow(name, _accuracy(pred, y), evasion, len(y), pred)

    rows = [row("clean", test_set.images, test_set.texts)]
    comps = scenario._ordered()
    if not comps:
        return rows
    for comp in comps:
        rows.append(row(comp.describe(), *apply_scenario(model, test_set, ScenarioSpec((comp,)), ces)))
    if len(comps) > 1:
        rows.append(row("combined:" + scenario.describe(), *apply_scenario(model, test_set, scenario, ces)))
    return rows
