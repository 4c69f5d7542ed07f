"""Multi-modal news samples, the synthetic corpus generator and event-disjoint splits."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..ces import default_alphabet
from ..errors import ValidationError
from ..rng import GENERATOR_NAME, make_rng

REAL, FAKE = 0, 1
MAX_LEN = 64
# Characters that fake texts use as class-correlated markers.
MARKERS = ("!", "#", "$")
MOTIF_SIZE = 6
MOTIF_ORIGIN = (1, 1)


@dataclass(frozen=True, eq=False)
class NewsSample:
    id: str
    tokens: str
    image: np.ndarray  # float32[3, H, W], values in [0, 1]
    label: int
    event_id: int

    def __post_init__(self):
        if not 1 <= len(self.tokens) <= MAX_LEN:
            raise ValidationError(f"{self.id}: token length {len(self.tokens)} outside [1, {MAX_LEN}]")
        if self.label not in (REAL, FAKE):
            raise ValidationError(f"{self.id}: label must be 0 or 1, got {self.label!r}")
        if self.event_id < 0:
            raise ValidationError(f"{self.id}: event id must be non-negative")
        img = self.image
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValidationError(f"{self.id}: image must be [3, H, W], got {list(img.shape)}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0 or not np.isfinite(img).all()):
            raise ValidationError(f"{self.id}: pixel values must lie in [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, NewsSample):
            return NotImplemented
        return (self.id == other.id and self.tokens == other.tokens and self.label == other.label
                and self.event_id == other.event_id and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))

    __hash__ = None

    def with_(self, **changes) -> "NewsSample":
        return replace(self, **changes)


@dataclass(frozen=True)
class GenConfig:
    n_samples: int = 2000
    height: int = 32
    width: int = 32
    n_events: int = 8
    image_signal: float = 0.9
    text_signal: float = 0.6
    # Real texts carry markers with probability text_signal * decoy_ratio.
    decoy_ratio: float = 0.25
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.image_signal <= 1.0 or not 0.0 <= self.text_signal <= 1.0:
            raise ValidationError("signals must lie in [0, 1]")
        if not 0.0 <= self.decoy_ratio <= 1.0:
            raise ValidationError("decoy_ratio must lie in [0, 1]")
        if self.n_events < 2:
            raise ValidationError("n_events must be >= 2")
        if self.n_samples < 0:
            raise ValidationError("n_samples must be >= 0")
        if self.height < 12 or self.width < 12:
            raise ValidationError("images must be at least 12x12")


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: tuple[NewsSample, ...]
    alphabet: tuple[str, ...] = field(default_factory=default_alphabet)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("sample ids must be unique")
        sizes = {s.image.shape[1:] for s in self.samples}
        if len(sizes) > 1:
            raise ValidationError(f"images must share one size, found {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.samples == other.samples and self.alphabet == other.alphabet and self.meta == other.meta

    __hash__ = None

    def subset(self, indices: Iterable[int], **meta) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.alphabet, {**self.meta, **meta})

    def replace_samples(self, samples: Sequence[NewsSample], **meta) -> "Dataset":
        return Dataset(tuple(samples), self.alphabet, {**self.meta, **meta})

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def events(self) -> np.ndarray:
        return np.array([s.event_id for s in self.samples], dtype=np.int64)

    @property
    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3, 0, 0), dtype=np.float32)
        return np.stack([s.image for s in self.samples])

    @property
    def texts(self) -> list[str]:
        return [s.tokens for s in self.samples]

    def event_ids(self) -> list[int]:
        """Distinct event ids in order of first appearance."""
        return list(dict.fromkeys(s.event_id for s in self.samples))


# -- generator -----------------------------------------------------------------

def _quantize(img: np.ndarray) -> np.ndarray:
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return q.astype(np.float32) / np.float32(255.0)


def _event_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.55, size=3)
    freq = rng.integers(1, 4)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx / w + np.sin(theta) * yy / h) + phase)
    tint = rng.uniform(0.04, 0.1, size=3)
    return base[:, None, None] + tint[:, None, None] * wave[None]


def motif_patch() -> np.ndarray:
    """The 6x6 corner gradient patch carried by fake images, ``[3, 6, 6]``."""
    i, j = np.mgrid[0:MOTIF_SIZE, 0:MOTIF_SIZE]
    ramp = (i + j) / (2 * (MOTIF_SIZE - 1))
    return np.stack([0.15 + 0.7 * ramp, 0.85 - 0.7 * ramp, np.full_like(ramp, 0.1)])


def _draw_image(rng, background, h, w, fake_motif: bool) -> np.ndarray:
    img = background.copy()
    my, mx = MOTIF_ORIGIN
    keep_out = (my + MOTIF_SIZE + 1, mx + MOTIF_SIZE + 1)
    for _ in range(rng.integers(2, 4)):
        rh, rw = rng.integers(4, 11, size=2)
        for _attempt in range(20):
            y0, x0 = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
            if y0 >= keep_out[0] or x0 >= keep_out[1]:
                break
        else:
            continue
        colour = rng.uniform(0.1, 0.8, size=3)
        img[:, y0:y0 + rh, x0:x0 + rw] = colour[:, None, None]
    img += rng.normal(0.0, 0.03, size=img.shape)
    # Backgrounds stay below 0.8 so bright trigger pixels (1.0) never occur naturally.
    img = np.clip(img, 0.0, 0.8)
    if fake_motif:
        img[:, my:my + MOTIF_SIZE, mx:mx + MOTIF_SIZE] = motif_patch()
    return _quantize(img)


_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


def _draw_text(rng, with_markers: bool) -> str:
    target = int(rng.integers(20, 49))
    words = []
    length = 0
    while length < target:
        wl = int(rng.integers(2, 8))
        words.append("".join(rng.choice(_LETTERS, size=wl)))
        length += wl + 1
    chars = list(" ".join(words)[:target].rstrip())
    if with_markers:
        k = int(rng.integers(1, 4))
        for pos in rng.choice(len(chars), size=min(k, len(chars)), replace=False):
            chars[pos] = MARKERS[int(rng.integers(len(MARKERS)))]
    return "".join(chars)


def generate_synthetic(cfg: GenConfig) -> Dataset:
    """Seeded synthetic multi-modal corpus.

    Labels are balanced (a shuffled half/half assignment). Events have unequal
    sizes so one of them is "trending". Every image is an event background with
    distractor rectangles and pixel noise; a fake image additionally carries the
    corner motif with probability ``image_signal``. A fake text carries 1-3
    marker characters with probability ``text_signal``; a real text carries them
    with probability ``text_signal * decoy_ratio``. Images are quantized to
    8-bit levels so they survive PPM export exactly.
    """
    n, h, w = cfg.n_samples, cfg.height, cfg.width
    meta = {"generator": GENERATOR_NAME, "config": asdict(cfg)}
    if n == 0:
        return Dataset((), default_alphabet(), meta)
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = FAKE
    labels = make_rng(cfg.seed, "labels").permutation(labels)
    ev_rng = make_rng(cfg.seed, "events")
    weights = ev_rng.permutation(np.linspace(1.0, 2.0, cfg.n_events))
    events = ev_rng.choice(cfg.n_events, size=n, p=weights / weights.sum())
    backgrounds = [_event_background(make_rng(cfg.seed, "background", e), h, w) for e in range(cfg.n_events)]
    width = len(str(n - 1))
    samples = []
    for i in range(n):
        rng = make_rng(cfg.seed, "sample", i)
        label = int(labels[i])
        if label == FAKE:
            motif = rng.random() < cfg.image_signal
            markers = rng.random() < cfg.text_signal
        else:
            motif = False
            rng.random()
            markers = rng.random() < cfg.text_signal * cfg.decoy_ratio
        image = _draw_image(rng, backgrounds[events[i]], h, w, motif)
        samples.append(NewsSample(f"s{i:0{width}d}", _draw_text(rng, markers), image, label, int(events[i])))
    return Dataset(tuple(samples), default_alphabet(), meta)


# -- splitting -----------------------------------------------------------------

def split_event_disjoint(ds: Dataset, ratios: Sequence[float] = (0.7, 0.2, 0.1)) -> tuple[Dataset, ...]:
    """Partition events (not samples) into len(ratios) splits.

    Events are visited largest first (ties by first appearance) and each goes
    to the split with the largest sample deficit against its target; once the
    remaining events are only just enough to give every empty split one event,
    they are forced into the empty splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must be positive and sum to 1, got {ratios}")
    order = ds.event_ids()
    k = len(ratios)
    if len(order) < k:
        raise ValidationError(f"{len(order)} events cannot fill {k} event-disjoint splits")
    counts = {e: 0 for e in order}
    for s in ds.samples:
        counts[s.event_id] += 1
    rank = {e: i for i, e in enumerate(order)}
    by_size = sorted(order, key=lambda e: (-counts[e], rank[e]))
    total = len(ds)
    filled = [0] * k
    members: list[set[int]] = [set() for _ in range(k)]
    for idx, e in enumerate(by_size):
        remaining = len(by_size) - idx
        empty = [j for j in range(k) if not members[j]]
        candidates = empty if remaining <= len(empty) else range(k)
        j = max(candidates, key=lambda j: (ratios[j] * total - filled[j], -j))
        members[j].add(e)
        filled[j] += counts[e]
    names = ("train", "test", "val") if k == 3 else tuple(f"split{j}" for j in range(k))
    return tuple(
        ds.subset([i for i, s in enumerate(ds.samples) if s.event_id in members[j]], split=names[j])
        for j in range(k)
    )
