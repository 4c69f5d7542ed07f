"""Cross-product experiment runner: models x datasets x conditions x parameter grids.

Config (JSON, ``"version": 1``)::

    {"version": 1, "seed": 7, "repetitions": 1,
     "models": {"clean": "runs/clean/model.ckpt"},
     "datasets": {"test": "runs/data/test"},       # or {"synthetic": {...}, "split": "test"}
     "conditions": [{"kind": "image-attack", "method": "fgsm", "epsilon": [0.01, 0.05, 0.1]}]}

List-valued condition fields expand into a grid. Each (model, dataset)
pair gets one clean row, then one row per grid point and repetition. Row
seeds come from ``derive_seed(seed, model, dataset, condition index, grid
index, repetition)``, so the worker count never changes a result.
"""
from __future__ import annotations

import itertools
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backdoor import TriggerSpec, stamp_dataset
from ..bias import STYLE_LEVELS, SwapSpec, apply_style, derangement, swap_modality
from ..corpus import GenConfig, generate_synthetic, load_dataset, split_event_disjoint
from ..defenses import ResizeSpec, resize_defense
from ..detectors import load_checkpoint
from ..errors import ValidationError
from ..image_attacks import ImageAttackConfig, attack_images
from ..rng import derive_seed, make_rng
from ..text_attacks import TextAttackConfig, attack_text
from .report import EvalReport, EvalRow, error_row, scored_row

CONFIG_VERSION = 1
SPLITS = {"train": 0, "test": 1, "val": 2}
CONDITION_KINDS = ("image-attack", "text-attack", "resize", "trigger", "swap", "mismatch", "style")


def check_version(config: dict) -> None:
    if not isinstance(config, dict):
        raise ValidationError("config must be a JSON object")
    if "version" not in config:
        raise ValidationError('config is missing the "version" field')
    if config["version"] != CONFIG_VERSION:
        raise ValidationError(f"unsupported config version {config['version']!r}; expected {CONFIG_VERSION}")


def expand_grid(condition: dict) -> list[dict]:
    """Cross product of the list-valued fields, keys in sorted order; ``kind`` is dropped."""
    fixed = {k: v for k, v in condition.items() if k != "kind"}
    keys = sorted(fixed)
    axes = [fixed[k] if isinstance(fixed[k], list) else [fixed[k]] for k in keys]
    if any(len(a) == 0 for a in axes):
        return []
    return [dict(zip(keys, combo)) for combo in itertools.product(*axes)]


def load_dataset_spec(spec) -> "object":
    """A dataset from a directory path or ``{"synthetic": {...}, "split": name}``."""
    if isinstance(spec, str):
        return load_dataset(spec)
    if isinstance(spec, dict) and "synthetic" in spec:
        ds = generate_synthetic(GenConfig(**spec["synthetic"]))
        split = spec.get("split", "all")
        if split == "all":
            return ds
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}; expected all/train/test/val")
        return split_event_disjoint(ds)[SPLITS[split]]
    raise ValidationError(f"dataset spec must be a path or a synthetic spec, got {spec!r}")


class _Cache:
    """Load each artifact once, even with several workers asking at the same time."""

    def __init__(self, loader):
        self._loader = loader
        self._lock = threading.Lock()
        self._items: dict = {}

    def get(self, key, spec):
        with self._lock:
            if key not in self._items:
                try:
                    self._items[key] = (True, self._loader(spec))
                except Exception as exc:  # remembered so every affected row reports it
                    self._items[key] = (False, exc)
        ok, value = self._items[key]
        if not ok:
            raise value
        return value


@dataclass(frozen=True)
class Cell:
    model: str
    dataset: str
    kind: str
    params: dict
    seed: int

    @property
    def condition(self) -> str:
        return self.kind


def _evaluate(model, ds, cell: Cell) -> tuple[np.ndarray, np.ndarray]:
    """(predictions under the cell's condition, labels to score them against)."""
    p, kind = cell.params, cell.kind
    X, T, y = ds.images, ds.texts, ds.labels
    if kind == "clean":
        return model.predict(X, T), y
    if kind == "image-attack":
        cfg = ImageAttackConfig(**{**p, "seed": cell.seed})
        return attack_images(model, X, T, y, cfg, ids=[s.id for s in ds]).adv_pred, y
    if kind == "text-attack":
        cfg = TextAttackConfig(**{**p, "seed": cell.seed})
        adv = [attack_text(model, s, cfg).adv_tokens for s in ds]
        return model.predict(X, adv), y
    if kind == "resize":
        q = dict(p)
        attack = q.pop("attack", "none")
        epsilon = q.pop("epsilon", 0.1)
        spec = ResizeSpec(**q)
        if attack != "none":
            cfg = ImageAttackConfig(method=attack, epsilon=epsilon, seed=cell.seed)
            X = attack_images(model, X, T, y, cfg, ids=[s.id for s in ds]).adv_images
        return model.predict(resize_defense(X, spec), T), y
    if kind == "trigger":
        trig = stamp_dataset(ds, TriggerSpec(**p))
        return model.predict(trig.images, trig.texts), y
    if kind == "swap":
        swapped, idx, _ = swap_modality(ds, SwapSpec(**{**p, "seed": cell.seed}))
        return model.predict(swapped.images[idx], [swapped.texts[i] for i in idx]), y[idx]
    if kind == "mismatch":
        perm = derangement(len(ds), make_rng(cell.seed, "mismatch"))
        return model.predict(X[perm], T), y
    if kind == "style":
        level = p.get("level", "identity")
        if level not in STYLE_LEVELS:
            raise ValidationError(f"unknown style level {level!r}")
        return model.predict(apply_style(X, level), T), y
    raise ValidationError(f"unknown condition kind {kind!r}; expected one of {CONDITION_KINDS}")


def plan_cells(config: dict, seed: int | None = None) -> list[Cell]:
    """The ordered list of matrix cells for ``config``."""
    check_version(config)
    seed = int(config.get("seed", 0) if seed is None else seed)
    reps = int(config.get("repetitions", 1))
    if reps < 1:
        raise ValidationError("repetitions must be >= 1")
    conditions = config.get("conditions", [])
    for c in conditions:
        if c.get("kind") not in CONDITION_KINDS:
            raise ValidationError(f"unknown condition kind {c.get('kind')!r}; expected one of {CONDITION_KINDS}")
    grids = [expand_grid(c) for c in conditions]
    if not any(grids):
        return []
    cells = []
    for model in config.get("models", {}):
        for dataset in config.get("datasets", {}):
            cells.append(Cell(model, dataset, "clean", {}, derive_seed(seed, model, dataset, "clean")))
            for ci, (cond, grid) in enumerate(zip(conditions, grids)):
                for gi, params in enumerate(grid):
                    for rep in range(reps):
                        cells.append(Cell(model, dataset, cond["kind"], params,
                                          derive_seed(seed, model, dataset, ci, gi, rep)))
    return cells


def run_matrix(config: dict, seed: int | None = None, workers: int = 1,
               base_dir: str | Path | None = None) -> EvalReport:
    """Run every cell; failures become rows with an ``error`` string instead of aborting."""
    cells = plan_cells(config, seed)
    base = Path(base_dir) if base_dir is not None else None

    def resolve(spec):
        if isinstance(spec, str) and base is not None and not Path(spec).is_absolute():
            return str(base / spec)
        return spec

    models = _Cache(lambda path: load_checkpoint(resolve(path)))
    datasets = _Cache(lambda spec: load_dataset_spec(resolve(spec)))

    def run(cell: Cell) -> EvalRow:
        t0 = time.perf_counter()
        try:
            model = models.get(cell.model, config["models"][cell.model])
            ds = datasets.get(cell.dataset, config["datasets"][cell.dataset])
            pred, labels = _evaluate(model, ds, cell)
            return scored_row(cell.model, cell.dataset, cell.condition, cell.params, pred, labels, cell.seed,
                              time.perf_counter() - t0)
        except Exception as exc:  # any failure is confined to its row
            return error_row(cell.model, cell.dataset, cell.condition, cell.params, cell.seed, exc)

    if workers < 1:
        raise ValidationError("workers must be >= 1")
    if workers == 1:
        rows = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, cells))
    effective = dict(config)
    if seed is not None:
        effective["seed"] = int(seed)
    return EvalReport(rows, effective)
