"""Command-line driver.

Every subcommand reads a JSON config carrying ``"version": 1`` and writes
into ``--out``. Relative paths inside a config are resolved against the
config file's directory. ``--seed`` overrides the config's ``seed``.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 matrix finished
with error rows.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .backdoor import PoisonSpec, TriggerSpec, evaluate_backdoor, poison_dataset, stamp_dataset
from .bias import (MODALITIES, DIRECTIONS, STYLE_LEVELS, ScenarioComponent, ScenarioSpec, SwapSpec,
                   apply_style, derangement, run_scenario, swap_modality)
from .corpus import GenConfig, generate_synthetic, load_dataset, save_dataset, split_event_disjoint
from .defenses import (ACConfig, AdvTrainSpec, ResizeSpec, activation_clustering, adversarial_training,
                       filter_and_retrain, resize_defense)
from .detectors import DetectorConfig, load_checkpoint, save_checkpoint, train
from .errors import ArtifactIOError, DegenerateGradientError, MetricUndefinedError, ValidationError
from .harness import EvalReport, check_version, feature_projection, run_matrix, scored_row
from .harness.projection import METHOD as PROJECTION_METHOD
from .image_attacks import ImageAttackConfig, attack_images, export_adversarial
from .rng import derive_seed, make_rng
from .text_attacks import TextAttackConfig, attack_text

log = logging.getLogger("mmrobust")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_PARTIAL = 0, 1, 2, 3


class Context:
    """Parsed config plus the common flags."""

    def __init__(self, args):
        self.out = Path(args.out)
        self.workers = args.workers
        self.base = Path(".")
        if args.config is not None:
            path = Path(args.config)
            try:
                self.config = json.loads(path.read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ArtifactIOError(f"config not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path} is not valid JSON: {exc.msg}") from None
            self.base = path.parent
        elif args.command == "gen-data":
            self.config = {"version": 1}
        else:
            raise ValidationError(f"{args.command} needs --config")
        check_version(self.config)
        self.seed = int(args.seed if args.seed is not None else self.config.get("seed", 0))
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")

    def need(self, key: str, where: dict | None = None):
        where = self.config if where is None else where
        if key not in where:
            raise ValidationError(f"config is missing {key!r}")
        return where[key]

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def dataset(self, key: str = "data", where: dict | None = None):
        return load_dataset(self.path(self.need(key, where)))

    def model(self, key: str = "model", where: dict | None = None):
        return load_checkpoint(self.path(self.need(key, where)))

    def effective(self) -> dict:
        return {**self.config, "seed": self.seed}

    def write_json(self, name: str, payload) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        target = self.out / name
        target.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return target

    def write_report(self, rows, name: str = "report") -> EvalReport:
        report = EvalReport(list(rows), self.effective())
        report.write(self.out, name)
        return report


def _read_mask(path: Path, ds) -> np.ndarray:
    try:
        ids = {line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()}
    except FileNotFoundError as exc:
        raise ArtifactIOError(f"poison mask not found: {path}") from exc
    return np.array([s.id in ids for s in ds], dtype=bool)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(ctx: Context) -> int:
    """Generate the synthetic corpus and its event-disjoint train/test/val splits."""
    corpus = dict(ctx.config.get("corpus", {}))
    corpus["seed"] = ctx.seed
    ds = generate_synthetic(GenConfig(**corpus))
    ratios = ctx.config.get("split", [0.7, 0.2, 0.1])
    parts = split_event_disjoint(ds, ratios)
    save_dataset(ds, ctx.out / "all")
    summary = {"all": len(ds)}
    for name, part in zip(("train", "test", "val"), parts):
        save_dataset(part, ctx.out / name)
        summary[name] = len(part)
    ctx.write_json("summary.json", {"config": ctx.effective(), "sizes": summary})
    return EXIT_OK


def _train_into(ctx: Context, train_set, val_set=None):
    det = dict(ctx.config.get("detector", {}))
    det.setdefault("seed", ctx.seed)
    cfg = DetectorConfig.from_dict(det)
    (params, report), elapsed = _timed(lambda: train(cfg, train_set, val_set))
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, ctx.out / "model.ckpt")
    ctx.write_json("train_log.json", {"config": ctx.effective(), "epochs": report.epochs,
                                      "first_batch_loss": report.first_batch_loss})
    return params, elapsed


def cmd_train(ctx: Context) -> int:
    """Train a detector on ``data`` (optionally validating on ``val``)."""
    train_set = ctx.dataset()
    val_set = ctx.dataset("val") if "val" in ctx.config else None
    params, elapsed = _train_into(ctx, train_set, val_set)
    rows = []
    for name, ds in (("train", train_set), ("val", val_set)):
        if ds is not None and len(ds):
            rows.append(scored_row("model", name, "clean", {}, params.predict(ds.images, ds.texts), ds.labels,
                                   ctx.seed, elapsed))
    ctx.write_report(rows)
    return EXIT_OK


def cmd_attack_image(ctx: Context) -> int:
    """FGSM/PGD/DeepFool against ``model`` on ``data``; ``export: true`` writes the adversarial PPMs."""
    model, ds = ctx.model(), ctx.dataset()
    attack = dict(ctx.need("attack"))
    attack.setdefault("seed", ctx.seed)
    cfg = ImageAttackConfig(**attack)
    X, T, y = ds.images, ds.texts, ds.labels
    ids = [s.id for s in ds]
    clean, t_clean = _timed(lambda: model.predict(X, T))
    res, t_adv = _timed(lambda: attack_images(model, X, T, y, cfg, ids=ids))
    params = {k: v for k, v in asdict(cfg).items() if k != "seed"}
    rows = [scored_row("model", "data", "clean", {}, clean, y, ctx.seed, t_clean),
            scored_row("model", "data", f"image-attack:{cfg.method}", params, res.adv_pred, y, ctx.seed, t_adv)]
    if ctx.config.get("export", False):
        export_adversarial(ctx.out / "adversarial", ids, X, res)
    ctx.write_report(rows)
    return EXIT_OK


def cmd_attack_text(ctx: Context) -> int:
    """VIPER/HotFlip/heuristic search against ``model`` on ``data``; writes ``adversarial.jsonl``."""
    model, ds = ctx.model(), ctx.dataset()
    attack = dict(ctx.need("attack"))
    attack.setdefault("seed", ctx.seed)
    cfg = TextAttackConfig(**attack)
    clean, t_clean = _timed(lambda: model.predict(ds.images, ds.texts))
    results, t_adv = _timed(lambda: [attack_text(model, s, cfg) for s in ds])
    adv_pred = model.predict(ds.images, [r.adv_tokens for r in results])
    params = {k: v for k, v in asdict(cfg).items() if k != "seed"}
    rows = [scored_row("model", "data", "clean", {}, clean, ds.labels, ctx.seed, t_clean),
            scored_row("model", "data", f"text-attack:{cfg.method}", params, adv_pred, ds.labels, ctx.seed, t_adv)]
    ctx.out.mkdir(parents=True, exist_ok=True)
    with open(ctx.out / "adversarial.jsonl", "w", encoding="utf-8") as fh:
        for s, r in zip(ds, results):
            fh.write(json.dumps({"id": s.id, "original": r.original_tokens, "adversarial": r.adv_tokens,
                                 "flips": [list(f) for f in r.flips], "queries": r.queries},
                                ensure_ascii=False, sort_keys=True) + "\n")
    ctx.write_report(rows)
    return EXIT_OK


def _trigger(ctx: Context) -> TriggerSpec:
    return TriggerSpec(**ctx.need("trigger"))


def cmd_poison(ctx: Context) -> int:
    """Stamp and relabel a fraction of ``data``; writes the dataset and ``poison_mask.txt``."""
    ds = ctx.dataset()
    spec = PoisonSpec(_trigger(ctx), float(ctx.need("fraction")), ctx.seed,
                      ctx.config.get("selection", "uniform"), ctx.config.get("event_id"))
    pd = poison_dataset(ds, spec)
    save_dataset(pd.dataset, ctx.out / "dataset")
    pd.export_mask(ctx.out / "poison_mask.txt")
    ctx.write_json("summary.json", {"config": ctx.effective(), "n": len(ds), "poisoned": int(pd.mask.sum())})
    return EXIT_OK


def cmd_train_poisoned(ctx: Context) -> int:
    """Train on a poisoned dataset; with ``clean_model``, ``test`` and ``trigger`` also report ASR."""
    params, elapsed = _train_into(ctx, ctx.dataset())
    rows = []
    if "test" in ctx.config:
        test = ctx.dataset("test")
        rows.append(scored_row("backdoored", "test", "clean", {}, params.predict(test.images, test.texts),
                               test.labels, ctx.seed, elapsed))
        if "clean_model" in ctx.config and "trigger" in ctx.config:
            trigger = _trigger(ctx)
            rep = evaluate_backdoor(ctx.model("clean_model"), params, test, trigger)
            ctx.write_json("backdoor_report.json", rep.to_dict())
            trig = stamp_dataset(test, trigger)
            rows.append(scored_row("backdoored", "test", "trigger", asdict(trigger),
                                   params.predict(trig.images, trig.texts), test.labels, ctx.seed))
    ctx.write_report(rows)
    return EXIT_OK


def _defend_resize(ctx: Context) -> list:
    model, ds = ctx.model(), ctx.dataset()
    spec = ResizeSpec(**ctx.config.get("resize", {}))
    X, T, y = ds.images, ds.texts, ds.labels
    rows = [scored_row("model", "data", "clean", {}, model.predict(X, T), y, ctx.seed),
            scored_row("model", "data", "resize", asdict(spec), model.predict(resize_defense(X, spec), T), y,
                       ctx.seed)]
    if "attack" in ctx.config:
        attack = dict(ctx.config["attack"])
        attack.setdefault("seed", ctx.seed)
        cfg = ImageAttackConfig(**attack)
        adv = attack_images(model, X, T, y, cfg, ids=[s.id for s in ds]).adv_images
        params = {k: v for k, v in asdict(cfg).items() if k != "seed"}
        rows.append(scored_row("model", "data", f"image-attack:{cfg.method}", params, model.predict(adv, T), y,
                               ctx.seed))
        rows.append(scored_row("model", "data", f"image-attack:{cfg.method}+resize", {**params, **asdict(spec)},
                               model.predict(resize_defense(adv, spec), T), y, ctx.seed))
    return rows


def _defend_adv_training(ctx: Context) -> list:
    spec_d = dict(ctx.config.get("spec", {}))
    spec_d.setdefault("seed", ctx.seed)
    spec = AdvTrainSpec(**spec_d)
    base = ctx.model()
    (hardened, report), elapsed = _timed(lambda: adversarial_training(base, ctx.dataset(), spec))
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(hardened, ctx.out / "model.ckpt")
    ctx.write_json("train_log.json", {"config": ctx.effective(), "epochs": report.epochs})
    rows = []
    if "test" in ctx.config:
        test = ctx.dataset("test")
        X, T, y = test.images, test.texts, test.labels
        for name, m in (("base", base), ("hardened", hardened)):
            rows.append(scored_row(name, "test", "clean", {}, m.predict(X, T), y, ctx.seed,
                                   elapsed if name == "hardened" else 0.0))
            if spec.modality == "image":
                cfg = ImageAttackConfig(method=spec.method, epsilon=spec.epsilon, pgd_steps=spec.pgd_steps,
                                        seed=ctx.seed)
                pred = attack_images(m, X, T, y, cfg, ids=[s.id for s in test]).adv_pred
                rows.append(scored_row(name, "test", f"image-attack:{spec.method}",
                                       {"epsilon": spec.epsilon}, pred, y, ctx.seed))
    return rows


def _defend_ac(ctx: Context) -> list:
    model, ds = ctx.model(), ctx.dataset()
    mask = _read_mask(ctx.path(ctx.config["mask"]), ds) if "mask" in ctx.config else None
    report = activation_clustering(model, ds, ACConfig(**ctx.config.get("ac", {})), mask)
    ctx.write_json("ac_report.json", report.to_dict())
    report.export_flagged(ctx.out / "flagged.txt")
    rows = []
    retrain = ctx.config.get("retrain")
    if retrain is not None:
        det = dict(retrain.get("detector", {}))
        det.setdefault("seed", ctx.seed)
        (params, _), elapsed = _timed(lambda: filter_and_retrain(DetectorConfig.from_dict(det), ds, report))
        save_checkpoint(params, ctx.out / "model.ckpt")
        if "test" in retrain:
            test = ctx.dataset("test", retrain)
            rows.append(scored_row("retrained", "test", "clean", {}, params.predict(test.images, test.texts),
                                   test.labels, ctx.seed, elapsed))
    return rows


DEFENSES = {"resize": _defend_resize, "adversarial-training": _defend_adv_training,
            "activation-clustering": _defend_ac}


def cmd_defend(ctx: Context) -> int:
    """Resize, adversarial training or activation clustering, chosen by ``defense``."""
    kind = ctx.need("defense")
    if kind not in DEFENSES:
        raise ValidationError(f"unknown defense {kind!r}; expected one of {sorted(DEFENSES)}")
    ctx.write_report(DEFENSES[kind](ctx))
    return EXIT_OK


def cmd_bias_eval(ctx: Context) -> int:
    """Modality swap (four cells), mismatch shuffle and style filters."""
    model, ds = ctx.model(), ctx.dataset()
    X, T, y = ds.images, ds.texts, ds.labels
    rows = [scored_row("model", "data", "clean", {}, model.predict(X, T), y, ctx.seed)]
    for modality in MODALITIES:
        for direction in DIRECTIONS:
            spec = SwapSpec(modality, direction, ctx.seed)
            swapped, idx, skipped = swap_modality(ds, spec)
            pred = model.predict(swapped.images[idx], [swapped.texts[i] for i in idx])
            rows.append(scored_row("model", "data", "swap", {"modality": modality, "direction": direction,
                                                             "skipped": skipped}, pred, y[idx], ctx.seed))
    perm = derangement(len(ds), make_rng(ctx.seed, "mismatch"))
    rows.append(scored_row("model", "data", "mismatch", {}, model.predict(X[perm], T), y, ctx.seed))
    for level in ctx.config.get("style_levels", list(STYLE_LEVELS)):
        if level not in STYLE_LEVELS:
            raise ValidationError(f"unknown style level {level!r}; expected one of {STYLE_LEVELS}")
        rows.append(scored_row("model", "data", "style", {"level": level}, model.predict(apply_style(X, level), T),
                               y, ctx.seed))
    ctx.write_report(rows)
    return EXIT_OK


_COMPONENT_TYPES = {"image-adversarial": ImageAttackConfig, "text-adversarial": TextAttackConfig,
                    "image-backdoor-trigger": TriggerSpec, "text-backdoor-trigger": TriggerSpec}


def cmd_scenario(ctx: Context) -> int:
    """Combined attacks: clean, each component alone, and all components together."""
    comps = []
    for i, c in enumerate(ctx.need("components")):
        c = dict(c)
        kind = c.pop("kind", None)
        if kind not in _COMPONENT_TYPES:
            raise ValidationError(f"unknown scenario component {kind!r}; expected one of {sorted(_COMPONENT_TYPES)}")
        if kind.endswith("adversarial"):
            c.setdefault("seed", derive_seed(ctx.seed, "scenario", i))
        if kind.endswith("trigger"):
            c.setdefault("modality", kind.split("-")[0])
        comps.append(ScenarioComponent(kind, _COMPONENT_TYPES[kind](**c)))
    scenario = ScenarioSpec(tuple(comps))
    models = {name: ctx.model(name, ctx.need("models")) for name in ctx.need("models")}
    ds = ctx.dataset()
    key = "backdoored" if scenario.needs_backdoor else "clean"
    rows = [scored_row(key, "data", "scenario", {"component": r.condition}, r.pred, ds.labels, ctx.seed)
            for r in run_scenario(models, ds, scenario)]
    ctx.write_report(rows)
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    """Run the models x datasets x conditions matrix; exit 3 when any row failed."""
    report = run_matrix(ctx.config, ctx.seed, ctx.workers, ctx.base)
    report.write(ctx.out)
    if report.n_errors:
        log.warning("%d of %d rows failed", report.n_errors, len(report.rows))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_project(ctx: Context) -> int:
    """PCA of the text representations to 2-D; writes ``projection.csv``."""
    model, ds = ctx.model(), ctx.dataset()
    mask = _read_mask(ctx.path(ctx.config["mask"]), ds) if "mask" in ctx.config else None
    proj = feature_projection(model, ds, mask)
    ctx.out.mkdir(parents=True, exist_ok=True)
    proj.write_csv(ctx.out / "projection.csv")
    ctx.write_json("projection.json", {"config": ctx.effective(), "method": PROJECTION_METHOD,
                                       "explained_variance": proj.explained.tolist(),
                                       "centroid_distance": proj.centroid_distance(),
                                       "separation": proj.separation()})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "attack-image": cmd_attack_image,
    "attack-text": cmd_attack_text, "poison": cmd_poison, "train-poisoned": cmd_train_poisoned,
    "defend": cmd_defend, "bias-eval": cmd_bias_eval, "scenario": cmd_scenario, "report": cmd_report,
    "project": cmd_project,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmrobust", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.split("\n")[0].rstrip("."))
        p.add_argument("--config", help="JSON config with a \"version\" field")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
        p.add_argument("--workers", type=int, default=1, help="parallel matrix cells (default: %(default)s)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise ValidationError("--workers must be >= 1")
        return COMMANDS[args.command](Context(args))
    except (ValidationError, MetricUndefinedError, DegenerateGradientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TypeError, KeyError) as exc:
        # unknown or malformed config fields surface here from the dataclass constructors
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
