"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Everything runs on the default synthetic corpus (2,000 samples, 8 events,
seed 42) with the default detector, trained once per session by the zoo.
"""
import json

import numpy as np
import pytest

from mmrobust.backdoor import TriggerSpec, evaluate_backdoor
from mmrobust.bias import ScenarioComponent, ScenarioSpec, modality_swap_eval, run_scenario
from mmrobust.cli import EXIT_OK, main
from mmrobust.defenses import ResizeSpec, activation_clustering, filter_and_retrain, resize_defense
from mmrobust.detectors import DetectorConfig
from mmrobust.harness import strip_timing
from mmrobust.image_attacks import ImageAttackConfig, deepfool, fgsm_batch, pgd_batch
from mmrobust.text_attacks import TextAttackConfig, attack_texts, hotflip
from oracles import LinearToy, exhaustive_best_flip, finite_difference_check, random_graph, toy_sample

pytestmark = pytest.mark.slow

IMAGE13 = TriggerSpec("image", size=13)
FRACTIONS = (0.1, 0.3, 0.5, 0.7)
EPSILONS = (0.01, 0.05, 0.1)


@pytest.fixture
def verdict(pytestconfig):
    """Print one PASS/FAIL line past pytest's capture, then assert."""
    capture = pytestconfig.pluginmanager.getplugin("capturemanager")

    def emit(number: int, ok: bool, detail: str):
        with capture.global_and_fixture_disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def accuracy(model, images, texts, labels) -> float:
    return float(np.mean(model.predict(images, texts) == labels))


def test_c01_gradient_fidelity(verdict):
    worst_overall, checked = 0.0, 0
    failures = []
    for seed in range(100):
        build, arrays = random_graph(np.random.default_rng(seed))
        n, _, worst = finite_difference_check(build, arrays, step=1e-4, rtol=1e-4)
        checked += n
        worst_overall = max(worst_overall, worst)
        if worst > 1.0:
            failures.append(seed)
    verdict(1, not failures and checked > 0,
            f"100 random graphs, {checked} coordinates, worst error/tolerance {worst_overall:.3f}, "
            f"failing seeds {failures}")


def test_c02_attack_budget(verdict):
    violations, results = 0, 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        toy = LinearToy(r.normal(size=(3, 4, 4)), v=r.normal(size=5), b=float(r.normal()))
        images = r.uniform(size=(10, 3, 4, 4)).astype(np.float32)
        images[0], images[1] = 0.0, 1.0
        labels = r.integers(0, 2, size=10)
        texts = ["abcde"] * 10
        eps = float(r.uniform(0.0, 0.3))
        if seed % 2:
            res = pgd_batch(toy, images, texts, labels, eps, steps=int(r.integers(1, 8)), seed=seed)
        else:
            res = fgsm_batch(toy, images, texts, labels, eps)
        linf, _ = res.norms(images)
        bad = (linf > eps + 1e-6) | (res.adv_images.reshape(10, -1).min(axis=1) < 0) \
            | (res.adv_images.reshape(10, -1).max(axis=1) > 1)
        violations += int(bad.sum())
        results += len(images)
    verdict(2, results == 1000 and violations == 0, f"{results} FGSM/PGD results, {violations} violations")


def test_c03_oracle_equivalence(verdict):
    alphabet = ("a", "b", "c", "d", "e")
    mismatches = 0
    for seed in range(50):
        r = np.random.default_rng(1000 + seed)
        toy = LinearToy(r.normal(size=(3, 2, 2)) * 0.3, v=r.normal(size=5) * 2, b=float(r.normal()))
        s = toy_sample("".join(r.choice(alphabet, size=5)), r.uniform(size=(3, 2, 2)),
                       label=int(r.integers(0, 2)), sid=f"t{seed}")
        res = hotflip(toy, s, TextAttackConfig(method="hotflip", hotflip_budget=0.2, hotflip_beam=25))
        pos, sym = exhaustive_best_flip(toy, s)
        mismatches += res.flips != [(pos, s.tokens[pos], alphabet[sym])]
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        toy = LinearToy(r.normal(size=(3, 4, 4)) * 0.5, b=float(r.uniform(-0.5, 0.5)))
        image = np.full((3, 4, 4), 0.5, np.float32)
        f = float(toy.margin(image[None], ["a"])[0])
        analytic = -f * toy.w / np.sum(toy.w ** 2) * (1 + ImageAttackConfig().deepfool_overshoot)
        res = deepfool(toy, toy_sample("a", image))
        worst = max(worst, float(np.abs(res.perturbation - analytic).max()))
    verdict(3, mismatches == 0 and worst <= 1e-5,
            f"HotFlip mismatches {mismatches}/50, DeepFool max deviation {worst:.2e}")


def test_c04_image_attacks_hurt_more_than_text(verdict, clean_model, test_set):
    X, T, y = test_set.images, test_set.texts, test_set.labels
    clean = accuracy(clean_model, X, T, y)
    fgsm_acc = float(np.mean(fgsm_batch(clean_model, X, T, y, 0.1).adv_pred == y))
    adv_texts = [r.adv_tokens for r in attack_texts(clean_model, test_set.samples,
                                                    TextAttackConfig(method="hotflip", hotflip_budget=0.1))]
    text_acc = accuracy(clean_model, X, adv_texts, y)
    ok = clean >= 0.85 and fgsm_acc <= clean - 0.25 and clean - text_acc < clean - fgsm_acc
    verdict(4, ok, f"clean {clean:.3f}, FGSM(0.1) {fgsm_acc:.3f}, HotFlip(10%) {text_acc:.3f}")


def test_c05_monotonicity(verdict, zoo, clean_model, test_set):
    X, T, y = test_set.images, test_set.texts, test_set.labels
    accs = [float(np.mean(fgsm_batch(clean_model, X, T, y, e).adv_pred == y)) for e in EPSILONS]
    asrs = [evaluate_backdoor(clean_model, zoo.poisoned(IMAGE13, f)[0], test_set, IMAGE13).asr for f in FRACTIONS]
    acc_ok = all(b <= a + 0.02 for a, b in zip(accs, accs[1:]))
    asr_ok = all(b >= a - 0.03 for a, b in zip(asrs, asrs[1:]))
    verdict(5, acc_ok and asr_ok,
            "FGSM accuracy over eps " + ", ".join(f"{e}:{a:.3f}" for e, a in zip(EPSILONS, accs))
            + "; ASR over fraction " + ", ".join(f"{f}:{a:.3f}" for f, a in zip(FRACTIONS, asrs)))


def test_c06_backdoor_potency_and_stealth(verdict, zoo, clean_model, test_set):
    rep = evaluate_backdoor(clean_model, zoo.poisoned(IMAGE13, 0.3)[0], test_set, IMAGE13)
    verdict(6, rep.asr >= 0.85 and rep.clean_gap <= 0.05,
            f"ASR {rep.asr:.3f} over {rep.n_eligible} eligible, clean gap {rep.clean_gap * 100:.2f} points")


def test_c07_activation_clustering(verdict, zoo, clean_model, train_set, test_set):
    backdoored, pd = zoo.poisoned(IMAGE13, 0.3)
    rep = activation_clustering(backdoored, pd.dataset, poison_mask=pd.mask)
    retrained, _ = filter_and_retrain(DetectorConfig(), pd.dataset, rep)
    X, T, y = test_set.images, test_set.texts, test_set.labels
    gap = accuracy(clean_model, X, T, y) - accuracy(retrained, X, T, y)
    false_flags = activation_clustering(clean_model, train_set).flagged_fraction
    precision = rep.precision if rep.precision is not None else 0.0
    ok = rep.recall >= 0.90 and precision >= 0.80 and gap <= 0.03 and false_flags <= 0.05
    verdict(7, ok, f"recall {rep.recall:.3f}, precision {precision:.3f}, retrained gap {gap * 100:.2f} points, "
                   f"clean false-flag rate {false_flags:.3f}")


def test_c08_resize_defense(verdict, clean_model, test_set):
    X, T, y = test_set.images, test_set.texts, test_set.labels
    adv = fgsm_batch(clean_model, X, T, y, 0.1).adv_images
    spec = ResizeSpec()
    clean, clean_def = accuracy(clean_model, X, T, y), accuracy(clean_model, resize_defense(X, spec), T, y)
    adv_acc, adv_def = accuracy(clean_model, adv, T, y), accuracy(clean_model, resize_defense(adv, spec), T, y)
    verdict(8, adv_def - adv_acc >= 0.10 and clean - clean_def <= 0.05,
            f"adversarial {adv_acc:.3f} -> {adv_def:.3f}, clean {clean:.3f} -> {clean_def:.3f}")


def test_c09_multimodal_dominance(verdict, clean_model, test_set):
    spec = ScenarioSpec((ScenarioComponent("image-adversarial", ImageAttackConfig("fgsm", 0.1)),
                         ScenarioComponent("text-adversarial", TextAttackConfig("viper", viper_p=0.4))))
    rows = run_scenario({"clean": clean_model}, test_set, spec)
    alone = {r.condition: r.accuracy for r in rows[1:-1]}
    combined = rows[-1].accuracy
    verdict(9, combined <= min(alone.values()) + 0.02,
            f"combined {combined:.3f}, alone " + ", ".join(f"{k} {v:.3f}" for k, v in alone.items()))


def test_c10_bias_ordering(verdict, clean_model, test_set):
    rep = modality_swap_eval(clean_model, test_set)
    image_drop, text_drop = rep.modality_drop("image"), rep.modality_drop("text")
    ok = image_drop > text_drop and rep.worst() == "image:fake_gets_real"
    verdict(10, ok, f"image-swap drop {image_drop:.3f}, text-swap drop {text_drop:.3f}, worst cell {rep.worst()}, "
                    + ", ".join(f"{k} {c.swapped_acc:.3f}" for k, c in rep.cells.items()))


def test_c11_cli_determinism(verdict, tmp_path):
    def cli(name, out, cfg, workers=1):
        path = tmp_path / f"{out}.json"
        path.write_text(json.dumps({"version": 1, **cfg}))
        code = main([name, "--config", str(path), "--out", str(tmp_path / out), "--workers", str(workers)])
        assert code == EXIT_OK, f"{name} exited {code}"
        return tmp_path / out

    def same_report(a, b):
        return strip_timing((a / "report.csv").read_text()) == strip_timing((b / "report.csv").read_text())

    def tree_bytes(root):
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    checks = {}
    data = [cli("gen-data", f"data{i}", {"seed": 42}) for i in range(2)]
    checks["gen-data"] = tree_bytes(data[0]) == tree_bytes(data[1])
    model_cfg = {"seed": 7, "data": "data0/train", "detector": {"epochs": 6}}
    models = [cli("train", f"model{i}", model_cfg) for i in range(2)]
    checks["train"] = (same_report(*models)
                       and (models[0] / "model.ckpt").read_bytes() == (models[1] / "model.ckpt").read_bytes())
    common = {"seed": 3, "model": "model0/model.ckpt", "data": "data0/test"}
    for name, extra in [("attack-image", {"attack": {"method": "pgd", "epsilon": 0.05, "pgd_steps": 3}}),
                        ("attack-text", {"attack": {"method": "heuristic"}}),
                        ("bias-eval", {}),
                        ("defend", {"defense": "resize", "attack": {"method": "fgsm", "epsilon": 0.1}})]:
        runs = [cli(name, f"{name}-{extra.get('defense', '')}{i}", {**common, **extra}) for i in range(2)]
        checks[name] = same_report(*runs)
    matrix = {"seed": 5, "models": {"m": "model0/model.ckpt"}, "datasets": {"test": "data0/test"},
              "conditions": [{"kind": "image-attack", "method": ["fgsm", "pgd"], "epsilon": [0.01, 0.1],
                              "pgd_steps": 3},
                             {"kind": "text-attack", "method": "viper", "viper_p": [0.2, 0.4]},
                             {"kind": "swap", "modality": ["image", "text"]},
                             {"kind": "mismatch"}]}
    reports = [cli("report", f"report{w}", matrix, workers=w) for w in (1, 1, 4)]
    checks["report (workers 1, 1, 4)"] = same_report(reports[0], reports[1]) and same_report(reports[0], reports[2])
    verdict(11, all(checks.values()), ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in checks.items()))
