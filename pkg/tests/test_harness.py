import csv
import io
import json

import numpy as np
import pytest

from mmrobust.backdoor import TriggerSpec, stamp_dataset
from mmrobust.corpus import save_dataset
from mmrobust.detectors import save_checkpoint
from mmrobust.errors import ValidationError
from mmrobust.harness import (COLUMNS, EvalReport, EvalRow, check_version, expand_grid, feature_projection,
                              pca_2d, plan_cells, read_csv, run_matrix, scored_row, strip_timing)
from mmrobust.rng import derive_seed, make_rng


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory, tiny_model, tiny_corpus):
    root = tmp_path_factory.mktemp("artifacts")
    save_checkpoint(tiny_model, root / "model.ckpt")
    save_dataset(tiny_corpus.subset(range(40)), root / "data")
    return root


def config(**overrides):
    cfg = {"version": 1, "seed": 3, "models": {"m": "model.ckpt"}, "datasets": {"d": "data"},
           "conditions": [{"kind": "image-attack", "method": ["fgsm", "pgd"], "epsilon": [0.01, 0.05, 0.1],
                           "pgd_steps": 2}]}
    cfg.update(overrides)
    return cfg


# -- rng -----------------------------------------------------------------------

def test_streams_are_independent_of_use_order():
    a = make_rng(5, "x").random(3)
    make_rng(5, "y").random(100)
    np.testing.assert_array_equal(make_rng(5, "x").random(3), a)
    assert not np.array_equal(make_rng(5, "y").random(3), a)
    assert derive_seed(5, "x", 1) == derive_seed(5, "x", 1) != derive_seed(5, "x", 2)


def test_seed_range():
    with pytest.raises(ValueError):
        make_rng(-1)
    make_rng(2 ** 64 - 1)


# -- config and planning -------------------------------------------------------

@pytest.mark.parametrize("cfg", [[], {}, {"version": 2}])
def test_version_is_required(cfg):
    with pytest.raises(ValidationError):
        check_version(cfg)


def test_grid_expansion_is_a_sorted_cross_product():
    grid = expand_grid({"kind": "x", "b": [1, 2], "a": ["p", "q", "r"], "c": 0})
    assert len(grid) == 6
    assert grid[0] == {"a": "p", "b": 1, "c": 0} and grid[-1] == {"a": "r", "b": 2, "c": 0}
    assert expand_grid({"kind": "x", "a": []}) == []


def test_empty_grid_plans_nothing():
    assert plan_cells(config(conditions=[])) == []
    assert plan_cells(config(conditions=[{"kind": "style", "level": []}])) == []


def test_two_by_three_grid_rows(artifacts):
    cells = plan_cells(config())
    assert [c.kind for c in cells] == ["clean"] + ["image-attack"] * 6
    two = plan_cells(config(datasets={"d": "data", "e": "data"}))
    assert len(two) == 2 * 7 and sum(c.kind == "clean" for c in two) == 2
    assert len({c.seed for c in two}) == len(two)
    models = plan_cells(config(models={"m": "a", "n": "b"},
                               conditions=[{"kind": "image-attack", "epsilon": [0.01, 0.05, 0.1]}]))
    assert sum(c.kind == "image-attack" for c in models) == 6 and sum(c.kind == "clean" for c in models) == 2


def test_unknown_condition_kind():
    with pytest.raises(ValidationError, match="unknown condition"):
        plan_cells(config(conditions=[{"kind": "laser"}]))


# -- running -------------------------------------------------------------------

def test_empty_grid_report_is_header_only(artifacts):
    report = run_matrix(config(conditions=[]), base_dir=artifacts)
    assert report.to_csv() == ",".join(COLUMNS) + "\n"


def test_matrix_rows_and_determinism(artifacts):
    cfg = config()
    a = run_matrix(cfg, base_dir=artifacts)
    assert len(a.rows) == 7 and a.n_errors == 0
    assert a.rows[0].condition == "clean" and a.rows[0].n == 40
    b = run_matrix(cfg, base_dir=artifacts, workers=3)
    assert strip_timing(a.to_csv()) == strip_timing(b.to_csv())
    assert a.to_csv(drop=("wall_time",)) == strip_timing(a.to_csv())
    c = run_matrix(cfg, seed=4, base_dir=artifacts)
    assert [r.seed for r in c.rows] != [r.seed for r in a.rows] and c.config["seed"] == 4


@pytest.mark.parametrize("condition", [
    {"kind": "text-attack", "method": "viper", "viper_p": 0.3},
    {"kind": "resize", "attack": "fgsm", "epsilon": 0.1},
    {"kind": "trigger", "modality": "image", "size": 13},
    {"kind": "swap", "modality": "image", "direction": ["fake_gets_real", "real_gets_fake"]},
    {"kind": "mismatch"},
    {"kind": "style", "level": ["identity", "posterize-2", "invert"]},
], ids=lambda c: c["kind"])
def test_every_condition_kind_runs(artifacts, condition):
    report = run_matrix(config(conditions=[condition]), base_dir=artifacts)
    assert report.n_errors == 0, [r.error for r in report.rows]
    assert all(r.n > 0 for r in report.rows)


def test_failures_are_confined_to_their_rows(artifacts):
    cfg = config(models={"m": "model.ckpt", "gone": "missing.ckpt"},
                 conditions=[{"kind": "style", "level": ["identity", "sepia"]}])
    report = run_matrix(cfg, base_dir=artifacts)
    by_model = {m: [r for r in report.rows if r.model == m] for m in ("m", "gone")}
    assert all(r.error for r in by_model["gone"])
    assert [bool(r.error) for r in by_model["m"]] == [False, False, True]
    assert "sepia" in by_model["m"][-1].error


def test_workers_must_be_positive(artifacts):
    with pytest.raises(ValidationError):
        run_matrix(config(), workers=0, base_dir=artifacts)


# -- report files --------------------------------------------------------------

def test_report_write_and_read(tmp_path):
    rows = [scored_row("m", "d", "clean", {"b": 1, "a": 0.5}, [1, 1, 0, 0], [1, 0, 0, 0], seed=9, wall_time=1.5),
            EvalRow("m", "d", "style", {}, seed=9, error="ValidationError: nope")]
    csv_path, json_path = EvalReport(rows, {"version": 1}).write(tmp_path)
    recs = read_csv(csv_path)
    assert list(recs[0]) == [c for c in COLUMNS if c != "wall_time"]
    assert recs[0]["params"] == '{"a":0.5,"b":1}'
    assert recs[0]["accuracy"] == "0.75" and recs[0]["precision"] == "0.5" and recs[0]["recall"] == "1.0"
    assert recs[1]["accuracy"] == "" and recs[1]["error"] == "ValidationError: nope"
    assert json.loads(json_path.read_text())["errors"] == 1


def test_metric_columns_agree_with_counts():
    row = scored_row("m", "d", "c", {}, [1, 0, 1, 1, 0], [1, 1, 0, 1, 0], seed=0)
    assert (row.n, row.correct) == (5, 3)
    assert row.precision == pytest.approx(2 / 3) and row.recall == pytest.approx(2 / 3)
    assert row.f1 == pytest.approx(2 / 3)
    assert scored_row("m", "d", "c", {}, [0, 0], [0, 0], seed=0).precision is None
    with pytest.raises(ValidationError):
        scored_row("m", "d", "c", {}, [0], [0, 1], seed=0)


def test_strip_timing_drops_only_wall_time():
    text = EvalReport([EvalRow("m", "d", "clean", n=2, correct=1, wall_time=3.0)]).to_csv()
    header = next(csv.reader(io.StringIO(strip_timing(text))))
    assert header == [c for c in COLUMNS if c != "wall_time"]
    assert strip_timing("") == ""


# -- projection ----------------------------------------------------------------

def test_pca_of_three_collinear_points():
    coords, var = pca_2d(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    np.testing.assert_allclose(coords[:, 0], [-np.sqrt(2), 0, np.sqrt(2)], atol=1e-12)
    np.testing.assert_allclose(coords[:, 1], 0, atol=1e-12)
    np.testing.assert_allclose(var, [2.0, 0.0], atol=1e-12)


def test_pca_of_identical_points_is_origin():
    coords, var = pca_2d(np.ones((5, 4)))
    np.testing.assert_array_equal(coords, 0)
    np.testing.assert_array_equal(var, 0)


def test_pca_sign_convention(rng):
    x = rng.normal(size=(20, 5))
    a, _ = pca_2d(x)
    b, _ = pca_2d(-x)
    np.testing.assert_allclose(np.abs(a), np.abs(b), atol=1e-10)
    c, _ = pca_2d(x[::-1])
    np.testing.assert_allclose(c, a[::-1], atol=1e-10)


def test_projection_needs_three_samples(tiny_model, tiny_corpus):
    with pytest.raises(ValidationError, match="at least 3"):
        feature_projection(tiny_model, tiny_corpus.subset([0, 1]))


def test_projection_csv(tiny_model, tiny_corpus, tmp_path):
    ds = tiny_corpus.subset(range(10))
    mask = np.zeros(10, bool)
    mask[2] = True
    proj = feature_projection(tiny_model, ds, mask)
    proj.write_csv(tmp_path / "p.csv")
    recs = list(csv.DictReader(open(tmp_path / "p.csv")))
    assert [r["id"] for r in recs] == [s.id for s in ds] and recs[2]["poisoned"] == "1"
    with pytest.raises(ValidationError):
        feature_projection(tiny_model, ds, np.zeros(3, bool))


@pytest.mark.slow
def test_text_backdoor_blurs_text_class_separation(zoo, clean_model, test_set):
    trigger = TriggerSpec("text", token="well")
    poisoned, _ = zoo.poisoned(trigger, 0.5)
    triggered = stamp_dataset(test_set, trigger)
    clean_sep = feature_projection(clean_model, triggered).separation()
    poisoned_sep = feature_projection(poisoned, triggered).separation()
    assert poisoned_sep < clean_sep
