"""Evaluation-grid protocols: completeness, determinism, error cells,
and report emission."""

import json

import numpy as np
import pytest

from lqvae.attacks import AttackConfig
from lqvae.classifiers import ClassifierSpec, build_classifier, train_classifier
from lqvae.data import synthetic_manifold
from lqvae.harness import (
    EvalReport,
    ExperimentPlan,
    HarnessError,
    emit_report,
    load_report,
    run_blackbox,
    run_bpda,
    run_whitebox,
)
from tests.test_model import tiny_model


@pytest.fixture(scope="module")
def setup():
    train = synthetic_manifold(400, image_size=8, n_classes=4, seed=0)
    test = synthetic_manifold(80, image_size=8, n_classes=4, seed=1)
    clfs = {}
    for arch in ("A", "C"):
        clf = build_classifier(
            ClassifierSpec(arch, input_shape=(1, 8, 8), n_classes=4), seed=0)
        train_classifier(clf, train, epochs=4, seed=0)
        clfs[arch] = clf
    model = tiny_model(seed=0)
    return clfs, model, test


def fgsm_cfg(eps=0.2):
    return AttackConfig(family="fgsm", epsilon=eps)


def test_plan_validation():
    with pytest.raises(HarnessError, match="protocol"):
        ExperimentPlan(protocol="sidechannel")
    with pytest.raises(HarnessError, match="defense"):
        ExperimentPlan(protocol="whitebox", defenses=("magic",))


def test_whitebox_grid_complete(setup):
    clfs, model, test = setup
    plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),), seed=3)
    report = run_whitebox(plan, clfs["A"], test, model=model)
    # (none + fgsm) x (none + lqvae) defenses
    assert len(report.cells) == 4
    combos = {(c["attack"], c["defense"]) for c in report.cells}
    assert combos == {("none", "none"), ("none", "lqvae"),
                      ("fgsm", "none"), ("fgsm", "lqvae")}
    for c in report.cells:
        assert c["status"] == "ok"
        assert 0.0 <= c["accuracy"] <= 1.0
    clean = report.clean_accuracy["A"]
    none_cell = next(c for c in report.cells
                     if c["attack"] == "none" and c["defense"] == "none")
    assert none_cell["accuracy"] == clean


def test_whitebox_attack_lowers_undefended_accuracy(setup):
    clfs, model, test = setup
    plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(0.3),),
                          defenses=("none",), seed=0)
    report = run_whitebox(plan, clfs["A"], test)
    clean = report.clean_accuracy["A"]
    attacked = next(c for c in report.cells if c["attack"] == "fgsm")
    assert attacked["accuracy"] < clean


def test_whitebox_requires_model_for_defense(setup):
    clfs, _, test = setup
    plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),))
    with pytest.raises(HarnessError, match="model"):
        run_whitebox(plan, clfs["A"], test, model=None)


def test_whitebox_deterministic(setup):
    clfs, model, test = setup
    plan = ExperimentPlan(
        protocol="whitebox",
        attacks=(AttackConfig(family="pgd_madry", epsilon=0.2, iterations=3,
                              random_start=True),),
        seed=11,
    )
    a = run_whitebox(plan, clfs["A"], test, model=model)
    b = run_whitebox(plan, clfs["A"], test, model=model)
    assert json.dumps(a.to_dict(), sort_keys=True) == \
        json.dumps(b.to_dict(), sort_keys=True)


def test_whitebox_error_cells_recorded(setup):
    clfs, model, test = setup
    bad = AttackConfig(family="bpda", epsilon=0.2)  # needs a model
    plan = ExperimentPlan(protocol="whitebox", attacks=(bad,),
                          defenses=("none",), seed=0)
    report = run_whitebox(plan, clfs["A"], test)  # no model supplied
    cell = next(c for c in report.cells if c["attack"] == "bpda")
    assert cell["status"].startswith("error:")
    assert cell["accuracy"] is None


def test_blackbox_all_ordered_pairs(setup):
    clfs, model, test = setup
    plan = ExperimentPlan(protocol="blackbox", attacks=(fgsm_cfg(),), seed=0)
    report = run_blackbox(plan, clfs, test, model=model)
    pairs = {(c["target"], c["substitute"]) for c in report.cells
             if c["attack"] == "fgsm"}
    assert pairs == {("A", "C"), ("C", "A")}
    assert set(report.clean_accuracy) == {"A", "C"}


def test_blackbox_six_pairs_over_three_archs(setup):
    clfs, model, test = setup
    third = build_classifier(
        ClassifierSpec("B", input_shape=(1, 8, 8), n_classes=4), seed=0)
    all_clfs = {**clfs, "B": third}
    plan = ExperimentPlan(protocol="blackbox", attacks=(fgsm_cfg(),),
                          defenses=("none",), seed=0)
    report = run_blackbox(plan, all_clfs, test)
    pairs = {(c["target"], c["substitute"]) for c in report.cells
             if c["attack"] == "fgsm"}
    assert len(pairs) == 6
    assert all(t != s for t, s in pairs)


def test_blackbox_rejects_single_classifier(setup):
    clfs, _, test = setup
    plan = ExperimentPlan(protocol="blackbox", attacks=(fgsm_cfg(),),
                          defenses=("none",))
    with pytest.raises(HarnessError, match="two classifiers"):
        run_blackbox(plan, {"A": clfs["A"]}, test)


def test_blackbox_forced_same_pair_matches_whitebox(setup):
    clfs, _, test = setup
    plan = ExperimentPlan(protocol="blackbox", attacks=(fgsm_cfg(),),
                          defenses=("none",), seed=4)
    bb = run_blackbox(plan, {"A": clfs["A"]}, test, allow_same=True)
    wb = run_whitebox(
        ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),),
                       defenses=("none",), seed=4),
        clfs["A"], test)
    bb_cell = next(c for c in bb.cells if c["attack"] == "fgsm")
    wb_cell = next(c for c in wb.cells if c["attack"] == "fgsm")
    assert bb_cell["accuracy"] == wb_cell["accuracy"]


def test_bpda_soft_c_sweep_rows(setup):
    clfs, model, test = setup
    plan = ExperimentPlan(protocol="bpda", attacks=(fgsm_cfg(),),
                          bpda_soft_cs=(0.01, 0.1, 1.0), seed=0, n_eval=20)
    report = run_bpda(plan, clfs["A"], test, model)
    rows = [c for c in report.cells if c["attack"] == "bpda-fgsm"]
    assert [r["bpda_soft_c"] for r in rows] == [0.01, 0.1, 1.0]
    assert all(r["defense"] == "lqvae" for r in rows)


def test_bpda_requires_model(setup):
    clfs, _, test = setup
    plan = ExperimentPlan(protocol="bpda", attacks=(fgsm_cfg(),))
    with pytest.raises(HarnessError, match="model"):
        run_bpda(plan, clfs["A"], test, None)


def test_emit_report_round_trip(setup, tmp_path):
    clfs, model, test = setup
    plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),), seed=0,
                          n_eval=20)
    report = run_whitebox(plan, clfs["A"], test, model=model)
    json_path, csv_path = emit_report(report, tmp_path / "report.json")
    loaded = load_report(json_path)
    assert loaded == json.loads(json.dumps(report.to_dict()))
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert lines[0].startswith("attack,target,substitute,defense")
    assert len(lines) == len(report.cells) + 1


def test_emit_report_bit_identical_reruns(setup, tmp_path):
    clfs, model, test = setup
    texts = []
    for name in ("a.json", "b.json"):
        plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),),
                              seed=7, n_eval=20)
        report = run_whitebox(plan, clfs["A"], test, model=model)
        json_path, _ = emit_report(report, tmp_path / name)
        texts.append(open(json_path, "rb").read())
    assert texts[0] == texts[1]


def test_plot_accuracy_grid_renders(setup, tmp_path):
    from lqvae.plots import plot_accuracy_grid

    clfs, model, test = setup
    plan = ExperimentPlan(protocol="whitebox", attacks=(fgsm_cfg(),), seed=0,
                          n_eval=20)
    report = run_whitebox(plan, clfs["A"], test, model=model)
    path = tmp_path / "grid.png"
    plot_accuracy_grid(report, path)
    assert path.exists() and path.stat().st_size > 1000
