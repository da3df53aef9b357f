"""Evaluation protocols over (attack x classifier x defense) grids:
white-box attacks on the bare classifier, black-box transfer between
substitute/target pairs, and end-to-end white-box attacks through the
quantized defense.  Reports are deterministic JSON plus a CSV grid."""

import csv
import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .attacks import AttackConfig, bpda_attack, run_attack
from .classifiers import evaluate_accuracy


class HarnessError(Exception):
    pass


@dataclass
class ExperimentPlan:
    """One evaluation run: which protocol, which attacks, which seeds."""

    protocol: str  # whitebox | blackbox | bpda
    attacks: tuple = ()
    defenses: tuple = ("none", "lqvae")
    seed: int = 0
    n_eval: int = 0  # 0 = use the full evaluation set
    bpda_soft_cs: tuple = (0.1,)
    dataset: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.protocol not in ("whitebox", "blackbox", "bpda"):
            raise HarnessError(f"unknown protocol '{self.protocol}'")
        for d in self.defenses:
            if d not in ("none", "lqvae"):
                raise HarnessError(f"unknown defense '{d}'")


@dataclass
class EvalReport:
    protocol: str
    clean_accuracy: dict  # per classifier label, no attack / no defense
    cells: list  # dict rows: attack, target, substitute, defense, ...
    plan: dict
    seed: int
    version: str = __version__

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "clean_accuracy": self.clean_accuracy,
            "cells": self.cells,
            "plan": self.plan,
            "seed": self.seed,
            "version": self.version,
        }


def _plan_echo(plan):
    echo = dataclasses.asdict(plan)
    echo["attacks"] = [dataclasses.asdict(a) for a in plan.attacks]
    for a in echo["attacks"]:
        a["clip_range"] = list(a["clip_range"])
    echo["defenses"] = list(plan.defenses)
    echo["bpda_soft_cs"] = list(plan.bpda_soft_cs)
    return echo


def _eval_set(plan, dataset):
    if plan.n_eval and plan.n_eval < len(dataset):
        return dataset.subset(plan.n_eval, seed=plan.seed)
    return dataset


def _cell_seed(plan, index):
    return plan.seed ^ (index + 1)


def _accuracy_on(clf, images, labels, model, defense):
    if defense == "lqvae":
        if model is None:
            raise HarnessError("defense 'lqvae' requires a trained model")
        images = model.defend(images)
    preds = clf.predict(images)
    return float((preds == np.asarray(labels)).mean())


def _norm_stats(batch):
    norms = batch.perturbation_norms
    return {
        "mean_norm": float(norms.mean()),
        "max_norm": float(norms.max()),
    }


def _cells_for_batch(batch, target_label, substitute_label, attack_family,
                     target_clf, model, defenses, labels, seed):
    rows = []
    for defense in defenses:
        row = {
            "attack": attack_family,
            "target": target_label,
            "substitute": substitute_label,
            "defense": defense,
            "status": "ok",
            "seed": seed,
            "accuracy": _accuracy_on(
                target_clf, batch.adversarials, labels, model, defense
            ),
            "attack_success_rate": float(batch.attack_success.mean()),
            **_norm_stats(batch),
        }
        rows.append(row)
    return rows


def _error_cells(exc, target_label, substitute_label, attack_family,
                 defenses, seed):
    return [
        {
            "attack": attack_family,
            "target": target_label,
            "substitute": substitute_label,
            "defense": defense,
            "status": f"error: {exc}",
            "seed": seed,
            "accuracy": None,
            "attack_success_rate": None,
            "mean_norm": None,
            "max_norm": None,
        }
        for defense in defenses
    ]


def _clean_cells(label, clf, data, model, defenses, seed):
    rows = []
    for defense in defenses:
        rows.append(
            {
                "attack": "none",
                "target": label,
                "substitute": "",
                "defense": defense,
                "status": "ok",
                "seed": seed,
                "accuracy": _accuracy_on(
                    clf, data.images, data.labels, model, defense
                ),
                "attack_success_rate": 0.0,
                "mean_norm": 0.0,
                "max_norm": 0.0,
            }
        )
    return rows


def run_whitebox(plan, classifier, dataset, model=None):
    """Attacks crafted with the target's own gradients, evaluated with
    and without the quantized-reconstruction defense."""
    if "lqvae" in plan.defenses and model is None:
        raise HarnessError("whitebox plan with lqvae defense needs a model")
    data = _eval_set(plan, dataset)
    label = classifier.spec.architecture
    clean = evaluate_accuracy(classifier, data)
    cells = _clean_cells(label, classifier, data, model, plan.defenses,
                         plan.seed)
    for i, cfg in enumerate(plan.attacks):
        seed = _cell_seed(plan, i)
        cfg = dataclasses.replace(cfg, seed=seed)
        try:
            batch = run_attack(cfg, classifier, data.images, data.labels,
                               model=model)
            cells += _cells_for_batch(batch, label, "", cfg.family,
                                      classifier, model, plan.defenses,
                                      data.labels, seed)
        except Exception as exc:  # record the failure, keep the grid whole
            cells += _error_cells(exc, label, "", cfg.family, plan.defenses,
                                  seed)
    return EvalReport(
        protocol="whitebox",
        clean_accuracy={label: clean},
        cells=cells,
        plan=_plan_echo(plan),
        seed=plan.seed,
    )


def run_blackbox(plan, classifiers, dataset, model=None, allow_same=False):
    """Transfer attacks: adversaries are crafted against each substitute
    and evaluated on every other classifier (all ordered pairs)."""
    if "lqvae" in plan.defenses and model is None:
        raise HarnessError("blackbox plan with lqvae defense needs a model")
    labels_ = sorted(classifiers)
    if len(labels_) < 2 and not allow_same:
        raise HarnessError("blackbox protocol needs at least two classifiers")
    pairs = [
        (t, s)
        for t in labels_
        for s in labels_
        if allow_same or t != s
    ]
    for t, s in pairs:
        if t == s and not allow_same:
            raise HarnessError(
                "blackbox substitute must differ from the target"
            )
    data = _eval_set(plan, dataset)
    clean = {
        lab: evaluate_accuracy(classifiers[lab], data) for lab in labels_
    }
    cells = []
    for lab in labels_:
        cells += _clean_cells(lab, classifiers[lab], data, model,
                              plan.defenses, plan.seed)
    index = 0
    for target_label, sub_label in pairs:
        for cfg in plan.attacks:
            seed = _cell_seed(plan, index)
            index += 1
            cfg = dataclasses.replace(cfg, seed=seed)
            try:
                batch = run_attack(cfg, classifiers[sub_label], data.images,
                                   data.labels, model=model)
                cells += _cells_for_batch(
                    batch, target_label, sub_label, cfg.family,
                    classifiers[target_label], model, plan.defenses,
                    data.labels, seed)
            except Exception as exc:
                cells += _error_cells(exc, target_label, sub_label,
                                      cfg.family, plan.defenses, seed)
    return EvalReport(
        protocol="blackbox",
        clean_accuracy=clean,
        cells=cells,
        plan=_plan_echo(plan),
        seed=plan.seed,
    )


def run_bpda(plan, classifier, dataset, model):
    """End-to-end white-box attack through the defended pipeline, one
    grid row per surrogate sharpness constant."""
    if model is None:
        raise HarnessError("bpda protocol requires a trained model")
    data = _eval_set(plan, dataset)
    label = classifier.spec.architecture
    clean = evaluate_accuracy(classifier, data)
    cells = _clean_cells(label, classifier, data, model, ("lqvae",),
                         plan.seed)
    attacks = plan.attacks or (AttackConfig(family="fgsm", epsilon=0.3),)
    index = 0
    for cfg in attacks:
        for soft_c in plan.bpda_soft_cs:
            seed = _cell_seed(plan, index)
            index += 1
            inner = dataclasses.replace(cfg, seed=seed, bpda_soft_c=soft_c)
            try:
                batch = bpda_attack(model, classifier, data.images,
                                    data.labels, inner=inner, soft_c=soft_c)
                row = _cells_for_batch(
                    batch, label, "", f"bpda-{cfg.family}", classifier,
                    model, ("lqvae",), data.labels, seed)[0]
                row["bpda_soft_c"] = soft_c
                cells.append(row)
            except Exception as exc:
                row = _error_cells(exc, label, "", f"bpda-{cfg.family}",
                                   ("lqvae",), seed)[0]
                row["bpda_soft_c"] = soft_c
                cells.append(row)
    return EvalReport(
        protocol="bpda",
        clean_accuracy={label: clean},
        cells=cells,
        plan=_plan_echo(plan),
        seed=plan.seed,
    )


GRID_COLUMNS = (
    "attack",
    "target",
    "substitute",
    "defense",
    "accuracy",
    "attack_success_rate",
    "mean_norm",
    "max_norm",
    "status",
    "seed",
)


def emit_report(report, path):
    """Write the report as sorted-key JSON and its grid as CSV next to
    it; returns the pair of paths."""
    path = str(path)
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    csv_path = path[: -len(".json")] + ".csv" if path.endswith(".json") \
        else path + ".csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GRID_COLUMNS)
        for cell in report.cells:
            w.writerow([cell.get(k, "") for k in GRID_COLUMNS])
    return path, csv_path


def load_report(path):
    with open(path) as f:
        return json.load(f)
