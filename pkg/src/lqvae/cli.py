"""Command-line interface: training, attacking, defending, evaluating,
and analytic tooling.  Every flag can also come from a YAML/JSON config
file; explicit flags override config values."""

import dataclasses
import json
import os
import sys

import click
import numpy as np
import yaml

from .analysis import (
    analyze_flips,
    calibrate_eta,
    delta_z_bound,
    empirical_flip_histogram,
    flip_probability,
    latent_overlap_stats,
    monte_carlo_flip_check,
)
from .attacks import AttackConfig, run_attack
from .checkpoint import (
    load_adversarial_batch,
    load_classifier,
    load_model,
    save_adversarial_batch,
    save_classifier,
    save_model,
)
from .classifiers import ClassifierSpec, build_classifier, train_classifier
from .data import load_idx_dir, synthetic_manifold
from .harness import (
    ExperimentPlan,
    emit_report,
    run_blackbox,
    run_bpda,
    run_whitebox,
)
from .model.vae import TrainConfig, build_model, train

DATA_DIR_ENV = "LQVAE_DATA_DIR"


def _load_config(path):
    if not path:
        return {}
    with open(path) as f:
        if path.endswith(".json"):
            return json.load(f) or {}
        return yaml.safe_load(f) or {}


def _merged(config_path, **flags):
    """Config-file values overridden by explicitly provided flags."""
    merged = dict(_load_config(config_path))
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged


def _load_dataset(data, split="train", image_size=16, n_classes=10,
                  n_samples=2000, seed=0):
    data = data or os.environ.get(DATA_DIR_ENV) or "synthetic"
    if data == "synthetic":
        return synthetic_manifold(
            n_samples, image_size=image_size, n_classes=n_classes,
            seed=seed if split == "train" else seed + 1,
        )
    return load_idx_dir(data, split=split)


@click.group()
def main():
    """Quantized-latent VAE adversarial filter toolkit."""


@main.command("train-vae")
@click.option("--data", default=None,
              help="IDX directory or 'synthetic' (default).")
@click.option("--config", "config_path", default=None,
              help="YAML/JSON config file.")
@click.option("--out", required=True, help="Checkpoint output path.")
@click.option("--arch", default=None, help="mlp | conv-desk | conv-full.")
@click.option("--latent-dim", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--eta", type=float, default=None)
@click.option("--lipschitz-k", type=float, default=None)
@click.option("--kl-weight", type=float, default=None)
@click.option("--penalty-weight", type=float, default=None)
@click.option("--input-noise", type=float, default=None,
              help="Gaussian jitter fed to the encoder during training.")
@click.option("--seed", type=int, default=None)
@click.option("--n-samples", type=int, default=None,
              help="Synthetic dataset size.")
@click.option("--image-size", type=int, default=None)
def train_vae_cmd(data, config_path, out, **flags):
    """Train the quantized-latent VAE on clean data."""
    cfg = _merged(config_path, data=data, **flags)
    seed = cfg.get("seed", 0)
    dataset = _load_dataset(
        cfg.get("data"), image_size=cfg.get("image_size", 16),
        n_samples=cfg.get("n_samples", 2000), seed=seed,
    )
    model = build_model(
        arch=cfg.get("arch", "mlp"),
        input_shape=dataset.images.shape[1:],
        latent_dim=cfg.get("latent_dim", 64),
        eta=cfg.get("eta", 0.67449),
        lipschitz_k=cfg.get("lipschitz_k", 0.1),
        seed=seed,
    )
    tc = TrainConfig(
        batch_size=cfg.get("batch_size", 64),
        learning_rate=cfg.get("learning_rate", 1e-3),
        epochs=cfg.get("epochs", 10),
        kl_weight=cfg.get("kl_weight", 1.0),
        penalty_weight=cfg.get("penalty_weight", 1.0),
        input_noise=cfg.get("input_noise", 0.0),
        seed=seed,
    )
    _, history = train(model, dataset.images, tc, log_every=1)
    save_model(out, model)
    click.echo(f"saved model to {out} "
               f"(final L_f={history[-1]['loss_f']:.4f})" if history
               else f"saved model to {out}")


@main.command("train-clf")
@click.option("--arch", type=click.Choice(["A", "B", "C"]), default=None)
@click.option("--scale", type=click.Choice(["full", "desk"]), default=None)
@click.option("--data", default=None)
@click.option("--config", "config_path", default=None)
@click.option("--out", required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--learning-rate", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--n-samples", type=int, default=None)
@click.option("--image-size", type=int, default=None)
@click.option("--n-classes", type=int, default=None)
def train_clf_cmd(config_path, out, **flags):
    """Train one of the three classifier architectures."""
    cfg = _merged(config_path, **flags)
    seed = cfg.get("seed", 0)
    dataset = _load_dataset(
        cfg.get("data"), image_size=cfg.get("image_size", 16),
        n_classes=cfg.get("n_classes", 10),
        n_samples=cfg.get("n_samples", 2000), seed=seed,
    )
    spec = ClassifierSpec(
        architecture=cfg.get("arch", "A"),
        input_shape=tuple(dataset.images.shape[1:]),
        n_classes=int(dataset.labels.max()) + 1,
        scale=cfg.get("scale", "desk"),
    )
    clf = build_classifier(spec, seed=seed)
    _, history = train_classifier(
        clf, dataset,
        epochs=cfg.get("epochs", 10),
        lr=cfg.get("learning_rate", 1e-3),
        batch_size=cfg.get("batch_size", 128),
        seed=seed, log_every=1,
    )
    save_classifier(out, clf)
    click.echo(
        f"saved classifier {spec.architecture} to {out} "
        f"(train acc {history[-1]['train_accuracy']:.4f})"
    )


_FAMILY_ALIASES = {"pgd": "pgd_madry", "cw": "cw_l2"}


@main.command("attack")
@click.option("--family", default=None,
              help="fgsm | bim | pgd | deepfool | cw | bpda.")
@click.option("--eps", type=float, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--step-size", type=float, default=None)
@click.option("--clf", "clf_path", required=True)
@click.option("--vae", "vae_path", default=None,
              help="Needed for the bpda family.")
@click.option("--data", default=None)
@click.option("--config", "config_path", default=None)
@click.option("--out", required=True)
@click.option("--n-samples", type=int, default=None)
@click.option("--seed", type=int, default=None)
def attack_cmd(config_path, clf_path, vae_path, out, **flags):
    """Generate an adversarial batch against a trained classifier."""
    cfg = _merged(config_path, **flags)
    clf = load_classifier(clf_path)
    model = load_model(vae_path) if vae_path else None
    h = clf.spec.input_shape[-1]
    dataset = _load_dataset(
        cfg.get("data"), split="test", image_size=h,
        n_classes=clf.spec.n_classes,
        n_samples=cfg.get("n_samples", 500), seed=cfg.get("seed", 0),
    )
    family = _FAMILY_ALIASES.get(cfg.get("family", "fgsm"),
                                 cfg.get("family", "fgsm"))
    acfg = AttackConfig(
        family=family,
        epsilon=cfg.get("eps", 0.3),
        step_size=cfg.get("step_size"),
        iterations=cfg.get("iterations", 40),
        norm="l2" if family in ("deepfool", "cw_l2") else "linf",
        seed=cfg.get("seed", 0),
    )
    batch = run_attack(acfg, clf, dataset.images, dataset.labels, model=model)
    save_adversarial_batch(out, batch)
    click.echo(
        f"saved {len(batch.adversarials)} adversarials to {out} "
        f"(success rate {batch.attack_success.mean():.3f})"
    )


@main.command("defend")
@click.option("--vae", "vae_path", required=True)
@click.option("--in", "in_path", required=True,
              help="Adversarial batch file.")
@click.option("--out", required=True)
def defend_cmd(vae_path, in_path, out):
    """Purify an adversarial batch through the quantized reconstruction."""
    model = load_model(vae_path)
    batch = load_adversarial_batch(in_path)
    defended = model.defend(batch.adversarials)
    np.savez(out, defended=defended, labels=batch.true_labels)
    click.echo(f"saved defended batch to {out}")


@main.command("eval")
@click.option("--protocol",
              type=click.Choice(["whitebox", "blackbox", "bpda"]),
              required=True)
@click.option("--plan", "plan_path", default=None,
              help="YAML/JSON plan file.")
@click.option("--clf", "clf_paths", multiple=True,
              help="Classifier checkpoint (repeatable for blackbox).")
@click.option("--vae", "vae_path", default=None)
@click.option("--data", default=None)
@click.option("--out", required=True, help="Report JSON path.")
@click.option("--figures/--no-figures", default=False,
              help="Also render accuracy-grid figures next to the report.")
@click.option("--seed", type=int, default=None)
@click.option("--n-eval", type=int, default=None)
def eval_cmd(protocol, plan_path, clf_paths, vae_path, data, out, figures,
             seed, n_eval):
    """Run an evaluation protocol and write JSON + CSV (and figures)."""
    raw = _load_config(plan_path)
    seed = seed if seed is not None else raw.get("seed", 0)
    attacks = tuple(
        AttackConfig(**{**a, "family": _FAMILY_ALIASES.get(
            a.get("family", "fgsm"), a.get("family", "fgsm"))})
        for a in raw.get("attacks", [{"family": "fgsm", "epsilon": 0.3}])
    )
    model = load_model(vae_path or raw.get("vae")) \
        if (vae_path or raw.get("vae")) else None
    defenses = tuple(raw.get("defenses", ("none", "lqvae") if model
                             else ("none",)))
    plan = ExperimentPlan(
        protocol=protocol,
        attacks=attacks,
        defenses=defenses,
        seed=seed,
        n_eval=n_eval if n_eval is not None else raw.get("n_eval", 0),
        bpda_soft_cs=tuple(raw.get("bpda_soft_cs", (0.1,))),
        dataset={"source": data or raw.get("data") or "synthetic"},
    )
    paths = list(clf_paths) or list(raw.get("classifiers", []))
    if not paths:
        raise click.UsageError("at least one --clf checkpoint is required")
    classifiers = {c.spec.architecture: c
                   for c in (load_classifier(p) for p in paths)}
    some_clf = next(iter(classifiers.values()))
    dataset = _load_dataset(
        data or raw.get("data"), split="test",
        image_size=some_clf.spec.input_shape[-1],
        n_classes=some_clf.spec.n_classes,
        n_samples=raw.get("n_samples", 500), seed=seed,
    )
    if protocol == "whitebox":
        report = run_whitebox(plan, some_clf, dataset, model=model)
    elif protocol == "blackbox":
        report = run_blackbox(plan, classifiers, dataset, model=model)
    else:
        report = run_bpda(plan, some_clf, dataset, model)
    json_path, csv_path = emit_report(report, out)
    click.echo(f"wrote {json_path} and {csv_path}")
    if figures:
        from .plots import plot_accuracy_grid

        fig_path = json_path.rsplit(".", 1)[0] + "_grid.png"
        plot_accuracy_grid(report, fig_path)
        click.echo(f"wrote {fig_path}")


@main.command("analyze")
@click.option("--mode",
              type=click.Choice(["flip-theory", "flip-hist", "overlap"]),
              required=True)
@click.option("--eta", type=float, default=0.67449)
@click.option("--delta", type=float, default=0.3,
              help="Input perturbation bound.")
@click.option("--k", "lipschitz_k", type=float, default=0.1)
@click.option("--m", "latent_dim", type=int, default=64)
@click.option("--trials", type=int, default=100_000)
@click.option("--vae", "vae_path", default=None)
@click.option("--clf", "clf_path", default=None)
@click.option("--adv", "adv_path", default=None,
              help="Adversarial batch file (flip-hist / overlap).")
@click.option("--out", default=None, help="JSON output path.")
@click.option("--csv", "csv_path", default=None,
              help="Histogram CSV path (flip-hist).")
@click.option("--figure", default=None, help="Figure output path.")
def analyze_cmd(mode, eta, delta, lipschitz_k, latent_dim, trials, vae_path,
                clf_path, adv_path, out, csv_path, figure):
    """Quantizer flip analytics: theory, measured histograms, overlap."""
    if mode == "flip-theory":
        dz = delta_z_bound(lipschitz_k, delta)
        fa = analyze_flips(eta, dz, latent_dim)
        mc = monte_carlo_flip_check(eta, dz, trials)
        record = json.loads(fa.to_json())
        record["monte_carlo_flip_prob"] = mc
        record["monte_carlo_trials"] = trials
        payload = json.dumps(record, sort_keys=True, indent=2)
        click.echo(payload if not out else f"p={fa.flip_prob:.5f}  "
                   f"p_mc={mc:.5f}  P[k=6]={fa.k_flip_probs[6]:.3e}")
        if out:
            with open(out, "w") as f:
                f.write(payload + "\n")
        if figure:
            from .plots import plot_k_flip_curve

            plot_k_flip_curve(fa, figure)
            click.echo(f"wrote {figure}")
        return

    if not (vae_path and adv_path):
        raise click.UsageError(f"mode {mode} requires --vae and --adv")
    model = load_model(vae_path)
    batch = load_adversarial_batch(adv_path)
    if mode == "overlap":
        stats = latent_overlap_stats(model, batch.originals,
                                     batch.adversarials)
        payload = json.dumps(stats, sort_keys=True, indent=2)
        click.echo(payload)
        if out:
            with open(out, "w") as f:
                f.write(payload + "\n")
        return

    clf = load_classifier(clf_path) if clf_path else None
    hist = empirical_flip_histogram(
        model, batch.originals, batch.adversarials,
        labels=batch.true_labels, classifier=clf,
    )
    click.echo(hist.to_json())
    if out:
        with open(out, "w") as f:
            f.write(hist.to_json() + "\n")
    if csv_path:
        hist.write_csv(csv_path)
        click.echo(f"wrote {csv_path}")
    if figure:
        from .plots import plot_flip_histogram

        plot_flip_histogram(hist, figure)
        click.echo(f"wrote {figure}")


@main.command("calibrate-eta")
@click.option("--target-mass", type=float, default=0.5,
              help="Prior mass of the inner quantizer interval.")
def calibrate_eta_cmd(target_mass):
    """Solve for the threshold carrying the requested prior mass."""
    eta = calibrate_eta(target_mass)
    click.echo(f"{eta:.10f}")


if __name__ == "__main__":
    main()
