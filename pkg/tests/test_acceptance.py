"""End-to-end acceptance suite.

Three tiers:

* analytic — closed-form constants of the quantized-latent analysis,
  checked against independent oracles (quadrature, Monte Carlo,
  exact rational arithmetic);
* numerical — gradient correctness (first and second order) and the
  exact gradient isolation of the three-loss training dataflow;
* behavioral — a desk-scale training run (10k/2k synthetic images,
  16x16, 10 classes) whose defense metrics must clear directional
  thresholds: high clean accuracy, strong attack degradation without
  the defense, substantial recovery with it, black-box and
  gradient-approximation robustness, latent bit-flip sparsity, and a
  bounded empirical expansion ratio of the encoder.

The behavioral tier trains the full model and two convolutional
classifiers from scratch; the whole file runs in well under 30 CPU
minutes.
"""

import json
import math
import time
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from lqvae import autodiff as ad
from lqvae.analysis import (
    calibrate_eta,
    delta_z_bound,
    flip_probability,
    k_flip_probability,
    monte_carlo_flip_check,
)
from lqvae.attacks import AttackConfig, bpda_attack, cw_l2, deepfool, fgsm
from lqvae.autodiff import Tensor, grad, no_grad
from lqvae.classifiers import (
    ClassifierSpec,
    build_classifier,
    evaluate_accuracy,
    train_classifier,
)
from lqvae.data import synthetic_manifold
from lqvae.harness import ExperimentPlan, emit_report, run_whitebox
from lqvae.model import TrainConfig, build_model, compute_losses, train
from lqvae.model.quantizers import hard_quantize, soft_quantize
from lqvae.model.vae import lipschitz_penalty
from tests.test_attacks import affine_classifier
from tests.test_autodiff import UNARY_OPS, check_op, fd_grad
from tests.test_model import tiny_model


# --- analytic tier ---------------------------------------------------


def test_threshold_calibration_constant():
    t0 = time.time()
    eta = calibrate_eta(0.5)
    assert abs(eta - 0.67449) < 1e-4
    # independent oracle: the quantile function of the standard normal
    assert abs(eta - scipy.stats.norm.ppf(0.75)) < 1e-10
    assert time.time() - t0 < 1.0


def test_flip_probability_constant_and_monte_carlo():
    eta = calibrate_eta(0.5)
    p = flip_probability(eta, 0.03)
    assert abs(p - 0.01906) < 1e-4

    trials = 10**6
    p_mc = monte_carlo_flip_check(eta, 0.03, trials=trials, seed=0)
    se = math.sqrt(p * (1 - p) / trials)
    assert abs(p_mc - p) < 4 * se


def test_k_flip_probability_constant():
    got = k_flip_probability(64, 6, 0.01906)
    assert abs(got - 1.177e-3) < 2e-6
    # independent recomputation in exact rational arithmetic
    p = Fraction(1906, 100000)
    exact = Fraction(math.comb(64, 6)) * p**6 * (1 - p) ** 58
    assert abs(got - float(exact)) < 1e-12


def test_latent_shift_bound():
    assert delta_z_bound(0.1, 0.3) == 0.1 * 0.3
    assert abs(delta_z_bound(0.1, 0.3) - 0.03) < 1e-15


def test_soft_quantizer_sign_agrees_with_hard():
    rng = np.random.default_rng(0)
    eta = calibrate_eta(0.5)
    z = rng.normal(0.0, 1.5, 10**6)
    z = z[np.abs(np.abs(z) - eta) > 1e-12]
    h = hard_quantize(z, eta)
    for c in (0.01, 0.1, 1.0):
        s = soft_quantize(z, eta, c)
        assert np.array_equal(np.where(s >= 0, 1.0, -1.0), h)


# --- numerical tier --------------------------------------------------


def test_first_order_gradients_match_finite_differences():
    # 100 random cases per registered elementwise/reduction op, plus the
    # binary ops and matmul, all against central differences at 1e-4.
    rng = np.random.default_rng(123)
    for _, op, sampler in UNARY_OPS:
        for _ in range(100):
            check_op(op, sampler(rng, (3, 4)))
    for op in (ad.add, ad.mul, ad.div):
        for _ in range(100):
            a = rng.normal(size=(3, 4))
            b = rng.uniform(0.5, 2.0, size=(3, 4))
            check_op(lambda t: op(t, Tensor(b)), a)
            check_op(lambda t: op(Tensor(a), t), b)
    for _ in range(100):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_op(lambda t: ad.matmul(t, Tensor(b)), a)
        check_op(lambda t: ad.matmul(Tensor(a), t), b)


def test_second_order_penalty_gradient_matches_finite_differences():
    # The expansion penalty contains a gradient norm; its parameter
    # gradient therefore exercises double backprop.
    m = tiny_model(seed=3)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    u = rng.standard_normal((2, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)

    pen = lipschitz_penalty(m, Tensor(x), directions=u)
    params = m.encoder_params()[:4]
    grads = grad(pen, params, allow_unused=False)

    for p, pg in zip(params, grads):
        p0 = p.data.copy()

        def scalar(pa, p=p, p0=p0):
            p.data[:] = pa
            out = lipschitz_penalty(m, Tensor(x), directions=u).item()
            p.data[:] = p0
            return out

        fg = fd_grad(scalar, p0, h=1e-5)
        denom = max(np.abs(fg).max(), 1e-10)
        assert np.abs(pg.data - fg).max() / denom < 1e-3


def test_three_loss_gradient_isolation_is_exact():
    m = tiny_model(seed=2)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (4, 1, 8, 8))
    loss_f, loss_g, loss_h = compute_losses(m, x, rng)

    theta = m.encoder_params()
    phi = m.decoder1_params()
    psi = m.decoder2_params()

    for g in grad(loss_g, theta):
        assert np.all(g.data == 0.0)
    for g in grad(loss_h, phi):
        assert np.all(g.data == 0.0)
    for g in grad(loss_f, phi):
        assert np.all(g.data == 0.0)
    assert any(np.any(g.data != 0) for g in grad(loss_f, theta))
    assert any(np.any(g.data != 0) for g in grad(loss_g, phi))
    assert any(np.any(g.data != 0) for g in grad(loss_h, psi))


def test_attack_oracles_on_affine_classifier():
    rng = np.random.default_rng(0)
    w = rng.normal(size=16)
    w *= 3.0 / np.linalg.norm(w)
    clf = affine_classifier(w, 0.0, (1, 4, 4))
    x = rng.uniform(0.4, 0.6, (5, 1, 4, 4))
    eps = 0.05

    # one-step sign attack: x +/- eps * sign(w) depending on the label
    for y in (0, 1):
        labels = np.full(5, y)
        batch = fgsm(clf, x, labels, eps)
        want = np.clip(x + (1 if y == 0 else -1) * eps * np.sign(w).reshape(1, 1, 4, 4), 0, 1)
        assert np.abs(batch.adversarials - want).max() < 1e-6

    # minimal boundary projection, scaled by the overshoot
    overshoot = 0.02
    f = x.reshape(5, -1) @ w
    batch = deepfool(clf, x, max_iter=50, overshoot=overshoot)
    want = x - ((1 + overshoot) * f / (w @ w))[:, None, None, None] * w.reshape(1, 1, 4, 4)
    want = np.clip(want, 0, 1)
    rel = np.abs(batch.adversarials - want).max() / np.abs(want - x).max()
    assert rel < 1e-6


# --- behavioral tier (desk scale) ------------------------------------

IMG = 16
EVAL_N = 300


@pytest.fixture(scope="module")
def desk():
    """Train the defense model and two classifiers on the synthetic
    manifold, then precompute the shared attack batches."""
    train_set = synthetic_manifold(10000, image_size=IMG, n_classes=10, seed=0)
    test_set = synthetic_manifold(2000, image_size=IMG, n_classes=10, seed=1)
    sub = test_set.subset(EVAL_N, seed=0)

    model = build_model(
        arch="mlp", input_shape=(1, IMG, IMG), latent_dim=64, seed=0,
        hidden=(256, 128), lipschitz_k=0.1, soft_c=0.1,
    )
    train(model, train_set.images, TrainConfig(
        epochs=20, batch_size=64, seed=0,
        kl_weight=0.01, penalty_weight=25.0, input_noise=0.5,
    ))

    clf_a = build_classifier(ClassifierSpec("A", input_shape=(1, IMG, IMG)), seed=0)
    train_classifier(clf_a, train_set, epochs=4, seed=0)
    clf_b = build_classifier(ClassifierSpec("B", input_shape=(1, IMG, IMG)), seed=0)
    train_classifier(clf_b, train_set, epochs=4, seed=0)

    adv_fgsm = fgsm(clf_a, sub.images, sub.labels, 0.3).adversarials
    return SimpleNamespace(
        model=model, clf_a=clf_a, clf_b=clf_b,
        test_set=test_set, sub=sub, adv_fgsm=adv_fgsm,
    )


def _acc(clf, x, labels):
    return float((clf.predict(x) == labels).mean())


def test_desk_clean_and_one_step_attack_thresholds(desk):
    clean = evaluate_accuracy(desk.clf_a, desk.test_set)
    assert clean >= 0.95

    undefended = _acc(desk.clf_a, desk.adv_fgsm, desk.sub.labels)
    assert undefended <= 0.30

    defended = _acc(desk.clf_a, desk.model.defend(desk.adv_fgsm), desk.sub.labels)
    assert defended >= 0.70


def test_desk_minimal_perturbation_attack_thresholds(desk):
    batch = deepfool(desk.clf_a, desk.sub.images, y=desk.sub.labels)
    undefended = _acc(desk.clf_a, batch.adversarials, desk.sub.labels)
    defended = _acc(desk.clf_a, desk.model.defend(batch.adversarials), desk.sub.labels)
    assert undefended <= 0.25
    assert defended >= 0.65


def test_desk_optimization_attack_thresholds(desk):
    n = 150
    cfg = AttackConfig(family="cw_l2", norm="l2", cw_search_steps=5, cw_inner_steps=60)
    batch = cw_l2(desk.clf_a, desk.sub.images[:n], desk.sub.labels[:n], config=cfg)
    labels = desk.sub.labels[:n]
    undefended = _acc(desk.clf_a, batch.adversarials, labels)
    defended = _acc(desk.clf_a, desk.model.defend(batch.adversarials), labels)
    assert undefended <= 0.25
    assert defended >= 0.65


def test_desk_blackbox_transfer_recovery(desk):
    batch = fgsm(desk.clf_b, desk.sub.images, desk.sub.labels, 0.3)
    undefended = _acc(desk.clf_a, batch.adversarials, desk.sub.labels)
    defended = _acc(desk.clf_a, desk.model.defend(batch.adversarials), desk.sub.labels)
    assert defended - undefended >= 0.20


def test_desk_gradient_approximation_attack(desk):
    batch = bpda_attack(
        desk.model, desk.clf_a, desk.sub.images, desk.sub.labels,
        inner=AttackConfig(family="fgsm", epsilon=0.3), soft_c=0.1,
    )
    defended = _acc(desk.clf_a, desk.model.defend(batch.adversarials), desk.sub.labels)
    clean = evaluate_accuracy(desk.clf_a, desk.test_set)
    assert defended >= 0.55 * clean


def test_desk_adversarial_bit_flips_are_sparse(desk):
    with no_grad():
        mu_clean = desk.model.encode(Tensor(desk.sub.images)).mu.data
        mu_adv = desk.model.encode(Tensor(desk.adv_fgsm)).mu.data
    eta = desk.model.eta
    flips = (hard_quantize(mu_clean, eta) != hard_quantize(mu_adv, eta)).sum(axis=1)
    budget = int(0.10 * desk.model.latent_dim)  # 10% of 64 bits
    assert (flips <= budget).mean() >= 0.80


def test_desk_empirical_expansion_ratio(desk):
    rng = np.random.default_rng(0)
    x = desk.sub.images[:200]
    x2 = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    with no_grad():
        m1 = desk.model.encode(Tensor(x)).mu.data
        m2 = desk.model.encode(Tensor(x2)).mu.data
    ratio = np.linalg.norm(m1 - m2, axis=1) / np.linalg.norm(
        (x - x2).reshape(len(x), -1), axis=1
    )
    assert np.percentile(ratio, 99) <= 3 * desk.model.lipschitz_k


def test_desk_report_is_deterministic(desk, tmp_path):
    plan = ExperimentPlan(
        protocol="whitebox",
        attacks=(AttackConfig(family="fgsm", epsilon=0.3),),
        seed=7, n_eval=64,
    )
    paths = []
    for name in ("one.json", "two.json"):
        report = run_whitebox(plan, desk.clf_a, desk.test_set, model=desk.model)
        path, _ = emit_report(report, tmp_path / name)
        paths.append(path)
    a, b = (open(p, "rb").read() for p in paths)
    assert a == b
    assert json.loads(a)  # well-formed
