"""Gradient-based attacks: FGSM, iterative FGSM (BIM), PGD with random
start, DeepFool, Carlini-Wagner l2, and the end-to-end BPDA attack on
the defended pipeline."""

from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, grad, mul, no_grad, relu, tanh, tsum
from .autodiff.optim import Adam
from .classifiers import cross_entropy
from .model.quantizers import soft_quantize_ste

GRADIENT_FAMILIES = ("fgsm", "bim", "pgd_madry")


class AttackError(Exception):
    pass


@dataclass
class AttackConfig:
    family: str = "fgsm"
    epsilon: float = 0.3
    step_size: float = None  # defaults to epsilon / 10
    iterations: int = 40
    norm: str = "linf"
    targeted: bool = False
    target_class: int = None
    clip_range: tuple = (0.0, 1.0)
    cw_confidence: float = 0.0
    cw_initial_const: float = 1e-2
    cw_search_steps: int = 9
    cw_inner_steps: int = 200
    cw_lr: float = 5e-2
    deepfool_overshoot: float = 0.02
    deepfool_max_iter: int = 50
    bpda_soft_c: float = 0.1
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is None:
            self.step_size = self.epsilon / 10 if self.epsilon > 0 else 0.0


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    true_labels: np.ndarray
    perturbation_norms: np.ndarray
    attack_success: np.ndarray  # w.r.t. the attacked classifier
    config: dict = field(default_factory=dict)
    zero_grad_warning: bool = False


def _finish(clf, x, adv, y, cfg, extra=None):
    lo, hi = cfg.clip_range
    adv = np.clip(adv, lo, hi)
    if cfg.norm == "linf":
        norms = np.abs(adv - x).reshape(len(x), -1).max(axis=1)
    else:
        norms = np.linalg.norm((adv - x).reshape(len(x), -1), axis=1)
    preds = clf.predict(adv)
    if cfg.targeted:
        success = preds == cfg.target_class
    else:
        success = preds != y
    meta = asdict(cfg)
    meta["clip_range"] = list(cfg.clip_range)
    if extra:
        meta.update(extra)
    return AdversarialBatch(
        originals=x.copy(),
        adversarials=adv,
        true_labels=np.asarray(y),
        perturbation_norms=norms,
        attack_success=success,
        config=meta,
    )


def _loss_grad(logits_fn, x, y, cfg):
    """Per-sample input gradient of the classification loss."""
    xt = Tensor(x, requires_grad=True)
    target = np.full(len(x), cfg.target_class) if cfg.targeted else y
    loss = cross_entropy(logits_fn(xt), target)
    (g,) = grad(loss, [xt])
    return -g.data if cfg.targeted else g.data


def fgsm(classifier, x, y, epsilon, config=None, logits_fn=None):
    """One signed-gradient step of size epsilon."""
    cfg = config or AttackConfig(family="fgsm", epsilon=epsilon)
    x = np.asarray(x, dtype=np.float64)
    logits_fn = logits_fn or classifier.logits
    g = _loss_grad(logits_fn, x, y, cfg)
    flat = g.reshape(len(x), -1)
    dead = np.all(flat == 0.0, axis=1)
    adv = x + epsilon * np.sign(g)
    adv[dead] = x[dead]  # no gradient signal: return unchanged, flag it
    batch = _finish(classifier, x, adv, y, cfg)
    batch.zero_grad_warning = bool(dead.any())
    return batch


def bim(classifier, x, y, epsilon, alpha, iters, config=None, logits_fn=None,
        start=None):
    """Iterated FGSM with projection onto the l-inf ball and clip range."""
    if alpha <= 0:
        raise ValueError("step size alpha must be positive")
    cfg = config or AttackConfig(
        family="bim", epsilon=epsilon, step_size=alpha, iterations=iters
    )
    x = np.asarray(x, dtype=np.float64)
    logits_fn = logits_fn or classifier.logits
    lo, hi = cfg.clip_range
    adv = x.copy() if start is None else np.asarray(start, dtype=np.float64)
    any_dead = False
    for _ in range(iters):
        g = _loss_grad(logits_fn, adv, y, cfg)
        any_dead = any_dead or bool(
            np.all(g.reshape(len(x), -1) == 0.0, axis=1).any()
        )
        adv = adv + alpha * np.sign(g)
        adv = np.clip(adv, x - epsilon, x + epsilon)
        adv = np.clip(adv, lo, hi)
    batch = _finish(classifier, x, adv, y, cfg)
    batch.zero_grad_warning = any_dead
    return batch


def pgd_madry(classifier, x, y, epsilon, alpha, iters, random_start=True,
              config=None, logits_fn=None):
    """BIM with a uniform random start inside the epsilon ball."""
    cfg = config or AttackConfig(
        family="pgd_madry", epsilon=epsilon, step_size=alpha, iterations=iters,
        random_start=random_start,
    )
    x = np.asarray(x, dtype=np.float64)
    start = None
    if random_start:
        rng = np.random.default_rng(cfg.seed)
        lo, hi = cfg.clip_range
        start = np.clip(x + rng.uniform(-epsilon, epsilon, x.shape), lo, hi)
    return bim(classifier, x, y, epsilon, alpha, iters, config=cfg,
               logits_fn=logits_fn, start=start)


def deepfool(classifier, x, y=None, max_iter=50, overshoot=0.02, config=None):
    """Iterative minimal-l2 projection onto the nearest decision boundary.

    Samples already misclassified relative to the classifier's own
    prediction never move; samples whose label never changes within
    max_iter are returned unperturbed and flagged unsuccessful.
    """
    cfg = config or AttackConfig(
        family="deepfool", epsilon=0.0, norm="l2",
        deepfool_max_iter=max_iter, deepfool_overshoot=overshoot,
    )
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    lo, hi = cfg.clip_range
    with no_grad():
        orig_pred = classifier.predict(x)
    r_total = np.zeros_like(x)
    active = np.ones(n, dtype=bool)
    if y is not None:
        # already-misclassified samples need no work at all
        active &= orig_pred == np.asarray(y)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        cur = np.clip(x[idx] + (1 + overshoot) * r_total[idx], lo, hi)
        xt = Tensor(cur, requires_grad=True)
        logits = classifier.logits(xt)
        preds = np.argmax(logits.data, axis=1)
        done = preds != orig_pred[idx]
        active[idx[done]] = False
        live = np.flatnonzero(~done)
        if len(live) == 0:
            continue

        n_classes = logits.shape[1]
        grads = []
        for j in range(n_classes):
            (gj,) = grad(tsum(logits[:, j]), [xt])
            grads.append(gj.data)
        grads = np.stack(grads)  # (K, B, ...)

        for row in live:
            sample = idx[row]
            k0 = orig_pred[sample]
            best_ratio, best_r = np.inf, None
            for j in range(n_classes):
                if j == k0:
                    continue
                w = grads[j, row] - grads[k0, row]
                fdiff = logits.data[row, j] - logits.data[row, k0]
                wn = np.linalg.norm(w)
                if wn < 1e-12:
                    continue
                ratio = abs(fdiff) / wn
                if ratio < best_ratio:
                    best_ratio = ratio
                    best_r = (abs(fdiff) + 1e-8) / (wn**2) * w
            if best_r is not None:
                r_total[sample] += best_r

    adv = np.clip(x + (1 + overshoot) * r_total, lo, hi)
    moved = np.any((adv - x).reshape(n, -1) != 0, axis=1)
    with no_grad():
        failed = moved & (classifier.predict(adv) == orig_pred)
    adv[failed] = x[failed]
    return _finish(classifier, x, adv, orig_pred if y is None else np.asarray(y), cfg)


def cw_l2(classifier, x, y, config=None):
    """Carlini-Wagner l2: tanh change of variables, Adam inner loop,
    binary search over the trade-off constant."""
    cfg = config or AttackConfig(family="cw_l2", epsilon=0.0, norm="l2")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    kappa = cfg.cw_confidence

    x_c = np.clip(x, 1e-6, 1 - 1e-6)
    w_orig = np.arctanh(2 * x_c - 1)

    const = np.full(n, cfg.cw_initial_const)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    best_adv = x.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    for _ in range(cfg.cw_search_steps):
        w = Tensor(w_orig.copy(), requires_grad=True)
        opt = Adam([w], lr=cfg.cw_lr)
        found_at_const = np.zeros(n, dtype=bool)
        for _ in range(cfg.cw_inner_steps):
            adv_t = 0.5 * (tanh(w) + 1.0)
            diff = adv_t - Tensor(x)
            l2 = tsum(mul(diff, diff))
            logits = classifier.logits(adv_t)
            z = logits.data

            # track the best successful iterate before stepping
            preds = np.argmax(z, axis=1)
            succ = preds != y
            cur_l2 = np.linalg.norm((adv_t.data - x).reshape(n, -1), axis=1)
            better = succ & (cur_l2 < best_l2)
            best_l2[better] = cur_l2[better]
            best_adv[better] = adv_t.data[better]
            found |= better
            found_at_const |= succ

            masked = z.copy()
            masked[rows, y] = -np.inf
            j_star = np.argmax(masked, axis=1)
            # hinge on the margin Z_y - max_{j != y} Z_j
            margin = logits[rows, y] - logits[rows, j_star]
            hinge = relu(margin + kappa)
            obj = l2 + tsum(mul(Tensor(const), hinge))
            (gw,) = grad(obj, [w])
            opt.step([gw])

        upper[found_at_const] = np.minimum(upper[found_at_const], const[found_at_const])
        lower[~found_at_const] = const[~found_at_const]
        const = np.where(np.isfinite(upper), (lower + upper) / 2, const * 10)

    batch = _finish(classifier, x, best_adv, y, cfg)
    batch.attack_success = found & batch.attack_success
    return batch


def defended_logits_fn(model, classifier, soft_c):
    """Logits of classifier(decoder(hard_quantize(mu(x)))) where the
    backward pass substitutes the soft surrogate for the quantizer."""
    if soft_c <= 0:
        raise ValueError("bpda surrogate requires soft_c > 0")

    def logits_fn(xt, train=False, rng=None):
        mu = model.encode(xt).mu
        z = soft_quantize_ste(mu, model.eta, soft_c)
        rec = model.decode_hard(z)
        return classifier.logits(rec)

    return logits_fn


def bpda_attack(model, classifier, x, y, inner=None, soft_c=None):
    """End-to-end white-box attack on the defended pipeline via BPDA."""
    inner = inner or AttackConfig(family="fgsm", epsilon=0.3)
    if inner.family not in GRADIENT_FAMILIES:
        raise AttackError(
            f"bpda inner attack must be gradient-based ({'/'.join(GRADIENT_FAMILIES)}), "
            f"got '{inner.family}'"
        )
    soft_c = inner.bpda_soft_c if soft_c is None else soft_c
    logits_fn = defended_logits_fn(model, classifier, soft_c)
    extra = {"family": "bpda", "inner_family": inner.family, "bpda_soft_c": soft_c}

    if inner.family == "fgsm":
        batch = fgsm(classifier, x, y, inner.epsilon, config=inner, logits_fn=logits_fn)
    elif inner.family == "bim":
        batch = bim(classifier, x, y, inner.epsilon, inner.step_size,
                    inner.iterations, config=inner, logits_fn=logits_fn)
    else:
        batch = pgd_madry(classifier, x, y, inner.epsilon, inner.step_size,
                          inner.iterations, random_start=inner.random_start,
                          config=inner, logits_fn=logits_fn)
    batch.config.update(extra)
    return batch


def run_attack(config, classifier, x, y, model=None):
    """Dispatch an attack family from its config."""
    fam = config.family
    if fam == "fgsm":
        return fgsm(classifier, x, y, config.epsilon, config=config)
    if fam == "bim":
        return bim(classifier, x, y, config.epsilon, config.step_size,
                   config.iterations, config=config)
    if fam == "pgd_madry":
        return pgd_madry(classifier, x, y, config.epsilon, config.step_size,
                         config.iterations, random_start=config.random_start,
                         config=config)
    if fam == "deepfool":
        return deepfool(classifier, x, y=y, max_iter=config.deepfool_max_iter,
                        overshoot=config.deepfool_overshoot, config=config)
    if fam == "cw_l2":
        return cw_l2(classifier, x, y, config=config)
    if fam == "bpda":
        if model is None:
            raise AttackError("bpda attack requires a trained defense model")
        inner = AttackConfig(
            family="fgsm", epsilon=config.epsilon, clip_range=config.clip_range,
            bpda_soft_c=config.bpda_soft_c, seed=config.seed,
        )
        return bpda_attack(model, classifier, x, y, inner=inner,
                           soft_c=config.bpda_soft_c)
    raise AttackError(f"unknown attack family '{fam}'")
