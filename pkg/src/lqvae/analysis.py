"""Analytics for the binary latent quantizer: threshold calibration,
per-bit flip probabilities under bounded latent perturbations, binomial
k-flip curves, and empirical flip histograms / latent-distance overlap
statistics measured on trained models.

All analytic formulas assume the standard-Normal latent prior.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .model.quantizers import hard_quantize


class AnalysisError(Exception):
    pass


def gaussian_mass(eta):
    """Standard-Normal probability of the symmetric interval [-eta, eta]."""
    if eta < 0:
        raise AnalysisError("eta must be non-negative")
    return math.erf(eta / math.sqrt(2.0))


def _phi(x):
    """Standard-Normal CDF."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def calibrate_eta(target_mass):
    """Bisect for the threshold whose symmetric interval carries the
    requested prior mass; target 0.5 gives the median split 0.67449."""
    if not 0.0 < target_mass < 1.0:
        raise AnalysisError("target mass must lie strictly in (0, 1)")
    lo, hi = 0.0, 1.0
    while gaussian_mass(hi) < target_mass:
        hi *= 2.0
    while hi - lo > 1e-15:
        mid = 0.5 * (lo + hi)
        if gaussian_mass(mid) < target_mass:
            lo = mid
        else:
            hi = mid
    eta = 0.5 * (lo + hi)
    if abs(gaussian_mass(eta) - target_mass) > 1e-10:
        raise AnalysisError("bisection failed to converge")
    return eta


def flip_probability(eta, delta_z_abs):
    """Probability that one quantized bit flips when its latent moves by
    a fixed shift of magnitude delta_z_abs: the prior mass of
    [eta - |dz|, eta + |dz|]."""
    if eta <= 0:
        raise AnalysisError("eta must be positive")
    if delta_z_abs < 0:
        raise AnalysisError("delta_z_abs must be non-negative")
    return _phi(eta + delta_z_abs) - _phi(eta - delta_z_abs)


def k_flip_probability(latent_dim, k, p):
    """Binomial pmf C(M,k) p^k (1-p)^(M-k), evaluated in log space."""
    m, k = int(latent_dim), int(k)
    if not 0 <= k <= m:
        raise AnalysisError(f"k must lie in [0, {m}], got {k}")
    if not 0.0 <= p <= 1.0:
        raise AnalysisError("p must lie in [0, 1]")
    if p == 0.0:
        return 1.0 if k == 0 else 0.0
    if p == 1.0:
        return 1.0 if k == m else 0.0
    log_comb = (
        math.lgamma(m + 1) - math.lgamma(k + 1) - math.lgamma(m - k + 1)
    )
    return math.exp(log_comb + k * math.log(p) + (m - k) * math.log1p(-p))


def delta_z_bound(lipschitz_k, delta_abs):
    """Latent perturbation bound |dz| = K * |d| for a K-Lipschitz encoder."""
    if lipschitz_k <= 0:
        raise AnalysisError("Lipschitz constant must be positive")
    if delta_abs < 0:
        raise AnalysisError("input perturbation bound must be non-negative")
    return lipschitz_k * delta_abs


@dataclass
class FlipAnalysis:
    """Analytic flip profile of an M-bit quantized latent under a
    bounded latent shift."""

    eta: float
    delta_z: float
    flip_prob: float
    latent_dim: int
    k_flip_probs: np.ndarray

    def to_json(self):
        return json.dumps(
            {
                "eta": self.eta,
                "delta_z": self.delta_z,
                "flip_prob": self.flip_prob,
                "latent_dim": self.latent_dim,
                "k_flip_probs": [float(v) for v in self.k_flip_probs],
            },
            sort_keys=True,
        )


def analyze_flips(eta, delta_z_abs, latent_dim):
    """Full analytic profile: per-bit p plus the binomial curve over k."""
    p = flip_probability(eta, delta_z_abs)
    curve = np.array(
        [k_flip_probability(latent_dim, k, p) for k in range(latent_dim + 1)]
    )
    return FlipAnalysis(
        eta=float(eta),
        delta_z=float(delta_z_abs),
        flip_prob=p,
        latent_dim=int(latent_dim),
        k_flip_probs=curve,
    )


def monte_carlo_flip_check(eta, delta_z_abs, trials, seed=0):
    """Empirical per-bit flip frequency: draw latents from N(0,1) and
    count the samples a worst-case-signed shift of magnitude delta_z
    carries across the threshold.  The lower-threshold crossing folds
    onto the upper tail by the prior's symmetry, so crossing the upper
    threshold alone realizes both flip events of the analytic formula
    and the frequency estimates flip_probability(eta, delta_z_abs)."""
    if trials < 1:
        raise AnalysisError("trials must be >= 1")
    if delta_z_abs < 0:
        raise AnalysisError("delta_z_abs must be non-negative")
    if delta_z_abs == 0.0:
        return 0.0
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(int(trials))
    # the shift toward the threshold crosses it iff the gap is within dz
    crossed = np.abs(z - eta) <= delta_z_abs
    return float(crossed.mean())


@dataclass
class BitFlipHistogram:
    """Per-sample Hamming distances between clean and adversarial hard
    codes, with per-flip-count frequencies and classifier accuracy."""

    latent_dim: int
    flip_counts: np.ndarray  # per sample, in [0, M]
    frequencies: np.ndarray  # indexed by flip count, sums to 1
    accuracies: np.ndarray  # per flip count; nan when bucket empty or no clf
    fraction_at_most: dict = field(default_factory=dict)

    def rows(self):
        return [
            (k, float(self.frequencies[k]), float(self.accuracies[k]))
            for k in range(self.latent_dim + 1)
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["flip_count", "frequency", "accuracy"])
            for row in self.rows():
                w.writerow(row)

    def to_json(self):
        return json.dumps(
            {
                "latent_dim": self.latent_dim,
                "frequencies": [float(v) for v in self.frequencies],
                "accuracies": [
                    None if math.isnan(v) else float(v) for v in self.accuracies
                ],
                "fraction_at_most": self.fraction_at_most,
            },
            sort_keys=True,
        )


def _images_of(data):
    return np.asarray(getattr(data, "images", data), dtype=np.float64)


def _encode_mu(model, images, batch_size=256):
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model.encode(Tensor(images[s : s + batch_size])).mu.data)
    return np.concatenate(out)


def empirical_flip_histogram(
    model, clean_set, adv_set, labels=None, classifier=None
):
    """Hamming distance between hard_quantize(mu(x)) and
    hard_quantize(mu(x_adv)) for paired samples, bucketed by flip count.
    With a classifier supplied (plus labels), each bucket also reports
    accuracy on the defended adversarial samples in it."""
    clean = _images_of(clean_set)
    adv = _images_of(adv_set)
    if len(clean) != len(adv):
        raise AnalysisError(
            f"paired sets differ in length: {len(clean)} vs {len(adv)}"
        )
    if labels is None:
        labels = getattr(adv_set, "labels", None)

    codes_clean = hard_quantize(_encode_mu(model, clean), model.eta)
    codes_adv = hard_quantize(_encode_mu(model, adv), model.eta)
    m = codes_clean.shape[1]
    flips = (codes_clean != codes_adv).sum(axis=1)

    freq = np.bincount(flips, minlength=m + 1) / len(clean)
    acc = np.full(m + 1, np.nan)
    if classifier is not None and labels is not None:
        preds = classifier.predict(model.defend(adv))
        correct = preds == np.asarray(labels)
        for k in range(m + 1):
            mask = flips == k
            if mask.any():
                acc[k] = float(correct[mask].mean())

    # 6 bits and 10% of M are the two small-flip buckets of interest
    summary = {
        "<=6_bits": float((flips <= 6).mean()),
        "<=10pct": float((flips <= m // 10).mean()),
    }
    return BitFlipHistogram(
        latent_dim=m,
        flip_counts=flips,
        frequencies=freq,
        accuracies=acc,
        fraction_at_most=summary,
    )


def latent_overlap_stats(model, clean_set, adv_set):
    """Distance statistics between paired clean/adversarial latent means,
    and the fraction of adversarial embeddings whose nearest clean
    embedding is their own counterpart."""
    clean = _images_of(clean_set)
    adv = _images_of(adv_set)
    if len(clean) != len(adv):
        raise AnalysisError(
            f"paired sets differ in length: {len(clean)} vs {len(adv)}"
        )
    mu_clean = _encode_mu(model, clean)
    mu_adv = _encode_mu(model, adv)
    dists = np.linalg.norm(mu_clean - mu_adv, axis=1)
    cross = np.linalg.norm(
        mu_adv[:, None, :] - mu_clean[None, :, :], axis=2
    )
    nearest = np.argmin(cross, axis=1)
    return {
        "n_pairs": int(len(clean)),
        "mean_distance": float(dists.mean()),
        "median_distance": float(np.median(dists)),
        "p95_distance": float(np.percentile(dists, 95)),
        "max_distance": float(dists.max()),
        "nearest_self_fraction": float(
            (nearest == np.arange(len(clean))).mean()
        ),
    }
