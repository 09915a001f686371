"""Generator evaluation: proxy accuracy, reverse accuracy, Fréchet distance.

The proxy classifier is trained once per experiment on the real training
splits of all categories and then frozen; generated samples are judged by
whether the proxy assigns them their conditioning category. Reverse accuracy
flips the roles: a fresh classifier of the same architecture and budget is
trained purely on generated samples and scored on real held-out data.

Distributional distance is the Fréchet distance between Gaussian fits of
embedding statistics: embeddings are the proxy's penultimate-layer
activations for image data, and the raw points themselves in planar mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledSet, TaskSchedule, draw_batch
from .errors import AccuracyFloorError, MetricsError, ShapeError
from .models import (INIT_STD, Architecture, ModelParams, bind, classifier_forward,
                     generator_forward, onehot, trunk)
from .numerics import Graph, backward
from .numerics import engine as eg
from .numerics.rng import Rng
from .strategies import AdamState, adam_step


@dataclass(frozen=True)
class ProxyConfig:
    steps: int = 1500
    learning_rate: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    accuracy_floor: float = 0.95


@dataclass
class ProxyClassifier:
    """Frozen real-data classifier; its penultimate layer is the embedding."""

    arch: Architecture
    params: dict
    test_accuracy: float

    @property
    def embed_dim(self) -> int:
        if self.arch.canvas is None:
            return self.arch.out_dim
        return self.arch.trunk_hidden[-1]


def _init_classifier(arch: Architecture, rng: Rng) -> dict:
    """Trunk plus category head, drawn in layer order (same std as the models)."""
    params = {}
    prev = arch.out_dim
    for i, width in enumerate(arch.trunk_hidden):
        params[f"d.fc{i}.w"] = rng.gaussian((prev, width)) * INIT_STD
        params[f"d.fc{i}.b"] = np.zeros(width)
        prev = width
    params["c.head.w"] = rng.gaussian((prev, arch.n_categories)) * INIT_STD
    params["c.head.b"] = np.zeros(arch.n_categories)
    return params


def _pool(sets: list) -> LabeledSet:
    return LabeledSet(np.concatenate([s.samples for s in sets]),
                      np.concatenate([s.labels for s in sets]))


def _fit_classifier(arch: Architecture, pool: LabeledSet, cfg: ProxyConfig,
                    init_rng: Rng, data_rng: Rng) -> dict:
    params = _init_classifier(arch, init_rng)
    opt = AdamState(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for _ in range(cfg.steps):
        x, y = draw_batch(pool, cfg.batch_size, data_rng)
        g = Graph()
        bound = bind(g, params)
        logits = classifier_forward(g, bound, bound, arch, g.tensor(x))
        loss = eg.softmax_cross_entropy(logits, onehot(g, y, arch.n_categories))
        keys = list(bound)
        grads = {k: t.value for k, t in zip(keys, backward(loss, [bound[k] for k in keys]))}
        adam_step(params, grads, opt, cfg.learning_rate)
    return params


def _predict(arch: Architecture, params: dict, samples: np.ndarray) -> np.ndarray:
    g = Graph()
    bound = bind(g, params)
    logits = classifier_forward(g, bound, bound, arch, g.tensor(samples))
    return np.argmax(logits.value, axis=1) + 1  # categories are 1-based


def _per_category_accuracy(arch: Architecture, params: dict, sets: list) -> dict:
    out = {}
    for s in sets:
        cat = int(s.labels[0])
        out[cat] = float(np.mean(_predict(arch, params, s.samples) == cat))
    return out


def train_proxy(schedule: TaskSchedule, cfg: ProxyConfig = ProxyConfig(),
                seed: int = 0) -> ProxyClassifier:
    """Fit the proxy on the pooled real training splits of all categories.

    Aborts with AccuracyFloorError if mean test accuracy falls below the
    configured floor: an unreliable proxy must not judge generators.
    """
    arch = Architecture(n_categories=schedule.n_tasks, latent_dim=1,
                        canvas=schedule.canvas)
    root = Rng(seed)
    params = _fit_classifier(arch, _pool(schedule.train), cfg,
                             root.split("proxy/init"), root.split("proxy/data"))
    per = _per_category_accuracy(arch, params, schedule.test)
    acc = float(np.mean(list(per.values())))
    if acc < cfg.accuracy_floor:
        raise AccuracyFloorError(
            f"proxy test accuracy {acc:.4f} below required floor {cfg.accuracy_floor}")
    return ProxyClassifier(arch, params, acc)


def classify(proxy: ProxyClassifier, samples: np.ndarray) -> np.ndarray:
    """Predicted categories (1-based) for flat samples (N, D)."""
    return _predict(proxy.arch, proxy.params, samples)


def embed(proxy: ProxyClassifier, samples: np.ndarray) -> np.ndarray:
    """Embedding batch: penultimate activations, or the points themselves in
    planar mode."""
    if proxy.arch.canvas is None:
        return np.asarray(samples, dtype=np.float64)
    g = Graph()
    bound = bind(g, proxy.params)
    return trunk(g, bound, proxy.arch, g.tensor(samples)).value


def _generator_sampler(params: ModelParams):
    def sampler(category: int, n: int, rng: Rng) -> np.ndarray:
        z = rng.gaussian((n, params.arch.latent_dim))
        out = generator_forward(params, z, np.full(n, category, dtype=np.int64), mode="eval")
        return out.value.reshape(n, -1)
    return sampler


def accuracy_of_sampler(sampler, categories, proxy: ProxyClassifier, n_per_category: int,
                        rng: Rng) -> tuple:
    """Per-category and unweighted mean proxy accuracy of sampler(c, n, rng).

    Categories are visited in the given order, each drawing its own samples
    from the shared rng."""
    per = {}
    for c in categories:
        samples = sampler(int(c), n_per_category, rng)
        per[int(c)] = float(np.mean(classify(proxy, samples) == int(c)))
    return per, float(np.mean(list(per.values())))


def accuracy(gen_params: ModelParams, categories, proxy: ProxyClassifier,
             n_per_category: int, rng: Rng) -> tuple:
    """Fraction of generated samples classified as their conditioning category."""
    return accuracy_of_sampler(_generator_sampler(gen_params), categories, proxy,
                               n_per_category, rng)


def reverse_accuracy_of_sampler(sampler, schedule: TaskSchedule,
                                cfg: ProxyConfig = ProxyConfig(), seed: int = 0,
                                n_per_category: int | None = None) -> float:
    """Train a fresh classifier on sampler output, score it on real test data.

    The classifier matches the proxy's architecture and training budget; the
    generated training set has n_per_category samples per category (defaults
    to the real per-category training size).
    """
    arch = Architecture(n_categories=schedule.n_tasks, latent_dim=1,
                        canvas=schedule.canvas)
    n = n_per_category if n_per_category is not None else len(schedule.train[0])
    root = Rng(seed)
    gen_rng = root.split("reverse/gen")
    sets = []
    for c in range(1, schedule.n_tasks + 1):
        samples = sampler(c, n, gen_rng)
        sets.append(LabeledSet(samples, np.full(n, c, dtype=np.int64)))
    params = _fit_classifier(arch, _pool(sets), cfg,
                             root.split("reverse/init"), root.split("reverse/data"))
    per = _per_category_accuracy(arch, params, schedule.test)
    return float(np.mean(list(per.values())))


def reverse_accuracy(gen_params: ModelParams, schedule: TaskSchedule,
                     cfg: ProxyConfig = ProxyConfig(), seed: int = 0,
                     n_per_category: int | None = None) -> float:
    return reverse_accuracy_of_sampler(_generator_sampler(gen_params), schedule,
                                       cfg, seed, n_per_category)


# ---------------------------------------------------------------------------
# Fréchet distance

@dataclass
class GaussianStats:
    """Mean and unbiased covariance of an embedding sample set."""

    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("gaussian_stats", x.shape, detail="need (n >= 2, dim)")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, cov, x.shape[0])


def matrix_sqrt_psd(sigma: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-tol, 0) are clamped to zero, tol scaling with the
    spectrum; asymmetry or a genuinely negative eigenvalue is an error.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError("matrix_sqrt_psd", s.shape, detail="square matrix required")
    scale = max(1.0, float(np.abs(s).max()))
    if float(np.abs(s - s.T).max()) > 1e-8 * scale:
        raise MetricsError("matrix_sqrt_psd: input is not symmetric within tolerance")
    w, v = np.linalg.eigh((s + s.T) / 2.0)
    tol = 1e-10 * max(1.0, float(w[-1]))
    if w[0] < -tol:
        raise MetricsError(
            f"matrix_sqrt_psd: eigenvalue {w[0]} below clamp threshold {-tol}")
    root = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
    return (root + root.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)), with the
    cross term computed symmetrically as tr sqrt(S_a cov_b S_a) for
    S_a = sqrt(cov_a), which keeps the square-root argument symmetric PSD.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ShapeError("frechet_distance", a.cov.shape, b.cov.shape)
    sa = matrix_sqrt_psd(a.cov)
    cross = matrix_sqrt_psd(sa @ b.cov @ sa)
    gap = a.mean - b.mean
    d2 = float(gap @ gap + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def make_evaluator(proxy: ProxyClassifier, schedule: TaskSchedule, run_seed: int,
                   n_samples: int = 256):
    """Evaluation callback for the training loop.

    At each call it generates n_samples per category (all categories, seen or
    not, ascending, each drawing fresh latents from a stream named by the
    global iteration), then emits per-category proxy accuracy and Fréchet
    distance against the real test embeddings, plus the mean accuracy over
    the categories seen so far.
    """
    real_stats = {c: gaussian_stats(embed(proxy, schedule.test[c - 1].samples))
                  for c in range(1, schedule.n_tasks + 1)}

    def evaluator(params: ModelParams, t: int, global_iter: int):
        rng = Rng(run_seed).split(f"eval/g{global_iter}")
        sampler = _generator_sampler(params)
        rows = []
        seen = []
        for c in range(1, schedule.n_tasks + 1):
            samples = sampler(c, n_samples, rng)
            acc_c = float(np.mean(classify(proxy, samples) == c))
            fd_c = frechet_distance(gaussian_stats(embed(proxy, samples)), real_stats[c])
            rows.append(("acc", c, acc_c))
            rows.append(("fd", c, fd_c))
            if c <= t:
                seen.append(acc_c)
        rows.append(("acc_mean", None, float(np.mean(seen))))
        return rows

    return evaluator
