"""Training objectives.

Critic/generator losses follow the gradient-penalized Wasserstein formulation
with an auxiliary classifier: the critic maximizes the score gap between real
and generated batches subject to a unit-gradient-norm penalty at random
interpolates; the generator minimizes the negated critic score of its samples
plus, when a classifier is in play, the cross-entropy of the classifier on its
conditioned samples. The classifier itself is fit on real labeled samples.

Forgetting-prevention terms: a diagonal-Fisher quadratic penalty anchoring the
generator at its previous-task parameters, and a replay-alignment penalty tying
the live generator's eval-mode outputs to a frozen snapshot's at shared (z, c).

Every builder works on bound tensors inside a caller-supplied graph so terms
compose exactly: objectives are literal `add`s of the parts they report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CategoryError, ShapeError
from .models import (
    Architecture,
    ModelParams,
    bind,
    dc_forward,
    discriminator_forward,
    generator_flat,
    onehot,
)
from .numerics import engine as eg
from .numerics.engine import Graph, Tensor, backward
from .numerics.rng import Rng


@dataclass
class BoundModel:
    """One model's parameters bound into a graph as leaf tensors."""

    params: ModelParams
    gen: dict
    disc: dict
    cls: dict

    @property
    def arch(self) -> Architecture:
        return self.params.arch

    @property
    def buffers(self) -> dict:
        return self.params.gen_buffers


def bind_model(g: Graph, params: ModelParams) -> BoundModel:
    return BoundModel(params, bind(g, params.gen), bind(g, params.disc), bind(g, params.cls))


def loss_gan_generator(g: Graph, bm: BoundModel, z: Tensor, oh: Tensor,
                       mode: str = "train", update_stats: bool = False) -> Tensor:
    """Negated mean critic score of generated samples."""
    fake = generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, mode, update_stats)
    return eg.scale(eg.reduce_mean(discriminator_forward(g, bm.disc, bm.arch, fake)), -1.0)


def loss_cls_generator(g: Graph, bm: BoundModel, z: Tensor, oh: Tensor,
                       mode: str = "train", update_stats: bool = False) -> Tensor:
    """Classifier cross-entropy on generated samples, targets = conditioning categories."""
    fake = generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, mode, update_stats)
    logits = dc_forward(g, bm.disc, bm.cls, bm.arch, fake)[1]
    return eg.softmax_cross_entropy(logits, oh)


def generator_objective(g: Graph, bm: BoundModel, z: Tensor, oh: Tensor,
                        lambda_cls: float, use_cls: bool,
                        update_stats: bool = False) -> tuple[Tensor, dict]:
    """Generator GAN loss plus weighted classifier term, one shared forward."""
    fake = generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, "train", update_stats)
    if use_cls and lambda_cls > 0:
        scores, logits = dc_forward(g, bm.disc, bm.cls, bm.arch, fake)
        gan = eg.scale(eg.reduce_mean(scores), -1.0)
        ce = eg.softmax_cross_entropy(logits, oh)
        total = eg.add(gan, eg.scale(ce, lambda_cls))
        return total, {"loss_gan_g": float(gan.value), "loss_cls_g": float(ce.value)}
    gan = eg.scale(eg.reduce_mean(discriminator_forward(g, bm.disc, bm.arch, fake)), -1.0)
    return gan, {"loss_gan_g": float(gan.value)}


def gradient_penalty(g: Graph, bm: BoundModel, x_real: Tensor, x_fake: Tensor,
                     rng: Rng | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of (||d critic / d interpolate||_2 - 1)^2.

    Interpolates are eps*x_real + (1-eps)*x_fake with per-sample eps ~ U[0,1).
    Both inputs are treated as data: pass generated samples detached. The
    per-sample input gradient is built by a backward pass whose adjoints are
    ordinary graph nodes, so the penalty supports differentiation w.r.t. the
    critic parameters.
    """
    if x_real.shape != x_fake.shape:
        raise ShapeError("gradient_penalty", x_real.shape, x_fake.shape)
    b = x_real.value.shape[0]
    if eps is None:
        if rng is None:
            raise ValueError("gradient_penalty needs rng or explicit eps")
        eps = rng.uniforms(b)
    eps_t = g.tensor(np.asarray(eps, dtype=np.float64).reshape(b, 1))
    one = g.one()
    xhat = eg.add(eg.mul(eps_t, x_real), eg.mul(eg.sub(one, eps_t), x_fake))
    scores = discriminator_forward(g, bm.disc, bm.arch, xhat)
    # rows are independent (no cross-sample mixing in the critic), so the
    # gradient of the score sum is the stack of per-sample input gradients
    (grad_x,) = backward(eg.reduce_sum(scores), [xhat])
    norms = eg.l2norm_rows(grad_x)
    return eg.reduce_mean(eg.square(eg.sub(norms, one)))


def loss_gan_discriminator(g: Graph, bm: BoundModel, x_real: Tensor, z: Tensor, oh: Tensor,
                           rng: Rng | None, lambda_gp: float,
                           eps: np.ndarray | None = None,
                           update_stats: bool = False) -> Tensor:
    """Critic loss: mean D(fake) - mean D(real) + lambda_gp * gradient penalty.

    The generator is evaluated in train mode and detached: no gradient reaches
    its parameters through this loss.
    """
    fake = eg.detach(generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, "train", update_stats))
    loss = eg.sub(eg.reduce_mean(discriminator_forward(g, bm.disc, bm.arch, fake)),
                  eg.reduce_mean(discriminator_forward(g, bm.disc, bm.arch, x_real)))
    if lambda_gp > 0:
        loss = eg.add(loss, eg.scale(gradient_penalty(g, bm, x_real, fake, rng, eps), lambda_gp))
    return loss


def loss_cls_discriminator(g: Graph, bm: BoundModel, x: Tensor, labels: np.ndarray) -> Tensor:
    """Classifier cross-entropy on real labeled samples."""
    oh = onehot(g, labels, bm.arch.n_categories)
    logits = dc_forward(g, bm.disc, bm.cls, bm.arch, x)[1]
    return eg.softmax_cross_entropy(logits, oh)


def discriminator_objective(g: Graph, bm: BoundModel, x_real: Tensor, labels: np.ndarray | None,
                            z: Tensor, oh: Tensor, lambda_gp: float, lambda_cls: float,
                            use_cls: bool, rng: Rng | None = None,
                            eps: np.ndarray | None = None,
                            update_stats: bool = False) -> tuple[Tensor, dict]:
    """Critic loss plus weighted classifier term; trunk shared across heads."""
    fake = eg.detach(generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, "train", update_stats))
    if use_cls and lambda_cls > 0:
        if labels is None:
            raise CategoryError("classifier term requires labels for the real batch")
        scores_real, logits_real = dc_forward(g, bm.disc, bm.cls, bm.arch, x_real)
        ce = eg.softmax_cross_entropy(logits_real, onehot(g, labels, bm.arch.n_categories))
    else:
        scores_real, ce = discriminator_forward(g, bm.disc, bm.arch, x_real), None
    scores_fake = discriminator_forward(g, bm.disc, bm.arch, fake)
    wgan = eg.sub(eg.reduce_mean(scores_fake), eg.reduce_mean(scores_real))
    gp = gradient_penalty(g, bm, x_real, fake, rng, eps)
    gan = eg.add(wgan, eg.scale(gp, lambda_gp))
    terms = {"loss_gan_d": float(gan.value), "loss_gp": float(gp.value)}
    if ce is None:
        return gan, terms
    total = eg.add(gan, eg.scale(ce, lambda_cls))
    terms["loss_cls_d"] = float(ce.value)
    return total, terms


@dataclass
class FisherState:
    """Diagonal Fisher estimate and the generator parameters it anchors to."""

    fisher: dict
    anchor: dict
    n_samples: int
    n_categories: int


def estimate_fisher(params: ModelParams, n_seen: int, n_samples: int, rng: Rng) -> FisherState:
    """Diagonal empirical Fisher of the generator's GAN loss.

    Mean of squared single-sample gradients of -D(G(z, c)) w.r.t. theta_G,
    z ~ N(0, I), c ~ U{1..n_seen}, one (z, c) pair per sample drawn in that
    order. Forwards run in eval mode: single-sample batch moments are
    degenerate. The anchor is a copy of the current generator parameters.
    """
    if n_samples <= 0:
        raise ValueError("fisher estimation needs n_samples >= 1")
    if not 1 <= n_seen <= params.arch.n_categories:
        raise CategoryError(f"n_seen must lie in 1..{params.arch.n_categories}, got {n_seen}")
    keys = list(params.gen)
    acc = {k: np.zeros_like(params.gen[k]) for k in keys}
    for _ in range(n_samples):
        z = rng.gaussian((1, params.arch.latent_dim))
        c = rng.categories(1, 1, n_seen)
        g = Graph()
        bm = bind_model(g, params)
        loss = loss_gan_generator(g, bm, g.tensor(z), onehot(g, c, params.arch.n_categories),
                                  mode="eval")
        for k, grad in zip(keys, backward(loss, [bm.gen[k] for k in keys])):
            acc[k] += grad.value * grad.value
    fisher = {k: v / n_samples for k, v in acc.items()}
    anchor = {k: params.gen[k].copy() for k in keys}
    return FisherState(fisher, anchor, n_samples, n_seen)


def ewc_penalty(g: Graph, bm: BoundModel, fisher: FisherState, lam: float) -> Tensor:
    """(lam/2) * sum_i F_i (theta_i - anchor_i)^2 over generator parameters."""
    total = None
    for k, p in bm.gen.items():
        term = eg.reduce_sum(eg.mul(g.tensor(fisher.fisher[k]),
                                    eg.square(eg.sub(p, g.tensor(fisher.anchor[k])))))
        total = term if total is None else eg.add(total, term)
    return eg.scale(total, 0.5 * lam)


def replay_alignment_loss(g: Graph, bm: BoundModel, snap: ModelParams,
                          z: Tensor, c: np.ndarray) -> Tensor:
    """Total squared difference between live and snapshot generator outputs at
    shared (z, c), summed over the whole replay batch (every component of every
    sample), both generators in eval mode. c must come from previously seen
    categories; gradients flow only into the live generator.

    The reduction is a plain sum: each aligned output component contributes its
    own gradient 2*(live - frozen) at full strength, independent of batch size
    and image size. Averaging instead would scale the defense of old outputs
    down by the element count, and at the stock weight of 1e-3 the term would
    lose to the adversarial pressure on the shared weights and the old
    categories would fade within a few hundred iterations of a task switch."""
    oh = onehot(g, c, bm.arch.n_categories)
    live = generator_flat(g, bm.gen, bm.buffers, bm.arch, z, oh, "eval")
    frozen = generator_flat(g, bind(g, snap.gen), snap.gen_buffers, snap.arch, z, oh, "eval")
    return eg.reduce_sum(eg.square(eg.sub(live, frozen)))
