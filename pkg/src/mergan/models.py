"""Conditional generator and critic/classifier networks.

The generator conditions on the category only through categorical batch
normalization: each hidden dense layer is normalized with moments shared
across the whole batch, then shifted/scaled by per-category gamma/beta rows
selected from (M, F) banks. Selection is a onehot @ bank matmul so the whole
forward stays inside the differentiable op set. The critic and the auxiliary
classifier share every trunk layer and differ only in their heads; the critic
has no normalization anywhere.

Category ids are 1-based: c in {1..M}. Images travel as flat (B, H*W) rows
in [-1, 1]; the public generator op returns (B, 1, H, W) in canvas mode and
raw (B, 2) points in the planar mode (canvas=None, no output tanh).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CategoryError, ShapeError
from .numerics import engine as eg
from .numerics.engine import Graph, Tensor
from .numerics.rng import Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch
INIT_STD = 0.02


@dataclass(frozen=True)
class Architecture:
    n_categories: int
    latent_dim: int = 32
    gen_hidden: tuple = (128, 256)
    trunk_hidden: tuple = (256, 128)
    canvas: tuple | None = (16, 16)  # None: planar mode, generator outputs R^2

    @property
    def out_dim(self) -> int:
        return self.canvas[0] * self.canvas[1] if self.canvas else 2

    def to_meta(self) -> np.ndarray:
        h, w = self.canvas if self.canvas else (0, 0)
        vals = [self.n_categories, self.latent_dim, h, w,
                len(self.gen_hidden), *self.gen_hidden,
                len(self.trunk_hidden), *self.trunk_hidden]
        return np.asarray(vals, dtype=np.float64)

    @staticmethod
    def from_meta(meta: np.ndarray) -> "Architecture":
        vals = [int(v) for v in np.asarray(meta).reshape(-1)]
        m, latent, h, w = vals[:4]
        ng = vals[4]
        gen_hidden = tuple(vals[5:5 + ng])
        nt = vals[5 + ng]
        trunk = tuple(vals[6 + ng:6 + ng + nt])
        return Architecture(n_categories=m, latent_dim=latent, gen_hidden=gen_hidden,
                            trunk_hidden=trunk, canvas=(h, w) if h else None)


@dataclass
class ModelParams:
    """Parameter groups: gen (theta_G), disc (trunk + critic head, theta_D),
    cls (classifier head, theta_C), and the generator's running-stat buffers."""

    arch: Architecture
    gen: dict = field(default_factory=dict)
    gen_buffers: dict = field(default_factory=dict)
    disc: dict = field(default_factory=dict)
    cls: dict = field(default_factory=dict)

    def groups(self) -> dict:
        return {"gen": self.gen, "genbuf": self.gen_buffers, "disc": self.disc, "cls": self.cls}


def init_params(arch: Architecture, rng: Rng) -> ModelParams:
    """Gaussian(std 0.02) weights, zero biases, gamma 1 / beta 0 banks,
    running mean 0 / variance 1. Weight draws consume the rng in layer order:
    generator hidden layers, generator output, trunk layers, critic head,
    classifier head."""
    m = ModelParams(arch)
    M = arch.n_categories

    def dense(store, name, fan_in, fan_out):
        store[f"{name}.w"] = rng.gaussian((fan_in, fan_out)) * INIT_STD
        store[f"{name}.b"] = np.zeros(fan_out)

    prev = arch.latent_dim
    for i, width in enumerate(arch.gen_hidden):
        dense(m.gen, f"g.fc{i}", prev, width)
        m.gen[f"g.cbn{i}.gamma"] = np.ones((M, width))
        m.gen[f"g.cbn{i}.beta"] = np.zeros((M, width))
        m.gen_buffers[f"g.cbn{i}.rmean"] = np.zeros(width)
        m.gen_buffers[f"g.cbn{i}.rvar"] = np.ones(width)
        prev = width
    dense(m.gen, "g.out", prev, arch.out_dim)

    prev = arch.out_dim
    for i, width in enumerate(arch.trunk_hidden):
        dense(m.disc, f"d.fc{i}", prev, width)
        prev = width
    dense(m.disc, "d.head", prev, 1)
    dense(m.cls, "c.head", prev, M)
    return m


def snapshot(params: ModelParams) -> ModelParams:
    """Frozen deep copy: no aliasing with the live parameters, arrays read-only."""

    def freeze(d):
        out = {}
        for k, v in d.items():
            c = np.array(v, dtype=np.float64, copy=True)
            c.flags.writeable = False
            out[k] = c
        return out

    return ModelParams(params.arch, freeze(params.gen), freeze(params.gen_buffers),
                       freeze(params.disc), freeze(params.cls))


def bind(g: Graph, arrays: dict) -> dict:
    """Leaf tensors for a parameter dict; gradient eligibility is decided by
    which of these are later passed to backward()."""
    return {k: g.tensor(v) for k, v in arrays.items()}


def onehot(g: Graph, c: np.ndarray, n_categories: int) -> Tensor:
    """(B, M) one-hot constant for 1-based category ids; validates the range."""
    c = np.asarray(c)
    if c.ndim != 1 or c.size == 0:
        raise CategoryError(f"category batch must be a non-empty vector, got shape {c.shape}")
    if c.min() < 1 or c.max() > n_categories:
        raise CategoryError(
            f"category ids must lie in 1..{n_categories}, got range [{c.min()}, {c.max()}]")
    oh = np.zeros((c.size, n_categories))
    oh[np.arange(c.size), c.astype(int) - 1] = 1.0
    return g.tensor(oh)


def _cbn(g: Graph, gen_t: dict, buffers: dict, layer: int, h: Tensor, oh: Tensor,
         mode: str, update_stats: bool) -> Tensor:
    rmean_key, rvar_key = f"g.cbn{layer}.rmean", f"g.cbn{layer}.rvar"
    if mode == "train":
        mean = eg.reduce_mean(h, axis=0)
        centered = eg.sub(h, mean)
        var = eg.reduce_mean(eg.square(centered), axis=0)
        if update_stats:
            buffers[rmean_key] = BN_MOMENTUM * buffers[rmean_key] + (1 - BN_MOMENTUM) * mean.value
            buffers[rvar_key] = BN_MOMENTUM * buffers[rvar_key] + (1 - BN_MOMENTUM) * var.value
        denom = eg.sqrt(eg.add(var, g.tensor(np.full(var.shape, BN_EPS))))
        xhat = eg.divide(centered, denom)
    elif mode == "eval":
        rm = g.tensor(buffers[rmean_key])
        denom = g.tensor(np.sqrt(buffers[rvar_key] + BN_EPS))
        xhat = eg.divide(eg.sub(h, rm), denom)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    gamma = eg.matmul(oh, gen_t[f"g.cbn{layer}.gamma"])
    beta = eg.matmul(oh, gen_t[f"g.cbn{layer}.beta"])
    return eg.add(eg.mul(xhat, gamma), beta)


def generator_flat(g: Graph, gen_t: dict, buffers: dict, arch: Architecture,
                   z: Tensor, oh: Tensor, mode: str, update_stats: bool = False) -> Tensor:
    """Generator forward on bound tensors; returns flat (B, out_dim)."""
    if z.value.ndim != 2 or z.value.shape[1] != arch.latent_dim:
        raise ShapeError("generator", z.shape, detail=f"latent dim must be {arch.latent_dim}")
    h = z
    for i in range(len(arch.gen_hidden)):
        h = eg.add(eg.matmul(h, gen_t[f"g.fc{i}.w"]), gen_t[f"g.fc{i}.b"])
        h = _cbn(g, gen_t, buffers, i, h, oh, mode, update_stats)
        h = eg.leaky_relu(h)
    h = eg.add(eg.matmul(h, gen_t["g.out.w"]), gen_t["g.out.b"])
    if arch.canvas:
        h = eg.tanh(h)
    return h


def generator_forward(params: ModelParams, z: np.ndarray, c: np.ndarray, mode: str = "eval",
                      graph: Graph | None = None, update_stats: bool = False) -> Tensor:
    """Public generator op. Canvas mode returns (B, 1, H, W); planar (B, 2)."""
    g = graph if graph is not None else Graph()
    oh = onehot(g, c, params.arch.n_categories)
    z_t = g.tensor(z)
    if z_t.value.shape[0] != oh.value.shape[0]:
        raise ShapeError("generator", z_t.shape, oh.shape, detail="batch mismatch")
    flat = generator_flat(g, bind(g, params.gen), params.gen_buffers, params.arch,
                          z_t, oh, mode, update_stats)
    if params.arch.canvas:
        h, w = params.arch.canvas
        return eg.reshape(flat, (flat.value.shape[0], 1, h, w))
    return flat


def _flatten_input(x: Tensor, arch: Architecture) -> Tensor:
    if x.value.ndim > 2:
        x = eg.reshape(x, (x.value.shape[0], arch.out_dim))
    if x.value.ndim != 2 or x.value.shape[1] != arch.out_dim:
        raise ShapeError("trunk", x.shape, detail=f"expected trailing dim {arch.out_dim}")
    return x


def trunk(g: Graph, disc_t: dict, arch: Architecture, x: Tensor) -> Tensor:
    h = _flatten_input(x, arch)
    for i in range(len(arch.trunk_hidden)):
        h = eg.leaky_relu(eg.add(eg.matmul(h, disc_t[f"d.fc{i}.w"]), disc_t[f"d.fc{i}.b"]))
    return h


def critic_head(disc_t: dict, feats: Tensor) -> Tensor:
    scores = eg.add(eg.matmul(feats, disc_t["d.head.w"]), disc_t["d.head.b"])
    return eg.reshape(scores, (scores.value.shape[0],))


def classifier_head(cls_t: dict, feats: Tensor) -> Tensor:
    return eg.add(eg.matmul(feats, cls_t["c.head.w"]), cls_t["c.head.b"])


def discriminator_forward(g: Graph, disc_t: dict, arch: Architecture, x: Tensor) -> Tensor:
    """Critic scores, shape (B,)."""
    return critic_head(disc_t, trunk(g, disc_t, arch, x))


def classifier_forward(g: Graph, disc_t: dict, cls_t: dict, arch: Architecture, x: Tensor) -> Tensor:
    """Classifier logits, shape (B, M); trunk weights are shared with the critic."""
    return classifier_head(cls_t, trunk(g, disc_t, arch, x))


def dc_forward(g: Graph, disc_t: dict, cls_t: dict, arch: Architecture, x: Tensor):
    """(critic scores, classifier logits) with the shared trunk computed once."""
    feats = trunk(g, disc_t, arch, x)
    return critic_head(disc_t, feats), classifier_head(cls_t, feats)
