"""Datasets and task schedules.

A task schedule is an ordered list of single-category labeled sets: task t
introduces category t (1-based). Samples are flat float64 rows in [-1, 1].

Glyphs: ten fixed 5x7 dot-matrix digit seeds, upscaled 2x nearest-neighbor to
10x14 and stamped on a 16x16 canvas (background -1, ink +1) with positional
jitter (cropped at the canvas edge), per-pixel sign flips, and clipped Gaussian
intensity noise. Draw order per sample: dx, dy, flip mask, noise; documented
because determinism is contractual.

Planar mode: per-category 2-D Gaussian mixtures for eyeballing the training
machinery without images.

IDX: the classic big-endian binary image/label format, magic 0x00000803 for
u8 image tensors and 0x00000801 for label vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CategoryError, DataFormatError, ShapeError
from .models import ModelParams, generator_forward
from .numerics.rng import Rng

GLYPH_ROWS = """
.###. ..#.. .###. ##### ...#. ####. ..##. ##### .###. .###.
#...# .##.. #...# ....# ..##. #.... .#... ....# #...# #...#
#...# .##.. ....# ...#. .#.#. ####. #.... ...#. #...# #...#
#...# ..#.. ...#. ..##. #..#. ....# ####. ..#.. .###. .####
#...# ..#.. ..#.. ....# ##### ....# #...# .###. #...# ....#
#...# ..#.. .#... #...# ...#. #...# #...# ..#.. #...# ...#.
.###. ##### ##### .###. ...#. .###. .###. ..#.. .###. ###..
""".strip("\n")

# The ten seeds are drawn to balance ink mass (13-17 lit pixels each, against
# a 10-19 spread in a naive font): categories must differ by shape, not by
# global statistics a generator or classifier could latch onto.


def _parse_glyph_seeds() -> np.ndarray:
    rows = [line.split() for line in GLYPH_ROWS.splitlines()]
    seeds = np.zeros((10, 7, 5))
    for digit in range(10):
        for r in range(7):
            for c, ch in enumerate(rows[r][digit]):
                seeds[digit, r, c] = 1.0 if ch == "#" else 0.0
    return seeds


GLYPH_SEEDS = _parse_glyph_seeds()  # (10, 7, 5) binary masks


@dataclass
class LabeledSet:
    """Samples (N, D) in [-1, 1] and integer labels (N,)."""

    samples: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ShapeError("labeled_set", self.samples.shape, self.labels.shape)

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class TaskSchedule:
    """Ordered single-category tasks plus matching held-out test sets.

    Task t (1-based) introduces category t; every set is category-pure."""

    train: list
    test: list
    canvas: tuple | None

    def __post_init__(self):
        if len(self.train) != len(self.test) or not self.train:
            raise CategoryError("schedule needs matching non-empty train/test task lists")
        for t, (tr, te) in enumerate(zip(self.train, self.test), start=1):
            for part in (tr, te):
                if len(part) == 0:
                    raise CategoryError(f"task {t} has an empty sample set")
                if not np.all(part.labels == t):
                    raise CategoryError(f"task {t} set is not category-pure")

    @property
    def n_tasks(self) -> int:
        return len(self.train)

    @property
    def sample_dim(self) -> int:
        return self.train[0].samples.shape[1]


@dataclass(frozen=True)
class GlyphSpec:
    n_categories: int = 5
    canvas: int = 16
    upscale: int = 2
    max_shift: int = 2
    flip_prob: float = 0.02
    noise_sigma: float = 0.05


def _render_glyphs(spec: GlyphSpec, digit: int, n: int, rng: Rng) -> np.ndarray:
    seed = GLYPH_SEEDS[digit]
    glyph = np.kron(seed, np.ones((spec.upscale, spec.upscale)))  # nearest-neighbor upscale
    gh, gw = glyph.shape
    cv = spec.canvas
    base_r, base_c = (cv - gh) // 2, (cv - gw) // 2
    out = np.full((n, cv, cv), -1.0)
    s = spec.max_shift
    dx = rng.categories(n, -s, s)
    dy = rng.categories(n, -s, s)
    for i in range(n):
        r0, c0 = base_r + int(dy[i]), base_c + int(dx[i])
        rs, cs = max(r0, 0), max(c0, 0)
        re, ce = min(r0 + gh, cv), min(c0 + gw, cv)
        patch = glyph[rs - r0:re - r0, cs - c0:ce - c0]
        out[i, rs:re, cs:ce] = np.where(patch > 0, 1.0, -1.0)
    if spec.flip_prob > 0:
        flips = rng.uniforms(n * cv * cv).reshape(n, cv, cv) < spec.flip_prob
        out[flips] *= -1.0
    if spec.noise_sigma > 0:
        out += spec.noise_sigma * rng.gaussian((n, cv, cv))
        np.clip(out, -1.0, 1.0, out=out)
    return out.reshape(n, cv * cv)


def make_glyph_tasks(spec: GlyphSpec, n_train: int, n_test: int, seed: int) -> TaskSchedule:
    """Categories 1..M are digits 0..M-1. Each category draws from its own
    seed-derived stream, so schedules with different M share samples."""
    if not 1 <= spec.n_categories <= 10:
        raise CategoryError(f"glyph schedule supports 1..10 categories, got {spec.n_categories}")
    root = Rng(seed)
    train, test = [], []
    for cat in range(1, spec.n_categories + 1):
        stream = root.split(f"glyphs/cat{cat}")
        samples = _render_glyphs(spec, cat - 1, n_train + n_test, stream)
        labels = np.full(n_train + n_test, cat, dtype=np.int64)
        train.append(LabeledSet(samples[:n_train], labels[:n_train]))
        test.append(LabeledSet(samples[n_train:], labels[n_train:]))
    return TaskSchedule(train, test, canvas=(spec.canvas, spec.canvas))


@dataclass(frozen=True)
class Gauss2DSpec:
    """One category of a planar mixture: component means, shared isotropic sigma."""

    means: tuple
    sigma: float
    weights: tuple | None = None  # uniform when None


def default_gauss2d_specs(n_categories: int, radius: float = 4.0, sigma: float = 0.3) -> list:
    """Single-component categories equally spaced on a circle."""
    specs = []
    for k in range(n_categories):
        angle = 2.0 * np.pi * k / n_categories
        specs.append(Gauss2DSpec(means=((radius * np.cos(angle), radius * np.sin(angle)),),
                                 sigma=sigma))
    return specs


def _sample_gauss2d(spec: Gauss2DSpec, n: int, rng: Rng) -> np.ndarray:
    means = np.asarray(spec.means, dtype=np.float64)
    k = means.shape[0]
    if spec.weights is None:
        comp = rng.categories(n, 0, k - 1)
    else:
        w = np.asarray(spec.weights, dtype=np.float64)
        edges = np.cumsum(w / w.sum())
        comp = np.searchsorted(edges, rng.uniforms(n), side="right")
        np.minimum(comp, k - 1, out=comp)
    return means[comp] + spec.sigma * rng.gaussian((n, 2))


def make_gauss2d_tasks(specs: list, n_train: int, n_test: int, seed: int) -> TaskSchedule:
    root = Rng(seed)
    train, test = [], []
    for cat, spec in enumerate(specs, start=1):
        stream = root.split(f"gauss2d/cat{cat}")
        samples = _sample_gauss2d(spec, n_train + n_test, stream)
        labels = np.full(n_train + n_test, cat, dtype=np.int64)
        train.append(LabeledSet(samples[:n_train], labels[:n_train]))
        test.append(LabeledSet(samples[n_train:], labels[n_train:]))
    return TaskSchedule(train, test, canvas=None)


# ---------------------------------------------------------------------------
# IDX binary format

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_u32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise DataFormatError(f"{path}: truncated at byte {offset}, expected a u32")
    return struct.unpack(">I", buf[offset:offset + 4])[0]


def _load_idx_file(path: str, magic: int, n_dims: int) -> tuple:
    with open(path, "rb") as f:
        buf = f.read()
    got = _read_u32(buf, 0, path)
    if got != magic:
        raise DataFormatError(
            f"{path}: bad magic at byte 0: expected 0x{magic:08x}, got 0x{got:08x}")
    dims = [_read_u32(buf, 4 + 4 * i, path) for i in range(n_dims)]
    header = 4 + 4 * n_dims
    count = int(np.prod(dims))
    if len(buf) - header != count:
        raise DataFormatError(
            f"{path}: payload at byte {header} has {len(buf) - header} bytes, "
            f"expected {count} for dims {dims}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)
    return data, dims


def _nn_resize(images: np.ndarray, canvas: int) -> np.ndarray:
    n, h, w = images.shape
    if (h, w) == (canvas, canvas):
        return images
    # fixed index map: src = (dst * src_size) // dst_size, integer math
    ri = (np.arange(canvas) * h) // canvas
    ci = (np.arange(canvas) * w) // canvas
    return images[:, ri][:, :, ci]


def load_idx(images_path: str, labels_path: str, canvas: int | None = None) -> LabeledSet:
    """Parse an IDX image/label file pair into a LabeledSet.

    Pixels map linearly [0, 255] -> [-1, 1]; an optional nearest-neighbor
    resize to (canvas, canvas) runs before the mapping. Labels are kept as
    stored (0-based); schedule assembly shifts them to 1-based categories.
    """
    images, idims = _load_idx_file(images_path, IDX_IMAGE_MAGIC, 3)
    labels, ldims = _load_idx_file(labels_path, IDX_LABEL_MAGIC, 1)
    if idims[0] != ldims[0]:
        raise DataFormatError(
            f"{images_path}: {idims[0]} images but {labels_path} has {ldims[0]} labels")
    if canvas:
        images = _nn_resize(images, canvas)
    flat = images.reshape(idims[0], -1).astype(np.float64) / 127.5 - 1.0
    return LabeledSet(flat, labels.astype(np.int64))


def make_idx_tasks(train: LabeledSet, test: LabeledSet, n_categories: int,
                   n_train: int | None = None, n_test: int | None = None) -> TaskSchedule:
    """Slice loaded IDX sets into a schedule: stored label d becomes category d+1."""
    canvas_dim = int(round(np.sqrt(train.samples.shape[1])))
    tr_list, te_list = [], []
    for cat in range(1, n_categories + 1):
        parts = []
        for src, limit in ((train, n_train), (test, n_test)):
            mask = src.labels == cat - 1
            samples = src.samples[mask]
            if limit is not None:
                samples = samples[:limit]
            if samples.shape[0] == 0:
                raise CategoryError(f"no samples for stored label {cat - 1}")
            parts.append(LabeledSet(samples, np.full(samples.shape[0], cat, dtype=np.int64)))
        tr_list.append(parts[0])
        te_list.append(parts[1])
    return TaskSchedule(tr_list, te_list, canvas=(canvas_dim, canvas_dim))


# ---------------------------------------------------------------------------


def draw_batch(task_set: LabeledSet, batch_size: int, rng: Rng) -> tuple:
    """Batch with replacement; one index draw per row."""
    idx = rng.categories(batch_size, 0, len(task_set) - 1)
    return task_set.samples[idx], task_set.labels[idx]


def replay_batch(snap: ModelParams, rng: Rng, batch_size: int, t: int) -> tuple:
    """Samples of previously seen categories from a frozen generator snapshot.

    z ~ N(0, I) then c ~ U{1..t-1}, drawn in that order; generation runs in
    eval mode. Returns (samples (B, D), labels (B,)) as plain arrays, already
    detached from any graph.
    """
    if t < 2:
        raise CategoryError(f"replay needs at least one completed task, got t={t}")
    z = rng.gaussian((batch_size, snap.arch.latent_dim))
    c = rng.categories(batch_size, 1, t - 1)
    out = generator_forward(snap, z, c, mode="eval")
    return out.value.reshape(batch_size, -1).copy(), c
