"""Networks: architecture meta round-trip, initialization layout, categorical
batch norm, conditioning, trunk sharing, snapshots."""

import numpy as np
import pytest

from mergan.errors import CategoryError, ShapeError
from mergan.models import (BN_EPS, BN_MOMENTUM, INIT_STD, Architecture, ModelParams, bind,
                           classifier_forward, dc_forward, discriminator_forward,
                           generator_forward, init_params, onehot, snapshot, trunk)
from mergan.numerics import Graph
from mergan.numerics.rng import Rng

ARCH = Architecture(n_categories=4, latent_dim=6, gen_hidden=(8, 10), trunk_hidden=(12, 7),
                    canvas=(3, 5))
PLANAR = Architecture(n_categories=3, latent_dim=5, gen_hidden=(8,), trunk_hidden=(9,),
                      canvas=None)


def _params(arch=ARCH, seed=0):
    return init_params(arch, Rng(seed))


# ---------------------------------------------------------------------------
# architecture


def test_out_dim():
    assert ARCH.out_dim == 15
    assert PLANAR.out_dim == 2


def test_meta_round_trip():
    for arch in (ARCH, PLANAR, Architecture(n_categories=1, gen_hidden=(4, 5, 6),
                                            trunk_hidden=(3,), canvas=(16, 16))):
        back = Architecture.from_meta(arch.to_meta())
        assert back == arch


def test_meta_is_float_vector():
    meta = ARCH.to_meta()
    assert meta.dtype == np.float64 and meta.ndim == 1


# ---------------------------------------------------------------------------
# initialization


def test_init_shapes_and_defaults():
    p = _params()
    assert p.gen["g.fc0.w"].shape == (6, 8)
    assert p.gen["g.fc1.w"].shape == (8, 10)
    assert p.gen["g.out.w"].shape == (10, 15)
    assert p.gen["g.cbn0.gamma"].shape == (4, 8)
    assert p.gen["g.cbn1.beta"].shape == (4, 10)
    assert p.disc["d.fc0.w"].shape == (15, 12)
    assert p.disc["d.fc1.w"].shape == (12, 7)
    assert p.disc["d.head.w"].shape == (7, 1)
    assert p.cls["c.head.w"].shape == (7, 4)
    for name in ("g.fc0.b", "g.fc1.b", "g.out.b"):
        assert not p.gen[name].any()
    assert np.array_equal(p.gen["g.cbn0.gamma"], np.ones((4, 8)))
    assert not p.gen["g.cbn0.beta"].any()
    assert not p.gen_buffers["g.cbn0.rmean"].any()
    assert np.array_equal(p.gen_buffers["g.cbn1.rvar"], np.ones(10))


def test_init_draw_order():
    # weights consume the stream in the documented layer order, scaled by the
    # init std; biases and banks draw nothing
    rng = Rng(123)
    p = init_params(ARCH, Rng(123))
    for key, store, shape in (
        ("g.fc0.w", p.gen, (6, 8)),
        ("g.fc1.w", p.gen, (8, 10)),
        ("g.out.w", p.gen, (10, 15)),
        ("d.fc0.w", p.disc, (15, 12)),
        ("d.fc1.w", p.disc, (12, 7)),
        ("d.head.w", p.disc, (7, 1)),
        ("c.head.w", p.cls, (7, 4)),
    ):
        assert np.array_equal(store[key], rng.gaussian(shape) * INIT_STD), key


def test_init_deterministic():
    a, b = _params(seed=9), _params(seed=9)
    for group in ("gen", "disc", "cls"):
        ga, gb = getattr(a, group), getattr(b, group)
        assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_groups_view():
    p = _params()
    groups = p.groups()
    assert set(groups) == {"gen", "genbuf", "disc", "cls"}
    assert groups["gen"] is p.gen and groups["genbuf"] is p.gen_buffers


# ---------------------------------------------------------------------------
# onehot


def test_onehot_matrix():
    g = Graph()
    oh = onehot(g, np.array([2, 1, 4]), 4)
    assert np.array_equal(oh.value, np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1]],
                                             dtype=np.float64))


def test_onehot_range_errors():
    g = Graph()
    with pytest.raises(CategoryError):
        onehot(g, np.array([0]), 4)
    with pytest.raises(CategoryError):
        onehot(g, np.array([5]), 4)
    with pytest.raises(CategoryError):
        onehot(g, np.array([]), 4)
    with pytest.raises(CategoryError):
        onehot(g, np.array([[1, 2]]), 4)


# ---------------------------------------------------------------------------
# generator and batch norm


def test_generator_shapes_and_tanh_range():
    p = _params()
    z = Rng(1).gaussian((7, 6))
    out = generator_forward(p, z, np.full(7, 2), mode="train")
    assert out.value.shape == (7, 1, 3, 5)
    assert np.all(np.abs(out.value) < 1.0)  # tanh output


def test_generator_planar_shape_no_tanh():
    p = _params(PLANAR)
    # blow up the output layer so values leave [-1, 1] if and only if there is
    # no squashing nonlinearity
    p.gen["g.out.w"] = p.gen["g.out.w"] * 1e4
    out = generator_forward(p, Rng(1).gaussian((5, 5)), np.full(5, 1), mode="train")
    assert out.value.shape == (5, 2)
    assert np.abs(out.value).max() > 1.0


def test_generator_input_validation():
    p = _params()
    with pytest.raises(ShapeError):
        generator_forward(p, Rng(1).gaussian((3, 5)), np.full(3, 1))  # latent dim 5 != 6
    with pytest.raises(ShapeError):
        generator_forward(p, Rng(1).gaussian((3, 6)), np.full(4, 1))  # batch mismatch
    with pytest.raises(CategoryError):
        generator_forward(p, Rng(1).gaussian((3, 6)), np.full(3, 9))
    with pytest.raises(ValueError):
        generator_forward(p, Rng(1).gaussian((3, 6)), np.full(3, 1), mode="test")


def test_train_mode_batchnorm_reference():
    # gamma 1, beta 0 at init: each hidden layer output is exactly the
    # batch-normalized preactivation; verify layer 0 against a numpy transcript
    p = _params()
    z = Rng(5).gaussian((16, 6))
    g = Graph()
    out = generator_forward(p, z, np.full(16, 3), mode="train", graph=g)

    h = z @ p.gen["g.fc0.w"] + p.gen["g.fc0.b"]
    ref = (h - h.mean(axis=0)) / np.sqrt(h.var(axis=0) + BN_EPS)
    ref = np.where(ref >= 0, ref, 0.2 * ref)
    h1 = ref @ p.gen["g.fc1.w"] + p.gen["g.fc1.b"]
    ref1 = (h1 - h1.mean(axis=0)) / np.sqrt(h1.var(axis=0) + BN_EPS)
    ref1 = np.where(ref1 >= 0, ref1, 0.2 * ref1)
    want = np.tanh(ref1 @ p.gen["g.out.w"] + p.gen["g.out.b"])
    assert out.value.reshape(16, 15) == pytest.approx(want, abs=1e-12)


def test_eval_mode_uses_running_stats():
    p = _params()
    p.gen_buffers["g.cbn0.rmean"] = np.full(8, 0.3)
    p.gen_buffers["g.cbn0.rvar"] = np.full(8, 2.0)
    z = Rng(5).gaussian((4, 6))
    out = generator_forward(p, z, np.full(4, 1), mode="eval")

    h = z @ p.gen["g.fc0.w"] + p.gen["g.fc0.b"]
    ref = (h - 0.3) / np.sqrt(2.0 + BN_EPS)
    ref = np.where(ref >= 0, ref, 0.2 * ref)
    h1 = ref @ p.gen["g.fc1.w"] + p.gen["g.fc1.b"]
    ref1 = (h1 - 0.0) / np.sqrt(1.0 + BN_EPS)
    ref1 = np.where(ref1 >= 0, ref1, 0.2 * ref1)
    want = np.tanh(ref1 @ p.gen["g.out.w"] + p.gen["g.out.b"])
    assert out.value.reshape(4, 15) == pytest.approx(want, abs=1e-12)


def test_running_stats_update_rule():
    p = _params()
    z = Rng(5).gaussian((16, 6))
    h = z @ p.gen["g.fc0.w"] + p.gen["g.fc0.b"]
    want_mean = BN_MOMENTUM * 0.0 + (1 - BN_MOMENTUM) * h.mean(axis=0)
    want_var = BN_MOMENTUM * 1.0 + (1 - BN_MOMENTUM) * h.var(axis=0)
    generator_forward(p, z, np.full(16, 1), mode="train", update_stats=True)
    assert p.gen_buffers["g.cbn0.rmean"] == pytest.approx(want_mean, abs=1e-12)
    assert p.gen_buffers["g.cbn0.rvar"] == pytest.approx(want_var, abs=1e-12)


def test_stats_frozen_without_update_flag():
    p = _params()
    before = {k: v.copy() for k, v in p.gen_buffers.items()}
    z = Rng(5).gaussian((8, 6))
    generator_forward(p, z, np.full(8, 1), mode="train")   # update_stats defaults off
    generator_forward(p, z, np.full(8, 1), mode="eval")
    assert all(np.array_equal(p.gen_buffers[k], before[k]) for k in before)


def test_fresh_init_is_condition_independent():
    # identical gamma/beta rows for every category: c must not matter yet
    p = _params()
    z = Rng(2).gaussian((6, 6))
    a = generator_forward(p, z, np.full(6, 1), mode="train")
    b = generator_forward(p, z, np.full(6, 4), mode="train")
    assert np.array_equal(a.value, b.value)


def test_cbn_rows_select_by_category():
    p = _params()
    p.gen["g.cbn0.beta"] = p.gen["g.cbn0.beta"].copy()
    p.gen["g.cbn0.beta"][2] += 1.5  # category 3's row
    z = Rng(2).gaussian((6, 6))
    base = generator_forward(p, z, np.full(6, 1), mode="train").value
    same = generator_forward(p, z, np.full(6, 2), mode="train").value
    moved = generator_forward(p, z, np.full(6, 3), mode="train").value
    assert np.array_equal(base, same)
    assert not np.array_equal(base, moved)


def test_mixed_category_batch_matches_per_category_rows():
    # normalization moments are shared across the batch, so a mixed batch must
    # equal a single-category batch row-wise when the banks are identical,
    # and differ only through gamma/beta selection otherwise
    p = _params()
    z = Rng(3).gaussian((4, 6))
    mixed = generator_forward(p, z, np.array([1, 2, 3, 4]), mode="train").value
    uniform = generator_forward(p, z, np.full(4, 1), mode="train").value
    assert np.array_equal(mixed, uniform)  # banks identical at init


# ---------------------------------------------------------------------------
# critic / classifier


def test_head_shapes():
    p = _params()
    g = Graph()
    x = g.tensor(Rng(4).gaussian((5, 15)))
    assert discriminator_forward(g, bind(g, p.disc), ARCH, x).value.shape == (5,)
    assert classifier_forward(g, bind(g, p.disc), bind(g, p.cls), ARCH, x).value.shape == (5, 4)


def test_dc_forward_shares_trunk_nodes():
    p = _params()
    x_np = Rng(4).gaussian((5, 15))

    g1 = Graph()
    dc_forward(g1, bind(g1, p.disc), bind(g1, p.cls), ARCH, g1.tensor(x_np))
    shared = len(g1)

    g2 = Graph()
    d2, c2 = bind(g2, p.disc), bind(g2, p.cls)
    x2 = g2.tensor(x_np)
    discriminator_forward(g2, d2, ARCH, x2)
    classifier_forward(g2, d2, c2, ARCH, x2)
    assert shared < len(g2)


def test_dc_forward_matches_separate_calls():
    p = _params()
    x_np = Rng(4).gaussian((5, 15))
    g = Graph()
    scores, logits = dc_forward(g, bind(g, p.disc), bind(g, p.cls), ARCH, g.tensor(x_np))
    g2 = Graph()
    s2 = discriminator_forward(g2, bind(g2, p.disc), ARCH, g2.tensor(x_np))
    l2 = classifier_forward(g2, bind(g2, p.disc), bind(g2, p.cls), ARCH, g2.tensor(x_np))
    assert np.array_equal(scores.value, s2.value)
    assert np.array_equal(logits.value, l2.value)


def test_trunk_accepts_image_tensors():
    p = _params()
    g = Graph()
    x = g.tensor(Rng(4).gaussian((5, 1, 3, 5)))
    assert trunk(g, bind(g, p.disc), ARCH, x).value.shape == (5, 7)
    with pytest.raises(ShapeError):
        trunk(g, bind(g, p.disc), ARCH, g.tensor(np.ones((5, 14))))


# ---------------------------------------------------------------------------
# snapshot


def test_snapshot_is_deep_and_frozen():
    p = _params()
    snap = snapshot(p)
    p.gen["g.fc0.w"][0, 0] += 100.0
    assert snap.gen["g.fc0.w"][0, 0] != p.gen["g.fc0.w"][0, 0]
    with pytest.raises(ValueError):
        snap.gen["g.fc0.w"][0, 0] = 0.0
    assert snap.arch == p.arch


def test_snapshot_covers_buffers():
    p = _params()
    snap = snapshot(p)
    generator_forward(p, Rng(1).gaussian((8, 6)), np.full(8, 1), mode="train",
                      update_stats=True)
    assert not np.array_equal(snap.gen_buffers["g.cbn0.rmean"],
                              p.gen_buffers["g.cbn0.rmean"])
    assert not snap.gen_buffers["g.cbn0.rmean"].any()
