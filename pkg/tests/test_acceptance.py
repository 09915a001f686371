"""Acceptance gate: one test per published criterion.

Criteria 5-7 share a cached desk-scale experiment battery (five strategies,
three seeds, 2000 iterations per task on the 5-category glyph benchmark);
see battery.py. A cold cache recomputes it, which takes on the order of an
hour on a desktop CPU."""

import struct
import time
import zlib

import numpy as np
import pytest

import battery as bat
from mergan.cli import (checkpoint_load, checkpoint_save, main, pack_checkpoint, run_gradcheck,
                        unpack_checkpoint)
from mergan.data import default_gauss2d_specs, load_idx, make_gauss2d_tasks
from mergan.errors import DataFormatError
from mergan.losses import bind_model, gradient_penalty, loss_cls_discriminator
from mergan.metrics import GaussianStats, frechet_distance, matrix_sqrt_psd
from mergan.models import Architecture, init_params
from mergan.numerics import Graph
from mergan.numerics import engine as eg
from mergan.numerics.rng import Rng
from mergan.strategies import AdamState, TrainConfig, run_sequence

BATTERY_STRATEGIES = ("JT", "SFT", "EWC", "MERGAN_JTR", "MERGAN_RA")


@pytest.fixture(scope="session")
def battery_data():
    return bat.load_or_run(log=lambda *a: print(*a, flush=True))


def _battery(data, strategy, seed, key):
    return data[f"{strategy}/s{seed}/{key}"]


def _acc_means(data):
    return {s: float(np.mean([_battery(data, s, seed, "acc_mean_final")
                              for seed in bat.SEEDS]))
            for s in BATTERY_STRATEGIES}


# ---------------------------------------------------------------------------
# criterion 1: every loss gradient matches central finite differences


def test_criterion_1_gradient_correctness():
    t0 = time.monotonic()
    results = run_gradcheck(n_instances=20)
    elapsed = time.monotonic() - t0

    assert len(results) == 9 * 20, "nine losses on twenty instances each"
    worst = {}
    for name, _, err, tol, passed in results:
        assert passed, f"{name}: rel err {err:.3e} exceeds tol {tol:.0e}"
        worst[name] = max(worst.get(name, 0.0), err)
    assert elapsed < 120.0, f"audit took {elapsed:.1f}s, budget is 120s"
    print(f"criterion 1 PASS: 9 losses x 20 instances in {elapsed:.1f}s, "
          f"worst rel err {max(worst.values()):.3e}")


# ---------------------------------------------------------------------------
# criterion 2: analytic oracles exact to 1e-6


def _linear_critic(w):
    arch = Architecture(n_categories=2, latent_dim=3, gen_hidden=(4,), trunk_hidden=(2,),
                        canvas=None)
    p = init_params(arch, Rng(0))
    p.disc["d.fc0.w"] = np.eye(2)
    p.disc["d.fc0.b"] = np.zeros(2)
    p.disc["d.head.w"] = np.asarray(w, dtype=np.float64).reshape(2, 1)
    p.disc["d.head.b"] = np.zeros(1)
    return p


def _gp_value(w):
    p = _linear_critic(w)
    g = Graph()
    x = g.tensor(np.array([[0.5, 1.0], [2.0, 0.25], [0.75, 3.0]]))
    y = g.tensor(np.array([[1.5, 0.75], [0.3, 0.9], [1.25, 0.5]]))
    return float(gradient_penalty(g, bind_model(g, p), x, y,
                                  eps=np.array([0.25, 0.6, 0.9])).value)


def test_criterion_2_analytic_oracles():
    # gradient penalty on linear critics
    assert abs(_gp_value([1.0, 0.0]) - 0.0) < 1e-6
    assert abs(_gp_value([0.6, 0.8]) - 0.0) < 1e-6
    assert abs(_gp_value([3.0, 4.0]) - 16.0) < 1e-6

    # Fréchet distance closed forms
    def stats(mean, cov):
        return GaussianStats(np.asarray(mean, float), np.asarray(cov, float), 10)

    same = stats([0.3, -0.2], [[2.0, 0.5], [0.5, 1.0]])
    assert abs(frechet_distance(same, same)) < 1e-6
    assert abs(frechet_distance(stats([0.0], [[1.0]]), stats([1.0], [[1.0]])) - 1.0) < 1e-6
    assert abs(frechet_distance(stats([0.0, 0.0], np.eye(2)),
                                stats([0.0, 0.0], 4.0 * np.eye(2))) - 2.0) < 1e-6

    # matrix square root reconstruction
    rng = Rng(1)
    worst = 0.0
    for dim in range(1, 17):
        r = rng.gaussian((dim, dim))
        a = r @ r.T
        s = matrix_sqrt_psd(a)
        worst = max(worst, float(np.abs(s @ s - a).max()))
    assert worst < 1e-8

    # cross-entropy symmetry value ln M
    g = Graph()
    ce = eg.softmax_cross_entropy(g.tensor(np.zeros((4, 6))),
                                  g.tensor(np.eye(6)[[0, 2, 4, 5]]))
    assert abs(float(ce.value) - np.log(6.0)) < 1e-6
    arch = Architecture(n_categories=3, latent_dim=4, gen_hidden=(6,), trunk_hidden=(5,),
                        canvas=(2, 3))
    p = init_params(arch, Rng(2))
    p.cls["c.head.w"] = np.zeros_like(p.cls["c.head.w"])
    g2 = Graph()
    loss = loss_cls_discriminator(g2, bind_model(g2, p), g2.tensor(Rng(3).gaussian((5, 6))),
                                  np.array([1, 2, 3, 1, 2]))
    assert abs(float(loss.value) - np.log(3.0)) < 1e-6
    print(f"criterion 2 PASS: penalty/distance/entropy oracles exact, "
          f"matrix sqrt worst recon {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: anchor terms are exactly zero at the start of every task


def _tiny_cfg(strategy, **over):
    base = dict(seed=11, learning_rate=1e-3, batch_size=8, n_critic=2, iters_per_task=60,
                eval_every=30, latent_dim=4, fisher_samples=16)
    base.update(over)
    return TrainConfig(strategy=strategy, **base)


def test_criterion_3_zero_at_task_start():
    sched = make_gauss2d_tasks(default_gauss2d_specs(3), 48, 16, seed=5)

    ewc = run_sequence(_tiny_cfg("EWC"), sched)
    ewc_starts = ewc.report.query("ewc_penalty_start")
    assert [v for _, v in ewc_starts] == [0.0, 0.0, 0.0]

    ra = run_sequence(_tiny_cfg("MERGAN_RA"), sched)
    assert [v for _, v in ra.report.query("ra_loss_start")] == [0.0, 0.0, 0.0]
    assert [v for _, v in ra.report.query("ra_grad_maxabs_start")] == [0.0, 0.0, 0.0]

    # the invariant is not vacuous: parameters moved between the checkpoints
    for res in (ewc, ra):
        a, b = res.task_end_params[0], res.task_end_params[1]
        assert any(not np.array_equal(a.gen[k], b.gen[k]) for k in a.gen)
    print("criterion 3 PASS: EWC penalty and RA loss/gradient exactly zero at the "
          "start of all 3 tasks")


# ---------------------------------------------------------------------------
# criterion 4: bitwise reduction identities at 200 iterations


def _same_state(a, b):
    for ga, gb in ((a.params.gen, b.params.gen), (a.params.gen_buffers, b.params.gen_buffers),
                   (a.params.disc, b.params.disc), (a.params.cls, b.params.cls)):
        assert set(ga) == set(gb)
        for k in ga:
            assert np.array_equal(ga[k], gb[k]), k


def test_criterion_4_reduction_identities(battery_data):
    sched = make_gauss2d_tasks(default_gauss2d_specs(2), 128, 32, seed=3)
    kw = dict(iters_per_task=200, eval_every=100)

    sft_1 = run_sequence(_tiny_cfg("SFT", **kw), sched, stop_after_task=1)
    ra_1 = run_sequence(_tiny_cfg("MERGAN_RA", **kw), sched, stop_after_task=1)
    _same_state(sft_1, ra_1)

    sft = run_sequence(_tiny_cfg("SFT", **kw), sched)
    ewc0 = run_sequence(_tiny_cfg("EWC", lambda_ewc=0.0, **kw), sched)
    _same_state(sft, ewc0)

    # snapshot isolation: frozen replay generators never change, at this scale
    # and across the full battery
    ra = run_sequence(_tiny_cfg("MERGAN_RA", **kw), sched)
    jtr = run_sequence(_tiny_cfg("MERGAN_JTR", **kw), sched)
    for res in (ra, jtr):
        assert all(v == 0.0 for _, v in res.report.query("snapshot_drift"))
    for strategy in ("MERGAN_RA", "MERGAN_JTR"):
        for seed in bat.SEEDS:
            assert float(_battery(battery_data, strategy, seed, "drift_max")) == 0.0
    print("criterion 4 PASS: RA(t=1) = SFT(t=1) and EWC(0) = SFT bitwise at 200 "
          "iterations; snapshot drift 0.0 everywhere")


# ---------------------------------------------------------------------------
# criterion 5: desk-scale forgetting orderings


def test_criterion_5_desk_scale_orderings(battery_data):
    acc = _acc_means(battery_data)
    lines = []
    for s in BATTERY_STRATEGIES:
        per_seed = [float(_battery(battery_data, s, seed, "acc_mean_final"))
                    for seed in bat.SEEDS]
        wall = [float(_battery(battery_data, s, seed, "wall_seconds")) / 60
                for seed in bat.SEEDS]
        lines.append(f"  {s:<11} acc per seed {[round(a, 3) for a in per_seed]} "
                     f"mean {acc[s]:.3f}  wall {[round(w, 1) for w in wall]} min")
    print("criterion 5 accuracy table:\n" + "\n".join(lines))

    best_mergan = max(acc["MERGAN_JTR"], acc["MERGAN_RA"])
    assert acc["SFT"] < 0.30, f"SFT mean accuracy {acc['SFT']:.3f} not below 0.30"
    assert acc["EWC"] > acc["SFT"], "EWC must improve on sequential fine-tuning"
    assert acc["MERGAN_JTR"] > 0.70, f"JTR mean accuracy {acc['MERGAN_JTR']:.3f}"
    assert acc["MERGAN_RA"] > 0.70, f"RA mean accuracy {acc['MERGAN_RA']:.3f}"
    assert acc["MERGAN_JTR"] > acc["EWC"] and acc["MERGAN_RA"] > acc["EWC"]
    assert abs(acc["JT"] - best_mergan) <= 0.10, \
        f"JT {acc['JT']:.3f} vs best replay variant {best_mergan:.3f}"
    print("criterion 5 PASS: accuracy ordering holds across 3 seeds")


# ---------------------------------------------------------------------------
# criterion 6: forgetting-dynamics signature in the category-1 FD series


def _fd1(data, strategy, seed):
    giters = _battery(data, strategy, seed, "fd1_giters")
    values = _battery(data, strategy, seed, "fd1_values")
    return dict(zip(giters.tolist(), values.tolist()))

TASK_LEN = bat.SETTINGS["iters_per_task"]


def test_criterion_6_forgetting_dynamics(battery_data):
    rows = []
    for seed in bat.SEEDS:
        sft = _fd1(battery_data, "SFT", seed)
        ra = _fd1(battery_data, "MERGAN_RA", seed)
        row = dict(seed=seed, end1=sft[TASK_LEN],
                   early2=max(sft[g] for g in sft if TASK_LEN < g <= TASK_LEN + 200),
                   ra_end1=ra[TASK_LEN], ra_final=ra[max(ra)])
        rows.append(row)
        print(f"  seed {seed}: SFT fd1 {row['end1']:.1f} -> {row['early2']:.1f} "
              f"({row['early2'] / row['end1']:.0f}x in 200 iters); "
              f"RA fd1 {row['ra_end1']:.1f} -> {row['ra_final']:.1f} at end "
              f"({row['ra_final'] / row['ra_end1']:.2f}x)")
    for row in rows:
        assert row["early2"] >= 5.0 * row["end1"], \
            f"seed {row['seed']}: SFT fd rose only {row['early2'] / row['end1']:.1f}x " \
            "within 200 iters of task 2"
        assert row["ra_final"] <= 2.0 * row["ra_end1"], \
            f"seed {row['seed']}: RA final fd {row['ra_final']:.1f} vs " \
            f"end-of-task-1 {row['ra_end1']:.1f}"
    print("criterion 6 PASS: early-task-2 blowup for SFT, bounded drift for RA")


# ---------------------------------------------------------------------------
# criterion 7: instance-level retention, RA vs JTR on a fixed probe


def test_criterion_7_instance_retention(battery_data):
    # Probe MSE thresholds are in display-intensity units: the [0, 1] grayscale
    # scale the rendered grids use. Generator outputs live in [-1, 1], so the
    # raw pixel MSE converts by a factor of 4.
    #
    # "Category-correct" is a property of each variant's category-1 generation:
    # its final category-1 proxy accuracy (256 eval samples) stays a majority.
    # The 8-image probe grid backs the MSE comparison; its classified fractions
    # are printed alongside for reference but are too few samples to decide a
    # majority reliably.
    good_seeds = 0
    details = []
    for seed in bat.SEEDS:
        ra_mse = float(_battery(battery_data, "MERGAN_RA", seed, "probe_mse")) / 4.0
        jtr_mse = float(_battery(battery_data, "MERGAN_JTR", seed, "probe_mse")) / 4.0
        ra_cat = float(_battery(battery_data, "MERGAN_RA", seed, "acc_final")[0])
        jtr_cat = float(_battery(battery_data, "MERGAN_JTR", seed, "acc_final")[0])
        fr = {s: (float(_battery(battery_data, s, seed, "probe_frac1_end1")),
                  float(_battery(battery_data, s, seed, "probe_frac1_end")))
              for s in ("MERGAN_RA", "MERGAN_JTR")}
        ok = ra_mse < 0.05 and jtr_mse > ra_mse and ra_cat > 0.5 and jtr_cat > 0.5
        good_seeds += ok
        details.append(
            f"  seed {seed}: RA probe mse {ra_mse:.4f} (cat1 acc {ra_cat:.3f}, "
            f"probe frac1 {fr['MERGAN_RA'][0]:.2f}->{fr['MERGAN_RA'][1]:.2f}), "
            f"JTR probe mse {jtr_mse:.4f} (cat1 acc {jtr_cat:.3f}, "
            f"probe frac1 {fr['MERGAN_JTR'][0]:.2f}->{fr['MERGAN_JTR'][1]:.2f}) "
            f"-> {'ok' if ok else 'no'}")
    print("criterion 7 probe table:\n" + "\n".join(details))
    assert good_seeds >= 2, "\n".join(details)
    print(f"criterion 7 PASS: RA pixel-stable below JTR and category-correct "
          f"on {good_seeds}/3 seeds")


# ---------------------------------------------------------------------------
# criterion 8: determinism and file formats


def _conf(out_dir):
    lines = ["strategy = ra", "seed = 4", "dataset = glyphs", "n_categories = 2",
             "learning_rate = 1e-3", "batch_size = 8", "n_critic = 2",
             "iters_per_task = 3", "eval_every = 3", "latent_dim = 4",
             "fisher_samples = 8", "grid.columns = 3", "eval.samples = 24",
             "data.glyph.n_train = 48", "data.glyph.n_test = 24",
             "proxy.steps = 300", "proxy.accuracy_floor = 0.8",
             f"out_dir = {out_dir}"]
    return "\n".join(lines) + "\n"


def test_criterion_8_determinism_and_formats(tmp_path):
    # byte-for-byte reproduction of a full training run's outputs
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for conf_path, out in ((tmp_path / "a.conf", out_a), (tmp_path / "b.conf", out_b)):
        conf_path.write_text(_conf(out))
        assert main(["train", str(conf_path)]) == 0
    names = sorted(p.name for p in out_a.iterdir())
    assert names == sorted(p.name for p in out_b.iterdir())
    assert "metrics.csv" in names
    assert any(n.startswith("grid_iter") and n.endswith(".pgm") for n in names)
    for name in names:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    # IDX golden fixtures, including all three error cases
    pixels = np.array([[[0, 255], [128, 64]]], dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + pixels.tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, 1) + bytes([5]))
    ls = load_idx(str(ip), str(lp))
    assert np.array_equal(ls.labels, [5])
    assert np.array_equal(ls.samples[0], pixels.reshape(4) / 127.5 - 1.0)
    with pytest.raises(DataFormatError, match="bad magic"):
        load_idx(str(lp), str(lp))
    short = tmp_path / "short.idx"
    short.write_bytes(struct.pack(">I", 0x801))
    with pytest.raises(DataFormatError, match="truncated"):
        load_idx(str(ip), str(short))
    bad_len = tmp_path / "badlen.idx"
    bad_len.write_bytes(struct.pack(">II", 0x801, 9) + bytes([1]))
    with pytest.raises(DataFormatError, match="payload"):
        load_idx(str(ip), str(bad_len))

    # checkpoint round-trip is bitwise stable
    arch = Architecture(n_categories=2, latent_dim=3, gen_hidden=(4,), trunk_hidden=(4,),
                        canvas=(2, 2))
    params = init_params(arch, Rng(1))
    opt_g = AdamState(params.gen)
    opt_d = AdamState({**params.disc, **params.cls})
    p1, p2 = tmp_path / "ck1.mrgn", tmp_path / "ck2.mrgn"
    checkpoint_save(p1, params, opt_g, opt_d, task=1, global_iter=42)
    loaded = checkpoint_load(p1)
    checkpoint_save(p2, *loaded)
    assert p1.read_bytes() == p2.read_bytes()
    task, giter, tensors = unpack_checkpoint(p1.read_bytes(), "ck")
    assert (task, giter) == (1, 42)
    assert pack_checkpoint(task, giter, tensors) == p1.read_bytes()[:]
    crc = struct.unpack("<I", p1.read_bytes()[-4:])[0]
    assert zlib.crc32(p1.read_bytes()[:-4]) & 0xFFFFFFFF == crc
    print("criterion 8 PASS: byte-identical reruns, IDX goldens with 3 error cases, "
          "bitwise checkpoint round-trip")
