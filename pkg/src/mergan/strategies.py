"""Sequential training loops and the optimizer.

Five strategy tags cover the training regimes:

  JT          joint training on all categories throughout (upper bound)
  SFT         sequential fine-tuning, GAN terms only (lower bound)
  EWC         SFT plus a Fisher-weighted quadratic anchor on the generator
  MERGAN_JTR  joint retraining: real batches extended with snapshot replays
  MERGAN_RA   SFT plus an output-alignment term against a frozen snapshot

One *iteration* is n_critic critic updates followed by one generator update.
Critic and generator parameter groups each own an Adam state with its own
step counter.

Determinism contract: every random draw comes from a purpose-named stream
split off the run seed (per task: "task{t}/data", "task{t}/latent",
"task{t}/cats", "task{t}/eps", "task{t}/replay", "task{t}/fisher",
"task{t}/diag"). Per critic step the order is: real indices, then (JTR only)
replay z and replay categories, then fake z, fake categories, interpolation
eps. Per generator step: fake z, fake categories, then (RA only) alignment z
and categories. Strategies that fix the fake category to the current task
consume no category draws, and terms weighted by a zero coefficient are never
built, so degenerate configurations collapse to their base strategy bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledSet, TaskSchedule, draw_batch, replay_batch
from .errors import ConfigError, NumericsError, ShapeError
from .losses import (FisherState, bind_model, discriminator_objective, estimate_fisher,
                     ewc_penalty, generator_objective, replay_alignment_loss)
from .models import Architecture, ModelParams, init_params, onehot, snapshot
from .numerics import Graph, backward
from .numerics import engine as eg
from .numerics.rng import Rng

STRATEGIES = ("JT", "SFT", "EWC", "MERGAN_JTR", "MERGAN_RA")

CSV_HEADER = "global_iter,task,metric,category,value"


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "JT"
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    batch_size: int = 64
    n_critic: int = 5
    iters_per_task: int = 2000
    eval_every: int = 100
    latent_dim: int = 32
    lambda_cls: float = 1.0
    lambda_gp: float = 10.0
    lambda_ewc: float = 1e9
    lambda_ra: float = 1e-3
    fisher_samples: int = 512

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        for name in ("learning_rate", "batch_size", "n_critic", "iters_per_task",
                     "eval_every", "latent_dim", "fisher_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        # penalty weights may be zero (switches the term off) but never negative
        for name in ("lambda_cls", "lambda_gp", "lambda_ewc", "lambda_ra"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")


class AdamState:
    """Bias-corrected Adam moments for one named parameter group."""

    __slots__ = ("m", "v", "t", "beta1", "beta2", "eps")

    def __init__(self, params: dict, beta1: float = 0.5, beta2: float = 0.9,
                 eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    @classmethod
    def for_config(cls, params: dict, cfg: TrainConfig) -> "AdamState":
        return cls(params, cfg.beta1, cfg.beta2, cfg.adam_eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Standard bias-corrected Adam update, in place on the parameter arrays.

    Only keys present in grads are touched; the step counter advances once
    per call regardless.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, grad in grads.items():
        p = params[k]
        if grad.shape != p.shape:
            raise ShapeError("adam_step", p.shape, grad.shape, detail=f"parameter {k!r}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * (grad * grad)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


@dataclass
class MetricsReport:
    """Long-format metric rows: (global_iter, task, metric, category, value)."""

    rows: list = field(default_factory=list)

    def add(self, global_iter: int, task: int, metric: str, category, value: float):
        self.rows.append((int(global_iter), int(task), str(metric),
                          None if category is None else int(category), float(value)))

    def query(self, metric: str, category=None) -> list:
        """(global_iter, value) series for one metric/category pair."""
        want = None if category is None else int(category)
        return [(r[0], r[4]) for r in self.rows if r[2] == metric and r[3] == want]

    def last(self, metric: str, category=None) -> float:
        series = self.query(metric, category)
        if not series:
            raise KeyError(f"no rows for metric {metric!r}, category {category!r}")
        return series[-1][1]

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for giter, task, metric, category, value in self.rows:
            cat = "" if category is None else str(category)
            lines.append(f"{giter},{task},{metric},{cat},{value!r}")
        return "\n".join(lines) + "\n"


@dataclass
class SequenceResult:
    params: ModelParams
    report: MetricsReport
    task_end_params: list
    opt_g: AdamState
    opt_d: AdamState
    global_iter: int
    n_critic_updates: int = 0
    n_gen_updates: int = 0


@dataclass
class _Streams:
    data: Rng
    latent: Rng
    cats: Rng
    eps: Rng
    replay: Rng
    diag: Rng

    @classmethod
    def for_task(cls, run_rng: Rng, t: int) -> "_Streams":
        return cls(*(run_rng.split(f"task{t}/{name}")
                     for name in ("data", "latent", "cats", "eps", "replay", "diag")))


def _joint_pool(schedule: TaskSchedule) -> LabeledSet:
    return LabeledSet(np.concatenate([s.samples for s in schedule.train]),
                      np.concatenate([s.labels for s in schedule.train]))


def _fake_categories(strategy: str, cats_rng: Rng, n: int, t: int, n_categories: int) -> np.ndarray:
    if strategy == "JT":
        return cats_rng.categories(n, 1, n_categories)
    if strategy == "MERGAN_JTR":
        return cats_rng.categories(n, 1, t)
    return np.full(n, t, dtype=np.int64)  # current category only, no draw consumed


def _uses_classifier(strategy: str, cfg: TrainConfig) -> bool:
    return strategy in ("JT", "MERGAN_JTR") and cfg.lambda_cls > 0


def _grads(loss, bound: dict) -> dict:
    keys = list(bound)
    return {k: t.value for k, t in zip(keys, backward(loss, [bound[k] for k in keys]))}


def _check_finite(terms: dict, task: int, iteration: int):
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NumericsError(f"non-finite {name} ({value}) at task {task} iteration {iteration}")


def _critic_update(cfg: TrainConfig, params: ModelParams, opt_d: AdamState,
                   pool: LabeledSet, t: int, st: _Streams,
                   snap: ModelParams | None) -> dict:
    strategy = cfg.strategy
    x, y = draw_batch(pool, cfg.batch_size, st.data)
    if strategy == "MERGAN_JTR" and t >= 2:
        xr, yr = replay_batch(snap, st.replay, cfg.batch_size, t)
        x, y = np.concatenate([x, xr]), np.concatenate([y, yr])
    n = x.shape[0]
    z = st.latent.gaussian((n, cfg.latent_dim))
    c = _fake_categories(strategy, st.cats, n, t, params.arch.n_categories)
    eps = st.eps.uniforms(n)
    use_cls = _uses_classifier(strategy, cfg)

    g = Graph()
    bm = bind_model(g, params)
    total, terms = discriminator_objective(
        g, bm, g.tensor(x), y if use_cls else None, g.tensor(z),
        onehot(g, c, params.arch.n_categories), cfg.lambda_gp, cfg.lambda_cls,
        use_cls, eps=eps)
    wrt = {**bm.disc, **(bm.cls if use_cls else {})}
    adam_step({**params.disc, **params.cls}, _grads(total, wrt), opt_d, cfg.learning_rate)
    return terms


def _gen_update(cfg: TrainConfig, params: ModelParams, opt_g: AdamState, t: int,
                st: _Streams, snap: ModelParams | None,
                fisher: FisherState | None) -> dict:
    strategy = cfg.strategy
    z = st.latent.gaussian((cfg.batch_size, cfg.latent_dim))
    c = _fake_categories(strategy, st.cats, cfg.batch_size, t, params.arch.n_categories)

    g = Graph()
    bm = bind_model(g, params)
    total, terms = generator_objective(g, bm, g.tensor(z),
                                       onehot(g, c, params.arch.n_categories),
                                       cfg.lambda_cls, _uses_classifier(strategy, cfg),
                                       update_stats=True)
    if strategy == "EWC" and fisher is not None and cfg.lambda_ewc > 0:
        penalty = ewc_penalty(g, bm, fisher, cfg.lambda_ewc)
        terms["ewc_penalty"] = float(penalty.value)
        total = eg.add(total, penalty)
    if strategy == "MERGAN_RA" and t >= 2 and cfg.lambda_ra > 0:
        za = st.replay.gaussian((cfg.batch_size, cfg.latent_dim))
        ca = st.replay.categories(cfg.batch_size, 1, t - 1)
        align = replay_alignment_loss(g, bm, snap, g.tensor(za), ca)
        terms["ra_loss"] = float(align.value)  # raw alignment gap, before weighting
        total = eg.add(total, eg.scale(align, cfg.lambda_ra))
    adam_step(params.gen, _grads(total, bm.gen), opt_g, cfg.learning_rate)
    return terms


def _start_diagnostics(cfg: TrainConfig, params: ModelParams, t: int, st: _Streams,
                       snap: ModelParams | None, fisher: FisherState | None,
                       report: MetricsReport, global_iter: int):
    """Penalty values at the task's first-iteration parameter state, before any
    update of task t. Both anchor terms must evaluate to exactly zero here."""
    strategy = cfg.strategy
    if strategy == "EWC":
        if fisher is not None and cfg.lambda_ewc > 0:
            g = Graph()
            value = float(ewc_penalty(g, bind_model(g, params), fisher, cfg.lambda_ewc).value)
        else:
            value = 0.0
        report.add(global_iter, t, "ewc_penalty_start", None, value)
    if strategy == "MERGAN_RA":
        if t >= 2 and cfg.lambda_ra > 0:
            g = Graph()
            bm = bind_model(g, params)
            za = st.diag.gaussian((cfg.batch_size, cfg.latent_dim))
            ca = st.diag.categories(cfg.batch_size, 1, t - 1)
            align = replay_alignment_loss(g, bm, snap, g.tensor(za), ca)
            grads = _grads(align, bm.gen)
            value = float(align.value)
            grad_max = max(float(np.abs(v).max()) for v in grads.values())
        else:
            value, grad_max = 0.0, 0.0
        report.add(global_iter, t, "ra_loss_start", None, value)
        report.add(global_iter, t, "ra_grad_maxabs_start", None, grad_max)


def run_task(cfg: TrainConfig, schedule: TaskSchedule, t: int, params: ModelParams,
             opt_g: AdamState, opt_d: AdamState, run_rng: Rng, *,
             fisher: FisherState | None = None, report: MetricsReport | None = None,
             global_iter: int = 0, evaluator=None) -> int:
    """One task's training loop; returns the advanced global iteration count.

    Metric rows are appended every eval_every iterations: the last iteration's
    loss terms, a 0.0 placeholder for this strategy's inactive penalty term,
    and whatever the evaluator callback returns as (metric, category, value)
    triples. A snapshot-drift row (max absolute change of the frozen replay
    generator, expected exactly 0.0) is appended at task end for the
    snapshot-based strategies.
    """
    if report is None:
        report = MetricsReport()
    strategy = cfg.strategy
    st = _Streams.for_task(run_rng, t)
    pool = _joint_pool(schedule) if strategy == "JT" else schedule.train[t - 1]

    snap = None
    snap_copy = None
    if strategy in ("MERGAN_JTR", "MERGAN_RA") and t >= 2:
        snap = snapshot(params)
        snap_copy = {k: v.copy() for k, v in snap.gen.items()}

    _start_diagnostics(cfg, params, t, st, snap, fisher, report, global_iter)

    for it in range(1, cfg.iters_per_task + 1):
        for _ in range(cfg.n_critic):
            d_terms = _critic_update(cfg, params, opt_d, pool, t, st, snap)
        g_terms = _gen_update(cfg, params, opt_g, t, st, snap, fisher)
        global_iter += 1
        _check_finite(d_terms, t, it)
        _check_finite(g_terms, t, it)
        if it % cfg.eval_every == 0:
            for name, value in {**d_terms, **g_terms}.items():
                report.add(global_iter, t, name, None, value)
            if strategy == "EWC" and "ewc_penalty" not in g_terms:
                report.add(global_iter, t, "ewc_penalty", None, 0.0)
            if strategy == "MERGAN_RA" and "ra_loss" not in g_terms:
                report.add(global_iter, t, "ra_loss", None, 0.0)
            if evaluator is not None:
                for metric, category, value in evaluator(params, t, global_iter):
                    report.add(global_iter, t, metric, category, value)

    if strategy in ("MERGAN_JTR", "MERGAN_RA"):
        drift = 0.0
        if snap is not None:
            drift = max(float(np.abs(snap.gen[k] - snap_copy[k]).max()) for k in snap_copy)
        report.add(global_iter, t, "snapshot_drift", None, drift)
    return global_iter


def run_sequence(cfg: TrainConfig, schedule: TaskSchedule, *, evaluator=None,
                 on_task_end=None, start_task: int = 1, stop_after_task: int = 0,
                 params: ModelParams | None = None, opt_g: AdamState | None = None,
                 opt_d: AdamState | None = None, global_iter: int = 0,
                 report: MetricsReport | None = None) -> SequenceResult:
    """Train tasks start_task..M in order, evaluating and snapshotting each.

    Fresh runs build parameters from the seed's "init" stream. Pass params,
    both optimizer states, global_iter and start_task together to continue a
    run from a task boundary; the trajectory is then identical to the
    uninterrupted run because every stream is derived from (seed, task).
    on_task_end(t, params, opt_g, opt_d, global_iter) fires after each task.
    stop_after_task > 0 ends the run early at that task boundary. Callers that
    need metric rows mid-run (for per-task flushing) may pass their own report.
    """
    root = Rng(cfg.seed)
    if params is None:
        arch = Architecture(n_categories=schedule.n_tasks, latent_dim=cfg.latent_dim,
                            canvas=schedule.canvas)
        params = init_params(arch, root.split("init"))
        opt_g = AdamState.for_config(params.gen, cfg)
        opt_d = AdamState.for_config({**params.disc, **params.cls}, cfg)
    elif opt_g is None or opt_d is None:
        raise ConfigError("resuming needs params together with both optimizer states")
    if params.arch.n_categories != schedule.n_tasks:
        raise ConfigError(f"parameters cover {params.arch.n_categories} categories "
                          f"but the schedule has {schedule.n_tasks} tasks")

    if report is None:
        report = MetricsReport()
    result = SequenceResult(params, report, [], opt_g, opt_d, global_iter)
    last_task = schedule.n_tasks if stop_after_task <= 0 else min(stop_after_task,
                                                                  schedule.n_tasks)
    fisher = None
    for t in range(start_task, last_task + 1):
        if cfg.strategy == "EWC" and t >= 2 and cfg.lambda_ewc > 0:
            fisher = estimate_fisher(params, t - 1, cfg.fisher_samples,
                                     root.split(f"task{t}/fisher"))
        before = result.global_iter
        result.global_iter = run_task(cfg, schedule, t, params, opt_g, opt_d, root,
                                      fisher=fisher, report=report,
                                      global_iter=result.global_iter, evaluator=evaluator)
        result.n_critic_updates += (result.global_iter - before) * cfg.n_critic
        result.n_gen_updates += result.global_iter - before
        result.task_end_params.append(snapshot(params))
        if on_task_end is not None:
            on_task_end(t, params, opt_g, opt_d, result.global_iter)
    return result


def _tagged(cfg: TrainConfig, tag: str) -> TrainConfig:
    return cfg if cfg.strategy == tag else replace(cfg, strategy=tag)


def train_joint(cfg: TrainConfig, schedule: TaskSchedule, **kw) -> SequenceResult:
    """Upper bound: every task segment trains on all categories jointly."""
    return run_sequence(_tagged(cfg, "JT"), schedule, **kw)


def train_sft(cfg: TrainConfig, schedule: TaskSchedule, **kw) -> SequenceResult:
    """Lower bound: plain fine-tuning on each task's category, GAN terms only."""
    return run_sequence(_tagged(cfg, "SFT"), schedule, **kw)


def train_ewc(cfg: TrainConfig, schedule: TaskSchedule, **kw) -> SequenceResult:
    """SFT with a Fisher-weighted quadratic anchor on the generator."""
    return run_sequence(_tagged(cfg, "EWC"), schedule, **kw)


def train_mergan_jtr(cfg: TrainConfig, schedule: TaskSchedule, **kw) -> SequenceResult:
    """Joint retraining: real batches extended with frozen-snapshot replays."""
    return run_sequence(_tagged(cfg, "MERGAN_JTR"), schedule, **kw)


def train_mergan_ra(cfg: TrainConfig, schedule: TaskSchedule, **kw) -> SequenceResult:
    """SFT plus output alignment to a frozen snapshot on previous categories."""
    return run_sequence(_tagged(cfg, "MERGAN_RA"), schedule, **kw)
