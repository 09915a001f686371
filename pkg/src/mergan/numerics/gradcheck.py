"""Finite-difference verification of autodiff gradients.

Central differences with step h compare against `backward`'s output. The
relative error convention is |a - b| / max(1e-6, |a|, |b|): relative where
gradients are large, absolute below 1e-6 where the difference quotient's own
rounding noise dominates.

The builder function must be a pure function of the supplied tensors: any
randomness (noise batches, interpolation coefficients) has to be drawn once by
the caller and closed over as constants, otherwise the 2N+1 evaluations
disagree about what function they are probing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Graph, backward


@dataclass
class FiniteDiffReport:
    tol: float
    h: float
    max_rel_err: float = 0.0
    worst_param: str = ""
    worst_index: int = -1
    n_coords: int = 0
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _eval(build_fn, point: dict) -> float:
    g = Graph()
    tensors = {name: g.tensor(v) for name, v in point.items()}
    return float(build_fn(g, tensors).value)


def finite_diff_check(build_fn, point: dict, h: float = 1e-5, tol: float = 1e-4) -> FiniteDiffReport:
    """Compare autodiff gradients of build_fn against central differences.

    build_fn(graph, tensors) must return a scalar Tensor; `point` maps names to
    numpy arrays giving the evaluation point. Every coordinate of every array
    is probed.
    """
    # C-contiguous copies: probing must never mutate caller arrays, and the
    # in-place coordinate writes below need reshape(-1) to be a view (np.array
    # keeps F-order for transposed inputs, so the order must be forced)
    point = {name: np.array(v, dtype=np.float64, order="C") for name, v in point.items()}
    g = Graph()
    tensors = {name: g.tensor(v) for name, v in point.items()}
    loss = build_fn(g, tensors)
    grads = backward(loss, list(tensors.values()))
    grad_values = {name: t.value for name, t in zip(tensors, grads)}

    report = FiniteDiffReport(tol=tol, h=h)
    for name, base in point.items():
        flat = base.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            shifted = {k: (v if k != name else base) for k, v in point.items()}
            flat[i] = orig + h
            f_plus = _eval(build_fn, shifted)
            flat[i] = orig - h
            f_minus = _eval(build_fn, shifted)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = float(grad_values[name].reshape(-1)[i])
            rel = abs(ad - fd) / max(1e-6, abs(ad), abs(fd))
            report.n_coords += 1
            if rel > worst:
                worst = rel
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = i
        report.per_param[name] = worst
    return report
