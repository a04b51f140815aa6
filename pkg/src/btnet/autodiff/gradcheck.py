"""Central finite-difference oracle for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .tape import ParamStore, Tape, Var, backward

LossFn = Callable[[Tape], Var]


@dataclass
class GradCheckResult:
    max_rel_error: float
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    kinked: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __float__(self):
        return self.max_rel_error


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(loss_fn: LossFn, store: ParamStore, n_params: int, h: float = 1e-5,
                      rng: np.random.Generator | None = None, floor: float = 1e-6,
                      skip_kinks: bool = False) -> GradCheckResult:
    """Compare backward() against central differences on randomly chosen parameters.

    ``loss_fn`` must be deterministic and build its graph on the tape it is given.
    Returns the maximum relative error over the sampled parameters.

    With ``skip_kinks``, the branch of every activation entry (ReLU side,
    clip saturation, VReLU/TReLU linear or normalised) is recorded at x and
    x +- h.  If any branch differs, an activation kink lies inside
    [x - h, x + h] and the central difference is no oracle for the derivative;
    such parameters are listed in ``kinked`` and replaced by other random ones.
    The test looks at the forward pass only, so it cannot mask a backward bug.
    """
    rng = rng or np.random.default_rng(0)
    store.zero_grad()
    tape = Tape()
    backward(tape, loss_fn(tape))
    grads = store.grads.copy()
    store.zero_grad()

    def evaluate():
        if not skip_kinks:
            return float(loss_fn(Tape(enabled=False)).value), None
        with ops.record_branches() as log:
            value = float(loss_fn(Tape(enabled=False)).value)
        return value, log

    def same(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    base = evaluate()[1]

    n = min(n_params, len(store))
    order = rng.permutation(len(store))
    idx, numeric, kinked = [], [], []
    for i in order:
        if len(idx) == n:
            break
        old = store.values[i]
        store.values[i] = old + h
        fp, log_p = evaluate()
        store.values[i] = old - h
        fm, log_m = evaluate()
        store.values[i] = old
        if skip_kinks and not (same(base, log_p) and same(base, log_m)):
            kinked.append(i)
            continue
        idx.append(i)
        numeric.append((fp - fm) / (2.0 * h))
    idx, numeric = np.array(idx, dtype=np.int64), np.array(numeric)
    analytic = grads[idx]
    err = relative_error(analytic, numeric, floor)
    return GradCheckResult(float(err.max()) if len(idx) else 0.0, idx, analytic, numeric,
                           np.array(kinked, dtype=np.int64))


def check_op_gradients(build: Callable[[Tape, dict], Var], inputs: dict, h: float = 1e-5,
                       rng: np.random.Generator | None = None, floor: float = 1e-6) -> float:
    """Max relative error of every input's gradient for ``sum(build(...) * R)``.

    ``R`` is a fixed random cotangent, so all output components are exercised.
    Every entry of every input is perturbed; keep the inputs small.
    """
    rng = rng or np.random.default_rng(0)
    leaves = {k: Var(np.array(v, dtype=np.float64), requires_grad=True,
                     grad=np.zeros(np.shape(v))) for k, v in inputs.items()}
    probe = build(Tape(enabled=False), leaves).value
    R = rng.normal(size=probe.shape)

    def loss(t):
        out = build(t, leaves)
        return t.record(np.asarray(np.sum(out.value * R)), (out,), lambda g: (g * R,))

    def value():
        return build(Tape(enabled=False), leaves).value

    tape = Tape()
    backward(tape, loss(tape))
    worst = 0.0
    for v in leaves.values():
        flat, gflat = v.value.reshape(-1), v.grad.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            # difference the outputs before contracting with R: less cancellation
            numeric[i] = np.sum((fp - fm) * R) / (2.0 * h)
        if flat.size:
            worst = max(worst, float(relative_error(gflat, numeric, floor).max()))
    return worst
