"""Adam with bias correction over a flat ParamStore."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    @classmethod
    def for_store(cls, store: ParamStore, **hyper) -> "AdamState":
        n = len(store)
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)


def adam_step(state: AdamState, store: ParamStore) -> None:
    """One Adam update of ``store.values`` in place, then zero the gradients."""
    if state.m is None:
        state.m = np.zeros(len(store))
        state.v = np.zeros(len(store))
    g = store.grads
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    store.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    store.zero_grad()
