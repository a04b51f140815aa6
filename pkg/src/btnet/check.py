"""Self-verification: equivariance residuals per op, end-to-end invariance, gradient oracles.

``run_checks`` returns a :class:`CheckReport` whose lines list each op's max
residual next to its tolerance.  ``fault="transpose"`` is a negative control:
layer tests rotate their inputs by R^T while rotating outputs by R, and event
tests rotate impact vectors by R^T.  A correct build must then fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers
from .autodiff import check_op_gradients, finite_diff_check, ops
from .datagen import GenConfig, generate_dataset
from .geometry import random_rotation, random_rotations, rotation_from_axis_angle, unit
from .models import Batch, ModelConfig, build_model

FAULTS = ("transpose",)
EQUIVARIANCE_TOL = 1e-10
INVARIANCE_TOL = 1e-6
GRADIENT_TOL = 1e-5


@dataclass
class CheckResult:
    suite: str
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.tol)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.suite:<12} {self.name:<28} max residual {self.residual:.3e}  (tol {self.tol:.0e})"


@dataclass
class CheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = [r.line() for r in self.results]
        n_fail = sum(not r.passed for r in self.results)
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed in {self.seconds:.1f} s"
                     + ("" if n_fail == 0 else f"; {n_fail} FAILED"))
        return "\n".join(lines)


def _input_rotation(R: np.ndarray, fault: str | None) -> np.ndarray:
    if fault is None:
        return R
    if fault == "transpose":
        return np.swapaxes(R, -1, -2)
    raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")


def _rotate_batch(batch: Batch, R: np.ndarray, fault: str | None) -> Batch:
    """Rotate all event vectors; the fault rotates impact vectors by R^T instead."""
    out = batch.rotated(R)
    if fault is None:
        return out
    bad = batch.rotated(_input_rotation(R, fault))
    return replace(out, a=bad.a)


def _rv(v, R):
    return v @ R.T


def _rt(T, R):
    return R @ T @ R.T


def _maxabs(*pairs) -> float:
    return max(float(np.max(np.abs(a - b))) if np.size(a) else 0.0 for a, b in pairs)


def equivariance_suite(rng: np.random.Generator, n_rot: int = 100, fault: str | None = None,
                       F: int = 4, n: int = 3) -> list[CheckResult]:
    """Residuals of f(rho_in(R) x) - rho_out(R) f(x) for every layer, over ``n_rot`` rotations."""
    worst: dict[str, float] = {}

    def note(name, r):
        worst[name] = max(worst.get(name, 0.0), r)

    for _ in range(n_rot):
        R = random_rotation(rng).m
        Ri = _input_rotation(R, fault)
        s = rng.normal(size=(n, 2 * F))
        v = rng.normal(size=(n, 2 * F, 3))
        T = rng.normal(size=(n, 2 * F, 3, 3))
        pa = layers.AffineParams(rng.normal(size=(F, 2 * F)), rng.normal(size=F), rng.normal(size=F))

        # scalars carry the trivial representation: only the inputs' own values matter
        note("scalar_affine", _maxabs((layers.scalar_affine(pa, s), layers.scalar_affine(pa, s.copy()))))
        note("vector_linear", _maxabs((layers.vector_linear(pa, _rv(v, Ri)), _rv(layers.vector_linear(pa, v), R))))
        note("tensor_affine", _maxabs((layers.tensor_affine(pa, _rt(T, Ri)),
                                       _rt(layers.tensor_affine(pa, T), R))))
        out = layers.bilinear_mix(s, v, T)
        rot = layers.bilinear_mix(s, _rv(v, Ri), _rt(T, Ri))
        note("bilinear_mix", _maxabs((rot[0], out[0]), (rot[1], _rv(out[1], R)), (rot[2], _rt(out[2], R))))
        out = layers.bilinear_mix(s, v)
        rot = layers.bilinear_mix(s, _rv(v, Ri))
        note("bilinear_mix (no tensors)", _maxabs((rot[0], out[0]), (rot[1], _rv(out[1], R))))
        note("vrelu", _maxabs((layers.vrelu(_rv(v, Ri)), _rv(layers.vrelu(v), R))))
        note("trelu", _maxabs((layers.trelu(_rt(T, Ri)), _rt(layers.trelu(T), R))))

        # SO(2) layers commute with rotations about their own axis.
        jhat = unit(rng.normal(size=3))
        Rj = rotation_from_axis_angle(jhat, rng.uniform(0, 2 * np.pi)).m
        Rji = _input_rotation(Rj, fault)
        p = layers.SO2Params(*(rng.normal(size=(F, 2 * F)) for _ in range(6)))
        vb, Tb = v[None], T[None]           # one batch row, axis jhat
        jb = jhat[None]
        note("so2_vector_linear", _maxabs((layers.so2_vector_linear(p, jhat, _rv(v, Rji)),
                                           _rv(layers.so2_vector_linear(p, jhat, v), Rj))))
        note("so2_tensor_linear", _maxabs((layers.so2_tensor_linear(p, jhat, _rt(T, Rji)),
                                           _rt(layers.so2_tensor_linear(p, jhat, T), Rj))))
        note("so2_vector_linear_framed", _maxabs((layers.so2_vector_linear_framed(p, jb, _rv(vb, Rji)),
                                                  _rv(layers.so2_vector_linear_framed(p, jb, vb), Rj))))
        note("so2_tensor_linear_framed", _maxabs((layers.so2_tensor_linear_framed(p, jb, _rt(Tb, Rji)),
                                                  _rt(layers.so2_tensor_linear_framed(p, jb, Tb), Rj))))
    return [CheckResult("equivariance", k, r, EQUIVARIANCE_TOL) for k, r in worst.items()]


def randomize_output_layer(store, rng: np.random.Generator) -> None:
    """Give the zero-initialised logit layer random weights, in place.

    With ``out.W = 0`` every logit is the bias, so invariance residuals and
    all upstream gradients would vanish trivially.
    """
    W = store.view("out.W")
    W[...] = rng.normal(0.0, 1.0 / np.sqrt(W.shape[1]), W.shape)
    store.view("out.b")[...] = rng.normal(0.0, 0.1, store.view("out.b").shape)


def _invariance_model(model_class: str, bilinear: bool, so2: bool, seed: int):
    model = build_model(ModelConfig(model_class=model_class, enable_bilinear=bilinear, enable_so2=so2,
                                    rep_width=8, latent_dim=8, hidden_width=16, seed=seed))
    rng = np.random.default_rng(seed + 1)
    randomize_output_layer(model.store, rng)
    generic_so2_point(model.store, rng)
    return model


def invariance_suite(rng: np.random.Generator, n_events: int = 20, n_rot: int = 50,
                     fault: str | None = None, seed: int = 0) -> list[CheckResult]:
    """Logit changes under global rotations and, for SO(2) models, rotations about each jet axis."""
    ds = generate_dataset(GenConfig(seed=seed), n_events, stream=7)
    batch = Batch.from_dataset(ds)
    results = []
    for model_class, bil, so2 in (("vector", True, False), ("tensor", True, True), ("vector", True, True)):
        model = _invariance_model(model_class, bil, so2, seed)
        base = model.logits(batch)
        glob = axial = 0.0
        Rs = random_rotations(rng, n_rot)
        for R in Rs:
            glob = max(glob, _maxabs((model.logits(_rotate_batch(batch, R, fault)), base)))
        if so2:
            for _ in range(n_rot):
                angles = rng.uniform(0, 2 * np.pi, len(batch))
                Rj = np.stack([rotation_from_axis_angle(j, a).m for j, a in zip(batch.jhat, angles)])
                axial = max(axial, _maxabs((model.logits(_rotate_batch(batch, Rj, fault)), base)))
        results.append(CheckResult("invariance", f"{model.cfg.label} global", glob, INVARIANCE_TOL))
        if so2:
            results.append(CheckResult("invariance", f"{model.cfg.label} jet-axis", axial, INVARIANCE_TOL))
    return results


def op_gradient_suite(rng: np.random.Generator) -> list[CheckResult]:
    """Finite differences against each op's adjoint on small random inputs."""
    B, P, F, O = 2, 3, 4, 3
    jhat = unit(rng.normal(size=(B, 3)))
    mask = np.array([[True, True, False], [True, False, False]])
    idx = rng.integers(0, 3, (B, P))
    labels = np.array([0, 1])
    g = lambda *shape: rng.normal(size=shape)           # noqa: E731
    so2_keys = ("a", "b", "phi", "a2", "b2", "phi2")
    cases = {
        "scalar_affine": (lambda t, x: ops.scalar_affine(t, x["s"], x["W"], x["b"]),
                          dict(s=g(B, P, F), W=g(O, F), b=g(O))),
        "vector_linear": (lambda t, x: ops.vector_linear(t, x["v"], x["W"]), dict(v=g(B, P, F, 3), W=g(O, F))),
        "tensor_affine": (lambda t, x: ops.tensor_affine(t, x["T"], x["W"], x["b"]),
                          dict(T=g(B, P, F, 3, 3), W=g(O, F), b=g(O))),
        "so2_vector": (lambda t, x: ops.so2_vector(t, x["v"], jhat, x["a"], x["b"], x["phi"]),
                       dict(v=g(B, P, F, 3), a=g(O, F), b=g(O, F), phi=g(O, F))),
        "so2_tensor": (lambda t, x: ops.so2_tensor(t, x["T"], jhat, *(x[k] for k in so2_keys)),
                       dict(T=g(B, P, F, 3, 3), **{k: g(O, F) for k in so2_keys})),
        "vrelu": (lambda t, x: ops.vrelu(t, x["v"]), dict(v=g(B, P, F, 3))),
        "trelu": (lambda t, x: ops.trelu(t, x["T"]), dict(T=0.5 * g(B, P, F, 3, 3))),
        "relu": (lambda t, x: ops.relu(t, x["s"]), dict(s=g(B, P, F))),
        "clip_unit": (lambda t, x: ops.clip_unit(t, x["s"]), dict(s=g(B, P, F))),
        "masked_sum_pool": (lambda t, x: ops.masked_sum_pool(t, x["T"], mask), dict(T=g(B, P, F, 3, 3))),
        "segment_sum": (lambda t, x: ops.segment_sum(t, x["v"], np.array([0, 1, 1, 0]), 2),
                        dict(v=g(4, 1, F, 3))),
        "embedding": (lambda t, x: ops.embedding(t, x["E"], idx, mask), dict(E=g(3, 3))),
        "invariant_readout": (lambda t, x: ops.invariant_readout(t, x["s"], x["v"], x["T"]),
                              dict(s=g(B, 1, F), v=g(B, 1, F, 3), T=g(B, 1, F, 3, 3))),
        "cross_entropy": (lambda t, x: ops.cross_entropy(t, x["z"], labels), dict(z=g(B, 2))),
    }
    for k in range(3):
        cases[f"bilinear[{'svt'[k]}]"] = (lambda t, x, k=k: ops.bilinear(t, x["s"], x["v"], x["T"])[k],
                                          dict(s=g(B, P, 2 * F), v=g(B, P, 2 * F, 3), T=g(B, P, 2 * F, 3, 3)))
    return [CheckResult("gradient", name, check_op_gradients(build, inputs, rng=rng), GRADIENT_TOL)
            for name, (build, inputs) in cases.items()]


def generic_so2_point(store, rng: np.random.Generator) -> None:
    """Move every SO(2) parameter to an O(1) random value, in place.

    The near-identity initialisation leaves off-diagonal connections at ~0.01,
    which shrinks their phase gradients below what central differences resolve.
    """
    for name in store.names():
        if ".so2" not in name:
            continue
        v = store.view(name)
        if name.endswith(("phi", "phi2")):
            v[...] = rng.uniform(-np.pi, np.pi, v.shape)
        else:
            v[...] = rng.normal(0.0, 1.0, v.shape)


def model_gradient_check(n_params: int = 64, seed: int = 0, n_events: int = 8, h: float = 1e-5) -> CheckResult:
    """Central differences on ``n_params`` random parameters of the full tensor+BiL+SO2 model.

    Parameters whose +-h perturbation moves some activation across a kink are
    replaced (see :func:`finite_diff_check`); the count is part of the name.
    """
    model = build_model(ModelConfig(model_class="tensor", enable_bilinear=True, enable_so2=True,
                                    rep_width=8, latent_dim=8, hidden_width=16, seed=seed))
    rng = np.random.default_rng(seed)
    randomize_output_layer(model.store, rng)
    generic_so2_point(model.store, rng)
    batch = Batch.from_dataset(generate_dataset(GenConfig(seed=seed), n_events, stream=8))
    res = finite_diff_check(lambda t: model.loss(t, batch), model.store, n_params, h=h, rng=rng, skip_kinks=True)
    name = f"{model.cfg.label} model ({len(res.indices)} params, {len(res.kinked)} at kinks)"
    return CheckResult("gradient", name, res.max_rel_error, GRADIENT_TOL)


def run_checks(seed: int = 0, fault: str | None = None, n_rot: int = 100, n_events: int = 20,
               n_event_rot: int = 50) -> CheckReport:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = equivariance_suite(rng, n_rot, fault)
    results += invariance_suite(rng, n_events, n_event_rot, fault, seed)
    results += op_gradient_suite(rng)
    results.append(model_gradient_check(seed=seed))
    return CheckReport(results, time.perf_counter() - t0)

