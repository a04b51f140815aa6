"""Differentiable versions of the network ops, each with a hand-written adjoint.

Every function takes the tape first and returns a :class:`Var`.  Non-trainable
inputs (masks, axes, labels, indices) are passed as plain arrays.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .. import layers
from ..geometry import axis_frame
from .tape import Tape, Var


# --- affine maps ----------------------------------------------------------------

def _matmul_features(t: Tape, x: Var, W: Var, k: int) -> Var:
    """W applied along the feature axis of x, where each feature spans k trailing numbers."""
    X = x.value
    if k == 0:
        out = X @ W.value.T

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g @ W.value, g2.T @ X.reshape(-1, X.shape[-1])
        return t.record(out, (x, W), bwd)

    lead = X.shape[:-1 - (1 if k == 3 else 2)]
    F = W.value.shape[1]
    X3 = X.reshape(lead + (F, k))
    out = (W.value @ X3).reshape(lead + (W.value.shape[0],) + X.shape[len(lead) + 1:])

    def bwd(g):
        g3 = g.reshape(lead + (W.value.shape[0], k))
        dX = (W.value.T @ g3).reshape(X.shape)
        dW = np.tensordot(g3.reshape(-1, g3.shape[-2], k), X3.reshape(-1, F, k), axes=([0, 2], [0, 2]))
        return dX, dW
    return t.record(out, (x, W), bwd)


def _add_bias(t: Tape, x: Var, b: Var, identity: bool) -> Var:
    if identity:
        eye = np.eye(3)
        out = x.value + b.value[:, None, None] * eye

        def bwd(g):
            tr = np.trace(g, axis1=-2, axis2=-1)
            return g, tr.reshape(-1, tr.shape[-1]).sum(axis=0)
    else:
        out = x.value + b.value

        def bwd(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
    return t.record(out, (x, b), bwd)


def scalar_affine(t: Tape, s: Var, W: Var, b: Var | None = None) -> Var:
    y = _matmul_features(t, s, W, 0)
    return y if b is None else _add_bias(t, y, b, identity=False)


def vector_linear(t: Tape, v: Var, W: Var) -> Var:
    return _matmul_features(t, v, W, 3)


def tensor_affine(t: Tape, T: Var, W: Var, b: Var | None = None) -> Var:
    y = _matmul_features(t, T, W, 9)
    return y if b is None else _add_bias(t, y, b, identity=True)


# --- SO(2)-about-axis maps ----------------------------------------------------------

def _frame(jhat: np.ndarray | None, ndim: int):
    """(Q, Q^T) broadcast over the feature axes, or (None, None) when ``jhat`` is None."""
    if jhat is None:
        return None, None
    Q = axis_frame(jhat)
    Q = Q.reshape(Q.shape[:1] + (1,) * ndim + (3, 3))
    return Q, np.swapaxes(Q, -1, -2)


def _cmatmul_grads(g_out: np.ndarray, x: np.ndarray, K: np.ndarray):
    """Adjoints of y = x @ K.T for complex (or real) x, K.

    Gradients use the convention dL/dRe + i dL/dIm.
    """
    gx = g_out @ np.conj(K)
    gK = g_out.reshape(-1, g_out.shape[-1]).T @ np.conj(x.reshape(-1, x.shape[-1]))
    return gx, gK


def _phase_grads(gK: np.ndarray, K: np.ndarray, psi: np.ndarray):
    """For K = m exp(i psi): (dL/dm, dL/dpsi)."""
    dm = np.real(np.exp(-1j * psi) * gK)
    dpsi = np.imag(np.conj(K) * gK)
    return dm, dpsi


def so2_vector(t: Tape, v: Var, jhat: np.ndarray | None, a: Var, b: Var, phi: Var) -> Var:
    """y_i = sum_j A(a_ij, b_ij, phi_ij) v_j about per-row axes ``jhat`` (B, 3).

    ``jhat=None`` means the inputs are already expressed in their axis frame
    (axis along z), which skips the change of basis.
    """
    Q, Qt = _frame(jhat, v.value.ndim - 3)
    vp = v.value if Q is None else v.value @ Qt
    z = vp[..., 0] + 1j * vp[..., 1]
    C = b.value * np.exp(1j * phi.value)
    zo = z @ C.T
    wo = vp[..., 2] @ a.value.T
    out = np.stack([zo.real, zo.imag, wo], axis=-1)
    if Q is not None:
        out = out @ Q

    def bwd(g):
        gp = g if Q is None else g @ Qt
        gz, gC = _cmatmul_grads(gp[..., 0] + 1j * gp[..., 1], z, C)
        gw, ga = _cmatmul_grads(gp[..., 2], vp[..., 2], a.value)
        db, dphi = _phase_grads(gC, C, phi.value)
        dv = np.stack([gz.real, gz.imag, gw], axis=-1)
        return (dv if Q is None else dv @ Q), ga, db, dphi
    return t.record(out, (v, a, b, phi), bwd)


def so2_tensor(t: Tape, T: Var, jhat: np.ndarray | None, a: Var, b: Var, phi: Var,
               a2: Var, b2: Var, phi2: Var) -> Var:
    """Y_i = sum_j A(a, b, phi)_ij T_j B(a2, b2, phi2)_ij^T about axes ``jhat`` (None: z)."""
    Q, Qt = _frame(jhat, T.value.ndim - 3)
    blocks = layers.split_tensor_blocks(T.value if Q is None else Q @ T.value @ Qt)
    p = layers.SO2Params(a.value, b.value, phi.value, a2.value, b2.value, phi2.value)
    Ks = layers.so2_tensor_weights(p)
    out = layers.merge_tensor_blocks(*(x @ K.T for x, K in zip(blocks, Ks)))
    if Q is not None:
        out = Qt @ out @ Q

    def bwd(g):
        G = g if Q is None else Q @ g @ Qt
        G00, G01, G10, G11 = G[..., 0, 0], G[..., 0, 1], G[..., 1, 0], G[..., 1, 1]
        g_out = ((G00 + G11) + 1j * (G10 - G01),
                 (G00 - G11) + 1j * (G01 + G10),
                 G[..., 0, 2] + 1j * G[..., 1, 2],
                 G[..., 2, 0] + 1j * G[..., 2, 1],
                 G[..., 2, 2])
        gx, gK = zip(*(_cmatmul_grads(go, x, K) for go, x, K in zip(g_out, blocks, Ks)))
        gzc, gza, gcol, grow, gzz = gx

        dTp = np.empty(T.value.shape)
        dTp[..., 0, 0] = 0.5 * (gzc.real + gza.real)
        dTp[..., 1, 1] = 0.5 * (gzc.real - gza.real)
        dTp[..., 1, 0] = 0.5 * (gzc.imag + gza.imag)
        dTp[..., 0, 1] = 0.5 * (gza.imag - gzc.imag)
        dTp[..., 0, 2] = gcol.real
        dTp[..., 1, 2] = gcol.imag
        dTp[..., 2, 0] = grow.real
        dTp[..., 2, 1] = grow.imag
        dTp[..., 2, 2] = gzz
        dT = dTp if Q is None else Qt @ dTp @ Q

        a1v, b1v, p1v, a2v, b2v, p2v = p.a, p.b, p.phi, p.a2, p.b2, p.phi2
        da1, db1, dp1 = np.zeros_like(a1v), np.zeros_like(b1v), np.zeros_like(p1v)
        da2, db2, dp2 = np.zeros_like(a2v), np.zeros_like(b2v), np.zeros_like(p2v)
        # conformal xy: b1 b2 exp(i(phi1 - phi2))
        dm, dpsi = _phase_grads(gK[0], Ks[0], p1v - p2v)
        db1 += dm * b2v; db2 += dm * b1v; dp1 += dpsi; dp2 -= dpsi
        # anticonformal xy: b1 b2 exp(i(phi1 + phi2))
        dm, dpsi = _phase_grads(gK[1], Ks[1], p1v + p2v)
        db1 += dm * b2v; db2 += dm * b1v; dp1 += dpsi; dp2 += dpsi
        # column: a2 b1 exp(i phi1)
        dm, dpsi = _phase_grads(gK[2], Ks[2], p1v)
        da2 += dm * b1v; db1 += dm * a2v; dp1 += dpsi
        # row: a1 b2 exp(i phi2)
        dm, dpsi = _phase_grads(gK[3], Ks[3], p2v)
        da1 += dm * b2v; db2 += dm * a1v; dp2 += dpsi
        # zz: a1 a2
        da1 += gK[4] * a2v; da2 += gK[4] * a1v
        return dT, da1, db1, dp1, da2, db2, dp2
    return t.record(out, (T, a, b, phi, a2, b2, phi2), bwd)


# --- bilinear mixing -------------------------------------------------------------------

def _split(x: np.ndarray, axis: int, F: int):
    return layers._halves(x, axis, F)


def _join(lo, hi, axis):
    return np.concatenate([lo, hi], axis=axis)


def bilinear(t: Tape, s: Var, v: Var, T: Var | None = None):
    """Differentiable :func:`btnet.layers.bilinear_mix`; returns (s, v, T) Vars."""
    tv = None if T is None else T.value
    F = layers.bilinear_feature_count(s.value, v.value, tv)
    sa, sb = _split(s.value, -1, F)
    va, vb = _split(v.value, -2, F)
    Ta, Tb = (None, None) if T is None else _split(tv, -3, F)
    s_out, v_out, t_out = layers.bilinear_mix(s.value, v.value, tv)
    inputs = (s, v) if T is None else (s, v, T)

    def pack(dsa, dsb, dva, dvb, dTa=None, dTb=None):
        grads = [_join(dsa, dsb, -1), _join(dva, dvb, -2)]
        if T is not None:
            grads.append(_join(dTa, dTb, -3))
        return grads

    def bwd_s(g):
        g1, g2 = g[..., :F], g[..., F:2 * F]
        dva, dvb = g2[..., None] * vb, g2[..., None] * va
        if T is None:
            return pack(g1 * sb, g1 * sa, dva, dvb)
        g3 = g[..., 2 * F:, None, None]
        return pack(g1 * sb, g1 * sa, dva, dvb, g3 * Tb, g3 * Ta)

    def bwd_v(g):
        g1, g2 = g[..., :F, :], g[..., F:2 * F, :]
        dsa = np.sum(g1 * vb, axis=-1)
        dvb = sa[..., None] * g1 + np.cross(g2, va)
        dva = np.cross(vb, g2)
        if T is None:
            return pack(dsa, np.zeros_like(sb), dva, dvb)
        g3 = g[..., 2 * F:, :]
        dTa = g3[..., :, None] * vb[..., None, :]
        dvb = dvb + (np.swapaxes(Ta, -1, -2) @ g3[..., None])[..., 0]
        return pack(dsa, np.zeros_like(sb), dva, dvb, dTa, np.zeros_like(Tb))

    def bwd_t(g):
        g1, g2, g3 = g[..., :F, :, :], g[..., F:2 * F, :, :], g[..., 2 * F:, :, :]
        dsa = np.sum(g1 * Tb, axis=(-2, -1))
        dva = (g2 @ vb[..., None])[..., 0]
        dvb = (np.swapaxes(g2, -1, -2) @ va[..., None])[..., 0]
        dTa = g3 @ np.swapaxes(Tb, -1, -2)
        dTb = sa[..., None, None] * g1 + np.swapaxes(Ta, -1, -2) @ g3
        return pack(dsa, np.zeros_like(sb), dva, dvb, dTa, dTb)

    so = t.record(s_out, inputs, bwd_s)
    vo = t.record(v_out, inputs, bwd_v)
    to = None if T is None else t.record(t_out, inputs, bwd_t)
    return so, vo, to


# --- nonlinearities ---------------------------------------------------------------------

_branch_log: list | None = None


@contextmanager
def record_branches():
    """Collect the branch taken by every activation entry evaluated inside the block.

    Two evaluations with equal logs ran through the same pieces, so no
    activation kink lies between them.  The log is module state: use it from
    one thread only (it exists for the gradient oracle).
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(code: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.asarray(code, dtype=np.int8))


def relu(t: Tape, x: Var) -> Var:
    pos = x.value >= 0
    _log_branch(pos)
    return t.record(np.where(pos, x.value, 0.0), (x,), lambda g: (g * pos,))


def clip_unit(t: Tape, x: Var, lower: float = 0.0) -> Var:
    """clip(x, lower, 1): ReLU (lower=0) or sign-symmetric (lower=-1) with unit saturation."""
    lin = (x.value >= lower) & (x.value <= 1.0)
    _log_branch(np.where(x.value < lower, 0, np.where(x.value > 1.0, 2, 1)))
    return t.record(np.clip(x.value, lower, 1.0), (x,), lambda g: (g * lin,))


def _norm_saturate(t: Tape, x: Var, axes: tuple[int, ...]) -> Var:
    X = x.value
    n = np.sqrt(np.sum(X * X, axis=axes, keepdims=True))
    lin = n <= 1.0
    _log_branch(lin)
    scale = np.where(lin, 1.0, n)
    out = X / scale

    def bwd(g):
        # saturated branch: (g - (g.u) u) / |x| with u = x / |x|
        gu = np.sum(g * out, axis=axes, keepdims=True)
        return (np.where(lin, g, (g - gu * out) / scale),)
    return t.record(out, (x,), bwd)


def vrelu(t: Tape, v: Var) -> Var:
    return _norm_saturate(t, v, (-1,))


def trelu(t: Tape, T: Var) -> Var:
    return _norm_saturate(t, T, (-2, -1))


# --- particle-axis plumbing ----------------------------------------------------------

def _mask_shape(mask: np.ndarray, ndim: int) -> np.ndarray:
    return mask.astype(np.float64).reshape(mask.shape + (1,) * (ndim - 2))


def apply_mask(t: Tape, x: Var, mask: np.ndarray) -> Var:
    m = _mask_shape(mask, x.value.ndim)
    return t.record(x.value * m, (x,), lambda g: (g * m,))


def masked_sum_pool(t: Tape, x: Var, mask: np.ndarray) -> Var:
    """Sum over the particle axis (axis 1) of valid slots, keeping P = 1."""
    m = _mask_shape(mask, x.value.ndim)
    out = np.sum(x.value * m, axis=1, keepdims=True)
    return t.record(out, (x,), lambda g: (g * m,))


def segment_sum(t: Tape, x: Var, segment: np.ndarray, n_segments: int) -> Var:
    """Sum rows of x (N, ...) into ``n_segments`` groups given a segment id per row."""
    segment = np.asarray(segment, dtype=np.intp)
    onehot = np.zeros((n_segments, segment.size))
    onehot[segment, np.arange(segment.size)] = 1.0
    X = x.value.reshape(segment.size, -1)
    out = (onehot @ X).reshape((n_segments,) + x.value.shape[1:])
    return t.record(out, (x,), lambda g: (g.reshape(n_segments, -1)[segment].reshape(x.value.shape),))


def squeeze_particles(t: Tape, x: Var) -> Var:
    """(B, 1, ...) -> (B, ...) after pooling."""
    return t.record(x.value[:, 0], (x,), lambda g: (g[:, None],))


def embedding(t: Tape, table: Var, idx: np.ndarray, mask: np.ndarray | None = None) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    out = table.value[idx]
    m = None if mask is None else _mask_shape(mask, out.ndim)
    if m is not None:
        out = out * m
    n_rows = table.value.shape[0]

    def bwd(g):
        if m is not None:
            g = g * m
        flat = idx.ravel()
        g2 = g.reshape(flat.size, -1)
        dE = np.stack([np.bincount(flat, weights=g2[:, c], minlength=n_rows)
                       for c in range(g2.shape[1])], axis=1)
        return (dE.reshape(table.value.shape),)
    return t.record(out, (table,), bwd)


def concat(t: Tape, xs: list[Var], axis: int) -> Var:
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return t.record(out, tuple(xs), lambda g: tuple(np.split(g, edges, axis=axis)))


def invariant_readout(t: Tape, s: Var, v: Var | None, T: Var | None) -> Var:
    """Pooled (B, 1, ...) channels -> (B, Fs + Fv + Ft) invariants.

    Raw scalars, squared vector magnitudes, squared Frobenius norms.
    """
    parts = [s.value[:, 0]]
    if v is not None:
        parts.append(np.sum(v.value[:, 0] ** 2, axis=-1))
    if T is not None:
        parts.append(np.sum(T.value[:, 0] ** 2, axis=(-2, -1)))
    out = np.concatenate(parts, axis=-1)
    Fs = s.value.shape[-1]
    Fv = 0 if v is None else v.value.shape[2]

    def bwd(g):
        ds = g[:, None, :Fs]
        dv = None if v is None else 2.0 * v.value * g[:, None, Fs:Fs + Fv, None]
        dT = None if T is None else 2.0 * T.value * g[:, None, Fs + Fv:, None, None]
        return ds, dv, dT
    return t.record(out, (s, v, T), bwd)


# --- losses ------------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    mx = np.max(logits, axis=-1, keepdims=True)
    z = logits - mx
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def cross_entropy(t: Tape, logits: Var, labels: np.ndarray) -> Var:
    """Mean categorical cross entropy with a fused, stabilized log-softmax."""
    labels = np.asarray(labels)
    L = logits.value
    if labels.shape != L.shape[:1] or np.any((labels < 0) | (labels >= L.shape[-1])):
        raise ValueError("invalid label")
    labels = labels.astype(np.intp)
    lsm = log_softmax(L)
    n = L.shape[0]
    loss = -np.mean(lsm[np.arange(n), labels])

    def bwd(g):
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)
    return t.record(np.asarray(loss), (logits,), bwd)


def sum_all(t: Tape, x: Var) -> Var:
    return t.record(np.asarray(np.sum(x.value)), (x,), lambda g: (np.full(x.value.shape, float(g)),))


def mean_square(t: Tape, x: Var) -> Var:
    n = x.value.size
    return t.record(np.asarray(np.sum(x.value ** 2) / n), (x,), lambda g: (2.0 * g * x.value / n,))
