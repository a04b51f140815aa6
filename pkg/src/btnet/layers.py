"""Equivariant layer primitives over scalar, vector and order-2 tensor features.

Feature axes come right before the representation axes: scalars ``(..., F)``,
vectors ``(..., F, 3)``, tensors ``(..., F, 3, 3)``.  All functions here are
plain numpy forward maps; the differentiable versions in :mod:`btnet.autodiff`
call into them.

SO(2)-about-axis maps come in two forms.  ``so2_vector_linear`` and
``so2_tensor_linear`` build every connection matrix explicitly from
``so2_matrix`` and serve as the reference.  The ``*_framed`` variants rotate
into a frame where the axis is z; there each connection matrix reduces to a
complex scale-rotation in the xy plane and a real scale along z, so the whole
layer becomes a handful of (complex) matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GeometryError, axis_frame, skew

UNIT_TOL = 1e-9


class LayerShapeError(ValueError):
    pass


@dataclass
class AffineParams:
    """Weights for one affine map per representation.

    ``b`` is the scalar-layer bias and ``b_t`` the coefficient of the identity
    bias for tensor layers.  Vector layers never carry a bias.
    """

    W: np.ndarray
    b: np.ndarray | None = None
    b_t: np.ndarray | None = None


@dataclass
class SO2Params:
    """(a, b, phi) per connection, each shaped (F_out, F_in).

    Tensor layers use the second triple (a2, b2, phi2) for the right factor.
    """

    a: np.ndarray
    b: np.ndarray
    phi: np.ndarray
    a2: np.ndarray | None = None
    b2: np.ndarray | None = None
    phi2: np.ndarray | None = None

    @property
    def shape(self):
        return self.a.shape


def _check_in(W: np.ndarray, n_in: int):
    if W.ndim != 2 or W.shape[1] != n_in:
        raise LayerShapeError(f"weight shape {W.shape} incompatible with {n_in} input features")


def scalar_affine(p: AffineParams, s: np.ndarray) -> np.ndarray:
    _check_in(p.W, s.shape[-1])
    y = s @ p.W.T
    if p.b is not None:
        if p.b.shape != (p.W.shape[0],):
            raise LayerShapeError(f"bias shape {p.b.shape} does not match {p.W.shape[0]} outputs")
        y = y + p.b
    return y


def vector_linear(p: AffineParams, v: np.ndarray) -> np.ndarray:
    _check_in(p.W, v.shape[-2])
    return p.W @ v


def tensor_affine(p: AffineParams, T: np.ndarray) -> np.ndarray:
    _check_in(p.W, T.shape[-3])
    lead = T.shape[:-3]
    y = (p.W @ T.reshape(lead + (T.shape[-3], 9))).reshape(lead + (p.W.shape[0], 3, 3))
    if p.b_t is not None:
        if p.b_t.shape != (p.W.shape[0],):
            raise LayerShapeError(f"bias shape {p.b_t.shape} does not match {p.W.shape[0]} outputs")
        y = y + p.b_t[:, None, None] * np.eye(3)
    return y


def _check_unit(jhat: np.ndarray):
    n = np.linalg.norm(jhat, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise GeometryError("axis must be a unit vector")


def so2_matrix(a, b, phi, jhat) -> np.ndarray:
    """(a jj^T + b (I - jj^T)) R_j(phi); broadcasts over the shapes of a, b, phi."""
    jhat = np.asarray(jhat, dtype=np.float64)
    _check_unit(jhat)
    a, b, phi = (np.asarray(x, dtype=np.float64)[..., None, None] for x in (a, b, phi))
    P = np.outer(jhat, jhat)
    K = skew(jhat)
    rot = np.eye(3) + np.sin(phi) * K + (1.0 - np.cos(phi)) * (K @ K)
    return (a * P + b * (np.eye(3) - P)) @ rot


def so2_vector_linear(p: SO2Params, jhat, v: np.ndarray) -> np.ndarray:
    """y_i = sum_j A(a_ij, b_ij, phi_ij) v_j with explicit 3x3 matrices."""
    if p.shape[1] != v.shape[-2]:
        raise LayerShapeError(f"SO(2) params {p.shape} vs {v.shape[-2]} input vectors")
    A = so2_matrix(p.a, p.b, p.phi, jhat)
    return np.einsum("ofcd,...fd->...oc", A, v)


def so2_tensor_linear(p: SO2Params, jhat, T: np.ndarray) -> np.ndarray:
    """Y_i = sum_j A(theta_ij) T_j B(varphi_ij)^T with explicit 3x3 matrices."""
    if p.shape[1] != T.shape[-3]:
        raise LayerShapeError(f"SO(2) params {p.shape} vs {T.shape[-3]} input tensors")
    A = so2_matrix(p.a, p.b, p.phi, jhat)
    B = so2_matrix(p.a2, p.b2, p.phi2, jhat)
    return np.einsum("ofcd,...fde,ofge->...ocg", A, T, B)


# --- frame-based SO(2) maps ---------------------------------------------------
# Leading axes are (B, ..., F[, 3[, 3]]) with one axis ``jhat`` per batch row.

def _frame(jhat: np.ndarray, extra: int) -> np.ndarray:
    jhat = np.asarray(jhat, dtype=np.float64)
    _check_unit(jhat)
    Q = axis_frame(jhat)
    return Q.reshape(Q.shape[:1] + (1,) * extra + (3, 3))


def so2_vector_weights(p: SO2Params):
    return p.b * np.exp(1j * p.phi), p.a


def so2_tensor_weights(p: SO2Params):
    """Per-block coefficients of the tensor map in the axis-aligned frame.

    Returns (conformal xy, anticonformal xy, xz column, zx row, zz) weights.
    """
    e1, e2 = np.exp(1j * p.phi), np.exp(1j * p.phi2)
    bb = p.b * p.b2
    return (bb * e1 * np.conj(e2), bb * e1 * e2, p.a2 * p.b * e1, p.a * p.b2 * e2, p.a * p.a2)


def split_tensor_blocks(Tp: np.ndarray):
    """Split frame tensors into the pieces the SO(2) tensor map acts on."""
    M00, M01, M10, M11 = Tp[..., 0, 0], Tp[..., 0, 1], Tp[..., 1, 0], Tp[..., 1, 1]
    zc = 0.5 * ((M00 + M11) + 1j * (M10 - M01))
    za = 0.5 * ((M00 - M11) + 1j * (M01 + M10))
    col = Tp[..., 0, 2] + 1j * Tp[..., 1, 2]
    row = Tp[..., 2, 0] + 1j * Tp[..., 2, 1]
    return zc, za, col, row, Tp[..., 2, 2]


def merge_tensor_blocks(zc, za, col, row, zz) -> np.ndarray:
    out = np.empty(zz.shape + (3, 3))
    p, q, r, s = zc.real, zc.imag, za.real, za.imag
    out[..., 0, 0] = p + r
    out[..., 0, 1] = s - q
    out[..., 1, 0] = q + s
    out[..., 1, 1] = p - r
    out[..., 0, 2] = col.real
    out[..., 1, 2] = col.imag
    out[..., 2, 0] = row.real
    out[..., 2, 1] = row.imag
    out[..., 2, 2] = zz
    return out


def so2_vector_linear_framed(p: SO2Params, jhat: np.ndarray, v: np.ndarray) -> np.ndarray:
    if p.shape[1] != v.shape[-2]:
        raise LayerShapeError(f"SO(2) params {p.shape} vs {v.shape[-2]} input vectors")
    Q = _frame(jhat, v.ndim - 3)
    vp = v @ np.swapaxes(Q, -1, -2)
    C, a = so2_vector_weights(p)
    z = (vp[..., 0] + 1j * vp[..., 1]) @ C.T
    w = vp[..., 2] @ a.T
    return np.stack([z.real, z.imag, w], axis=-1) @ Q


def so2_tensor_linear_framed(p: SO2Params, jhat: np.ndarray, T: np.ndarray) -> np.ndarray:
    if p.shape[1] != T.shape[-3]:
        raise LayerShapeError(f"SO(2) params {p.shape} vs {T.shape[-3]} input tensors")
    Q = _frame(jhat, T.ndim - 3)
    Tp = Q @ T @ np.swapaxes(Q, -1, -2)
    blocks = split_tensor_blocks(Tp)
    weights = so2_tensor_weights(p)
    out = [x @ K.T for x, K in zip(blocks, weights)]
    return np.swapaxes(Q, -1, -2) @ merge_tensor_blocks(*out) @ Q


# --- bilinear mixing ------------------------------------------------------------

def _halves(x: np.ndarray, axis: int, F: int):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(0, F)
    lo = x[tuple(idx)]
    idx[axis] = slice(F, 2 * F)
    return lo, x[tuple(idx)]


def bilinear_feature_count(s: np.ndarray, v: np.ndarray, T: np.ndarray | None) -> int:
    counts = [s.shape[-1], v.shape[-2]] + ([] if T is None else [T.shape[-3]])
    if len(set(counts)) != 1:
        raise LayerShapeError(f"bilinear layer needs equal feature counts, got {counts}")
    if counts[0] < 2 or counts[0] % 2:
        raise LayerShapeError(f"bilinear layer needs an even feature count >= 2, got {counts[0]}")
    return counts[0] // 2


def bilinear_mix(s: np.ndarray, v: np.ndarray, T: np.ndarray | None = None):
    """Mix representations with products between the two feature halves.

    Per feature index, with halves (a, b):

    ========  =========  ==========  ==========
    output    term 1     term 2      term 3
    ========  =========  ==========  ==========
    scalar    s_a s_b    v_a . v_b   tr(T_a T_b^T)
    vector    s_a v_b    v_a x v_b   T_a v_b
    tensor    s_a T_b    v_a v_b^T   T_a T_b
    ========  =========  ==========  ==========

    Terms are concatenated along the feature axis, so 2F inputs per
    representation give 3F outputs.  With ``T=None`` only the scalar/vector
    terms exist and the layer returns 2F scalars and 2F vectors.
    """
    F = bilinear_feature_count(s, v, T)
    sa, sb = _halves(s, -1, F)
    va, vb = _halves(v, -2, F)
    s_out = [sa * sb, np.sum(va * vb, axis=-1)]
    v_out = [sa[..., None] * vb, np.cross(va, vb)]
    if T is None:
        return np.concatenate(s_out, axis=-1), np.concatenate(v_out, axis=-2), None
    Ta, Tb = _halves(T, -3, F)
    s_out.append(np.sum(Ta * Tb, axis=(-2, -1)))
    v_out.append((Ta @ vb[..., None])[..., 0])
    t_out = [sa[..., None, None] * Tb, va[..., :, None] * vb[..., None, :], Ta @ Tb]
    return (np.concatenate(s_out, axis=-1), np.concatenate(v_out, axis=-2),
            np.concatenate(t_out, axis=-3))


# --- nonlinearities ---------------------------------------------------------------

def scalar_relu(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0.0)


def vrelu(v: np.ndarray) -> np.ndarray:
    """v when |v| <= 1, else v / |v|."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1.0)


def trelu(T: np.ndarray) -> np.ndarray:
    """T when ||T||_F <= 1, else T / ||T||_F."""
    n = np.sqrt(np.sum(T * T, axis=(-2, -1), keepdims=True))
    return T / np.maximum(n, 1.0)
