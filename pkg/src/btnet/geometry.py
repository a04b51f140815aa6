"""Rotation algebra on R^3: construction, Haar sampling and the actions of SO(3)
on vectors and order-2 tensors.

Vectors are arrays with a trailing axis of length 3 and tensors have two
trailing axes of length 3; every action broadcasts over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Rotation:
    """A proper rotation matrix (m^T m = I, det m = +1)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {m.shape}")
        object.__setattr__(self, "m", m)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.m @ other.m)

    @property
    def inverse(self) -> "Rotation":
        return Rotation(self.m.T.copy())

    def orthogonality_residual(self) -> float:
        return float(np.max(np.abs(self.m.T @ self.m - np.eye(3))))

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        return (self.orthogonality_residual() < tol
                and abs(np.linalg.det(self.m) - 1.0) < tol)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(w) @ x == cross(w, x)."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(axis, angle: float) -> Rotation:
    """Right-handed rotation by ``angle`` radians about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if not n > 0 or not np.isfinite(n):
        raise GeometryError("degenerate axis")
    k = axis / n
    K = skew(k)
    m = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return Rotation(m)


def rotation_from_quaternion(q) -> Rotation:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    m = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Rotation(m)


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    return rotation_from_quaternion(q)


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """Stack of ``n`` Haar-uniform rotation matrices, shape (n, 3, 3)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    m = np.empty((n, 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - z * w)
    m[:, 0, 2] = 2 * (x * z + y * w)
    m[:, 1, 0] = 2 * (x * y + z * w)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - x * w)
    m[:, 2, 0] = 2 * (x * z - y * w)
    m[:, 2, 1] = 2 * (y * z + x * w)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def _mat(R) -> np.ndarray:
    return R.m if isinstance(R, Rotation) else np.asarray(R)


def apply_to_vector(R, v: np.ndarray) -> np.ndarray:
    """R v for every vector in ``v`` (shape (..., 3))."""
    return np.asarray(v) @ _mat(R).T


def apply_to_tensor(R, T: np.ndarray) -> np.ndarray:
    """R T R^T for every tensor in ``T`` (shape (..., 3, 3))."""
    m = _mat(R)
    return m @ np.asarray(T) @ m.T


def frobenius_norm(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T)
    return np.sqrt(np.sum(T * T, axis=(-2, -1)))


def axis_frame(jhat: np.ndarray) -> np.ndarray:
    """Proper rotation(s) whose third row is ``jhat``.

    Rows are (e1, e2, jhat) with e2 = jhat x e1, so Q @ jhat = z.  Accepts
    shape (3,) or (..., 3); the choice of e1 is arbitrary but deterministic.
    """
    j = np.asarray(jhat, dtype=np.float64)
    helper = np.zeros(j.shape)
    use_x = np.abs(j[..., 0]) < 0.9
    helper[..., 0] = np.where(use_x, 1.0, 0.0)
    helper[..., 1] = np.where(use_x, 0.0, 1.0)
    e1 = helper - np.sum(helper * j, axis=-1, keepdims=True) * j
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(j, e1)
    return np.stack([e1, e2, j], axis=-2)


def unit(v: np.ndarray, tol: float = 0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= tol):
        raise GeometryError("cannot normalize a zero vector")
    return v / n
