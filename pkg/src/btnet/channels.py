"""Batched features split by representation, plus particle-slot masking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import _mat


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RepChannels:
    """scalars (B, P, Fs), vectors (B, P, Fv, 3), tensors (B, P, Ft, 3, 3)."""

    scalars: np.ndarray
    vectors: np.ndarray
    tensors: np.ndarray

    def __post_init__(self):
        s, v, t = self.scalars, self.vectors, self.tensors
        if s.ndim != 3 or v.ndim != 4 or t.ndim != 5:
            raise ShapeError("expected ranks (3, 4, 5) for scalars/vectors/tensors")
        if v.shape[-1] != 3 or t.shape[-2:] != (3, 3):
            raise ShapeError("vector/tensor trailing axes must be 3 / 3x3")
        if not (s.shape[:2] == v.shape[:2] == t.shape[:2]):
            raise ShapeError(f"batch/particle axes differ: {s.shape[:2]}, {v.shape[:2]}, {t.shape[:2]}")

    @classmethod
    def empty(cls, B: int, P: int) -> "RepChannels":
        return cls(np.zeros((B, P, 0)), np.zeros((B, P, 0, 3)), np.zeros((B, P, 0, 3, 3)))

    @classmethod
    def masked(cls, scalars, vectors, tensors, mask: np.ndarray) -> "RepChannels":
        """Build channels with padded slots forced to zero."""
        c = cls(np.asarray(scalars, float), np.asarray(vectors, float), np.asarray(tensors, float))
        return apply_mask(c, mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scalars.shape[:2]

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.scalars.shape[2], self.vectors.shape[2], self.tensors.shape[2]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.scalars, self.vectors, self.tensors


def _check_mask(c: RepChannels, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != c.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match channels {c.shape}")
    return mask


def apply_mask(c: RepChannels, mask: np.ndarray) -> RepChannels:
    m = _check_mask(c, mask).astype(np.float64)
    return RepChannels(c.scalars * m[:, :, None],
                       c.vectors * m[:, :, None, None],
                       c.tensors * m[:, :, None, None, None])


def rotate_channels(R, c: RepChannels) -> RepChannels:
    """Scalars untouched, vectors -> R v, tensors -> R T R^T."""
    m = _mat(R)
    return RepChannels(c.scalars.copy(), c.vectors @ m.T, m @ c.tensors @ m.T)


def masked_sum_pool(c: RepChannels, mask: np.ndarray) -> RepChannels:
    """Sum each feature over valid particle slots; the result has P = 1."""
    m = _check_mask(c, mask).astype(np.float64)
    return RepChannels(
        np.einsum("bp,bpf->bf", m, c.scalars)[:, None],
        np.einsum("bp,bpfc->bfc", m, c.vectors)[:, None],
        np.einsum("bp,bpfcd->bfcd", m, c.tensors)[:, None],
    )


def concat_features(a: RepChannels, b: RepChannels) -> RepChannels:
    if a.shape != b.shape:
        raise ShapeError(f"cannot concatenate channels with shapes {a.shape} and {b.shape}")
    return RepChannels(
        np.concatenate([a.scalars, b.scalars], axis=2),
        np.concatenate([a.vectors, b.vectors], axis=2),
        np.concatenate([a.tensors, b.tensors], axis=2),
    )
