"""Rotation-group helpers: frames, actions on point clouds, Haar sampling, Kabsch."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor

FRAME_EPS = 1e-8


class DegenerateFrame(ValueError):
    """Frame vectors are too short or too close to collinear to span a frame."""


@dataclass(frozen=True)
class PointCloud:
    """``n`` atoms with ``dim``-dimensional coordinates and per-atom feature rows."""

    coords: np.ndarray
    features: np.ndarray = None
    labels: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise ValueError(f"coords must be (n, dim) with n >= 1, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        object.__setattr__(self, "coords", coords)
        feats = self.features
        feats = np.zeros((coords.shape[0], 0)) if feats is None else np.asarray(feats, dtype=np.float64)
        if feats.shape[0] != coords.shape[0]:
            raise ValueError("feature rows must match atom count")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != coords.shape[0]:
                raise ValueError("label count must match atom count")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def with_coords(self, coords) -> "PointCloud":
        return replace(self, coords=coords)


def _unit(v: Tensor) -> tuple[Tensor, np.ndarray]:
    n = ag.norm(v, axis=-1, keepdims=True, eps=FRAME_EPS)
    raw = np.sqrt((v.data ** 2).sum(-1))
    return v / n, raw


def frame_residuals(v1, v2=None) -> np.ndarray:
    """Per-row smallest Gram-Schmidt residual norm; below ``FRAME_EPS`` means degenerate."""
    v1 = np.asarray(v1, dtype=np.float64)
    n1 = np.linalg.norm(v1, axis=-1)
    if v2 is None:
        return n1
    c1 = v1 / np.maximum(n1, FRAME_EPS)[..., None]
    v2 = np.asarray(v2, dtype=np.float64)
    r = v2 - (v2 * c1).sum(-1, keepdims=True) * c1
    return np.minimum(n1, np.linalg.norm(r, axis=-1))


def gram_schmidt_frames(v1: Tensor, v2: Tensor | None = None, check: bool = True) -> Tensor:
    """Batched, differentiable modified Gram-Schmidt.

    ``v1``/``v2`` have shape (..., dim). Returns rotation matrices (..., dim, dim)
    whose columns are the orthonormalized frame; for dim 3 the last column is
    the cross product, so det = +1.
    """
    v1 = ag.as_tensor(v1)
    dim = v1.shape[-1]
    if dim not in (2, 3):
        raise ValueError(f"frames only for dim 2 or 3, got {dim}")
    if dim == 3 and v2 is None:
        raise ValueError("dim 3 needs two frame vectors")
    c1, n1 = _unit(v1)
    if check and np.any(n1 < FRAME_EPS):
        raise DegenerateFrame(f"first frame vector has norm {n1.min():.3e}")
    if dim == 2:
        c2 = ag.concat([-c1[..., 1:2], c1[..., 0:1]], axis=-1)
        return ag.stack([c1, c2], axis=-1)
    v2 = ag.as_tensor(v2)
    u2 = v2 - (v2 * c1).sum(-1, keepdims=True) * c1
    c2, n2 = _unit(u2)
    if check and np.any(n2 < FRAME_EPS):
        raise DegenerateFrame(f"second frame vector residual has norm {n2.min():.3e}")
    c3 = cross(c1, c2)
    return ag.stack([c1, c2, c3], axis=-1)


def cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return ag.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)


def gram_schmidt_rotation(v1, v2=None) -> np.ndarray:
    """Rotation matrix whose first column is ``v1``'s direction (numpy in, numpy out)."""
    v1 = np.asarray(v1, dtype=np.float64)
    if v1.shape[-1] == 3 and v2 is None:
        raise ValueError("dim 3 needs two frame vectors")
    return gram_schmidt_frames(Tensor(v1), None if v2 is None else Tensor(v2)).data


def apply(R, x: PointCloud) -> PointCloud:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (x.dim, x.dim):
        raise ValueError(f"rotation {R.shape} does not act on dim {x.dim}")
    return x.with_coords(x.coords @ R.T)


def remove_com(x: PointCloud) -> tuple[PointCloud, np.ndarray]:
    com = x.coords.mean(axis=0)
    return x.with_coords(x.coords - com), com


def random_rotation(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    """Haar-uniform draw from SO(dim), dim in {2, 3}."""
    if dim == 2:
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s], [s, c]])
    if dim != 3:
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    q = rng.standard_normal(4)
    return quaternion_to_matrix(q / np.linalg.norm(q))


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation(R, tol: float = 1e-10) -> bool:
    R = np.asarray(R)
    eye = np.eye(R.shape[0])
    return bool(np.abs(R.T @ R - eye).max() < tol and abs(np.linalg.det(R) - 1.0) < tol)


def kabsch_rmsd(a, b) -> tuple[float, np.ndarray]:
    """Minimal RMSD between corresponded clouds over proper rotations.

    Returns ``(rmsd, R)`` with ``R`` rotating centered ``a`` onto centered ``b``.
    Accepts ``PointCloud`` or raw (n, dim) arrays.
    """
    A = np.asarray(getattr(a, "coords", a), dtype=np.float64)
    B = np.asarray(getattr(b, "coords", b), dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    if A.shape[0] < 1:
        raise ValueError("need at least one point")
    A = A - A.mean(0)
    B = B - B.mean(0)
    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(A.shape[1])
    D[-1, -1] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    diff = A @ R.T - B
    return float(np.sqrt((diff ** 2).sum() / A.shape[0])), R
