"""Orbit representative maps: pick one pose per rotation orbit.

``canonicalize`` centers a cloud, asks a frame method for a rotation ``R`` and
returns ``R^T x``. Four frame methods exist: a trainable equivariant network,
the same network with frozen random weights, a PCA frame, and the identity
(which is not invariant and serves as the no-canonicalization baseline).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .groups import (FRAME_EPS, DegenerateFrame, PointCloud, apply, frame_residuals,
                     gram_schmidt_frames, kabsch_rmsd, random_rotation)
from .nets import CanonicalizerNet, masked_center

KINDS = ("learned", "frozen", "pca", "identity")


class DegenerateSpectrum(ValueError):
    """Covariance eigenvalues too close to order the PCA axes."""


@dataclass
class Canonicalizer:
    kind: str
    net: CanonicalizerNet | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown canonicalizer kind {self.kind!r}")
        if self.kind in ("learned", "frozen") and self.net is None:
            raise ValueError(f"kind={self.kind} needs a CanonicalizerNet")

    @property
    def trainable(self) -> bool:
        return self.kind == "learned"

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters() if self.trainable else {}

    def frames(self, x_centered, features: np.ndarray, mask: np.ndarray, check: bool = True):
        """Rotation per cloud for a padded, centered batch.

        Returns ``(R, ok)``: ``R`` is a (B, dim, dim) Tensor (differentiable for
        the learned kind) and ``ok`` flags clouds with a non-degenerate frame.
        With ``check`` the first degenerate cloud raises instead.
        """
        B, N, d = x_centered.shape
        if self.kind == "identity":
            return Tensor(np.broadcast_to(np.eye(d), (B, d, d)).copy()), np.ones(B, bool)
        if self.kind == "pca":
            x = x_centered.data if isinstance(x_centered, Tensor) else np.asarray(x_centered)
            Rs, ok = np.empty((B, d, d)), np.ones(B, bool)
            for b in range(B):
                try:
                    Rs[b] = pca_frame(x[b, mask[b] > 0])
                except DegenerateSpectrum:
                    if check:
                        raise
                    ok[b] = False
                    Rs[b] = np.eye(d)
            return Tensor(Rs), ok
        if self.net.cfg.dim != d:
            raise ValueError(f"canonicalizer built for dim {self.net.cfg.dim}, got {d}")
        x_in = x_centered if self.trainable else Tensor(getattr(x_centered, "data", x_centered))
        v = self.net(x_in, features, mask)
        if not self.trainable:
            v = Tensor(v.data)
        v2 = v[:, 1] if d == 3 else None
        res = frame_residuals(v.data[:, 0], None if v2 is None else v.data[:, 1])
        ok = res >= FRAME_EPS
        if check and not ok.all():
            raise DegenerateFrame(f"frame residual {res.min():.3e} below {FRAME_EPS}")
        return gram_schmidt_frames(v[:, 0], v2, check=False), ok


@dataclass
class CanonicalizedSample:
    x_canon: PointCloud
    rotation: np.ndarray
    translation: np.ndarray


def canonicalize_batch(can: Canonicalizer, coords, features: np.ndarray, mask: np.ndarray,
                       check: bool = True):
    """Padded-batch orbit representative map.

    Returns ``(x_canon, R, com, ok)`` where ``x_canon`` is a Tensor of shape
    (B, N, dim) carrying gradients into the learned canonicalizer.
    """
    coords = ag.as_tensor(coords)
    com = (coords.data * mask[..., None]).sum(1) / mask.sum(1)[:, None]
    x_centered = masked_center(coords, mask)
    R, ok = can.frames(x_centered, features, mask, check=check)
    x_canon = ag.matmul(x_centered, R)
    return x_canon, R.data, com, ok


def canonicalize(can: Canonicalizer, x: PointCloud) -> CanonicalizedSample:
    coords = x.coords[None]
    mask = np.ones((1, x.n))
    xc, R, com, _ = canonicalize_batch(can, coords, x.features[None], mask)
    return CanonicalizedSample(x.with_coords(xc.data[0]), R[0], com[0])


def pca_frame(x) -> np.ndarray:
    """Principal axes as columns, by descending variance, with skew-fixed signs.

    Each axis is oriented so the third moment of the projections is
    non-negative (exact ties fall back to a positive first nonzero component);
    the last column is flipped if needed for det = +1.
    """
    x = np.asarray(getattr(x, "coords", x), dtype=np.float64)
    x = x - x.mean(0)
    d = x.shape[1]
    cov = x.T @ x / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1].copy()
    if d > 1 and np.min(-np.diff(evals)) < 1e-8:
        raise DegenerateSpectrum(f"eigenvalues {evals} have a gap below 1e-8")
    for k in range(d):
        v = evecs[:, k]
        skew = np.sum((x @ v) ** 3)
        if skew < 0 or (skew == 0 and v[np.flatnonzero(v)[0]] < 0):
            evecs[:, k] = -v
    if np.linalg.det(evecs) < 0:
        evecs[:, -1] *= -1
    return evecs


def invariance_error(can: Canonicalizer, x: PointCloud, n_trials: int, rng: np.random.Generator) -> float:
    """Largest sup-norm change of the representative over random rotations of ``x``."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    ref = canonicalize(can, x).x_canon.coords
    worst = 0.0
    for _ in range(n_trials):
        g = random_rotation(rng, x.dim)
        worst = max(worst, float(np.abs(canonicalize(can, apply(g, x)).x_canon.coords - ref).max()))
    return worst


def has_trivial_stabilizer(x: PointCloud, tol: float = 1e-3, max_atoms: int = 8) -> bool:
    """True when no nonidentity rotation maps ``x`` onto itself.

    Checks rank (collinear clouds have a continuous stabilizer) and every
    label-preserving atom permutation for an exact rigid match.
    """
    c = x.coords - x.coords.mean(0)
    sv = np.linalg.svd(c, compute_uv=False)
    if x.dim == 3 and (len(sv) < 2 or sv[1] < tol):
        return False
    if x.n > max_atoms:
        raise ValueError(f"permutation search limited to {max_atoms} atoms")
    labels = x.labels or tuple(map(tuple, x.features))
    ident = tuple(range(x.n))
    for perm in itertools.permutations(range(x.n)):
        if perm == ident or any(labels[i] != labels[j] for i, j in zip(ident, perm)):
            continue
        if kabsch_rmsd(c, c[list(perm)])[0] < tol:
            return False
    return True
