"""Message-passing networks: the non-equivariant denoiser and the multi-channel
equivariant canonicalizer.

All forward passes operate on padded batches: coordinates ``(B, N, dim)``,
features ``(B, N, F)`` and a node mask ``(B, N)`` with 1 for real atoms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor


class Module:
    """Minimal parameter container; ``parameters()`` walks attributes in definition order."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{key}.{i}."))
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameter blocks: {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64, copy=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}


def _param(a) -> Tensor:
    return Tensor(a, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "default", bias: bool = True):
        bound = 1.0 / np.sqrt(max(n_in, 1))
        if init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            w = rng.uniform(-bound, bound, (n_in, n_out))
        self.w = _param(w)
        self.b = _param(rng.uniform(-bound, bound, n_out) if init != "zeros" else np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = dense(x, self.w)
        return y + self.b if self.b is not None else y


def dense(x, w: Tensor) -> Tensor:
    """``x @ w`` with leading axes flattened so the weight gradient is one 2-D matmul."""
    x = ag.as_tensor(x)
    if x.ndim == 2:
        return ag.matmul(x, w)
    lead = x.shape[:-1]
    y = ag.matmul(ag.reshape(x, (-1, x.shape[-1])), w)
    return ag.reshape(y, lead + (w.shape[-1],))


class PairLinear(Module):
    """Linear map on ``[h_i, h_j, edge_attr_ij]`` without materializing the concatenation."""

    def __init__(self, n_node: int, n_edge: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(2 * n_node + n_edge)
        self.w_src = _param(rng.uniform(-bound, bound, (n_node, n_out)))
        self.w_dst = _param(rng.uniform(-bound, bound, (n_node, n_out)))
        self.w_edge = _param(rng.uniform(-bound, bound, (n_edge, n_out)))
        self.b = _param(rng.uniform(-bound, bound, n_out))

    def __call__(self, h: Tensor, edge_attr: Tensor) -> Tensor:
        B, N, H = h.shape
        src = ag.reshape(dense(h, self.w_src), (B, N, 1, -1))
        dst = ag.reshape(dense(h, self.w_dst), (B, 1, N, -1))
        return src + dst + dense(edge_attr, self.w_edge) + self.b


def time_embedding(t, T: int, dim: int, max_freq: float = 1000.0) -> np.ndarray:
    """Sinusoidal embedding of t/T: ``[sin(f_k t/T) ..., cos(f_k t/T) ...]``.

    Frequencies are geometric from 1 to ``max_freq``. Accepts a scalar or an
    integer array and returns shape ``(..., dim)``.
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"t must lie in [0, {T}]")
    half = dim // 2
    freqs = max_freq ** (np.arange(half) / max(half - 1, 1))
    ang = (t[..., None] / T) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def edge_mask(mask: np.ndarray) -> np.ndarray:
    """(B, N) node mask -> (B, N, N, 1) pair mask excluding self-pairs."""
    N = mask.shape[1]
    em = mask[:, :, None] * mask[:, None, :] * (1.0 - np.eye(N))[None]
    return em[..., None]


def masked_center(x: Tensor, mask: np.ndarray) -> Tensor:
    """Subtract the per-cloud mean over real atoms; padded rows are zeroed."""
    m = mask[..., None]
    n = mask.sum(1)[:, None, None]
    mu = ag.tsum(x * m, axis=1, keepdims=True) / n
    return (x - mu) * m


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite output in {where}", op=where)
    return t


# ------------------------------------------------------------------ denoiser

@dataclass
class DenoiserConfig:
    feature_dim: int
    dim: int = 3
    hidden: int = 64
    n_layers: int = 4
    time_embed_dim: int = 16
    T: int = 256
    zero_head: bool = True


class DenoiserNet(Module):
    """Fully connected message passing with raw coordinates in the node input.

    Feeding absolute coordinates to the node embedding makes the network
    deliberately non-equivariant.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        H, d = cfg.hidden, cfg.dim
        self.embed = Linear(cfg.feature_dim + d + cfg.time_embed_dim, H, rng)
        self.edge_in = [PairLinear(H, d + 1, H, rng) for _ in range(cfg.n_layers)]
        self.edge_out = [Linear(H, H, rng) for _ in range(cfg.n_layers)]
        self.node_in = [Linear(2 * H, H, rng) for _ in range(cfg.n_layers)]
        self.node_out = [Linear(H, H, rng) for _ in range(cfg.n_layers)]
        self.head = Linear(H, d, rng, init="zeros" if cfg.zero_head else "default")

    def __call__(self, z, t, features: np.ndarray, mask: np.ndarray) -> Tensor:
        z = ag.as_tensor(z)
        B, N, d = z.shape
        temb = time_embedding(np.broadcast_to(np.asarray(t), (B,)), self.cfg.T, self.cfg.time_embed_dim)
        temb = np.broadcast_to(temb[:, None, :], (B, N, temb.shape[-1]))
        h = ag.silu(self.embed(ag.concat([Tensor(features), z, Tensor(temb)], axis=-1)))
        dx = ag.reshape(z, (B, N, 1, d)) - ag.reshape(z, (B, 1, N, d))
        edge_attr = ag.concat([dx, ag.tsum(ag.square(dx), axis=-1, keepdims=True)], axis=-1)
        em = edge_mask(mask)
        for l in range(self.cfg.n_layers):
            m = ag.silu(self.edge_out[l](ag.silu(self.edge_in[l](h, edge_attr))))
            agg = ag.tsum(m * em, axis=2)
            h = h + self.node_out[l](ag.silu(self.node_in[l](ag.concat([h, agg], axis=-1))))
        out = masked_center(self.head(h), mask)
        return _check_finite(out, "denoiser")


# ------------------------------------------------------- equivariant layers

class EGNNLayer(Module):
    """Multi-channel E(n)-equivariant layer.

    Messages see node states and per-channel squared distances; each channel's
    coordinates move along relative vectors scaled by an invariant weight. With
    ``coord_range`` set, that weight is squashed to ``coord_range * tanh(w)`` so
    one layer cannot move a point arbitrarily far.
    """

    def __init__(self, hidden: int, channels: int, rng: np.random.Generator, coord_gain: float = 1.0,
                 coord_range: float | None = None):
        self.channels = channels
        self.coord_range = coord_range
        self.edge_in = PairLinear(hidden, channels, hidden, rng)
        self.edge_out = Linear(hidden, hidden, rng)
        self.coord_in = Linear(hidden, hidden, rng)
        self.coord_out = Linear(hidden, channels, rng, bias=False)
        self.coord_out.w.data *= coord_gain
        self.node_in = Linear(2 * hidden, hidden, rng)
        self.node_out = Linear(hidden, hidden, rng)

    def __call__(self, h: Tensor, X: Tensor, em: np.ndarray):
        B, N, C, d = X.shape
        diff = ag.reshape(X, (B, N, 1, C, d)) - ag.reshape(X, (B, 1, N, C, d))
        radial = ag.tsum(ag.square(diff), axis=-1)
        dist = ag.norm(diff, axis=-1, keepdims=True)
        m = ag.silu(self.edge_out(ag.silu(self.edge_in(h, radial))))
        m = m * em
        w = self.coord_out(ag.silu(self.coord_in(m)))
        if self.coord_range is not None:
            w = ag.tanh(w * (1.0 / self.coord_range)) * self.coord_range
        w = ag.reshape(w * em, (B, N, N, C, 1))
        X = X + ag.tsum(diff / (dist + 1.0) * w, axis=2)
        h = h + self.node_out(ag.silu(self.node_in(ag.concat([h, ag.tsum(m, axis=2)], axis=-1))))
        return h, X


@dataclass
class CanonicalizerConfig:
    feature_dim: int
    dim: int = 3
    hidden: int = 32
    n_layers: int = 3
    n_vector_channels: int | None = None

    def __post_init__(self):
        if self.n_vector_channels is None:
            self.n_vector_channels = self.dim - 1
        if self.n_vector_channels < self.dim - 1:
            raise ValueError("need at least dim - 1 vector channels")


class CanonicalizerNet(Module):
    """Equivariant network emitting ``n_vector_channels`` global vectors per cloud.

    Every channel starts as a copy of the input coordinates; the readout is the
    mean displacement of each channel from the input centroid.
    """

    def __init__(self, cfg: CanonicalizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.feature_dim, cfg.hidden, rng)
        self.layers = [EGNNLayer(cfg.hidden, cfg.n_vector_channels, rng) for _ in range(cfg.n_layers)]

    def __call__(self, x, features: np.ndarray, mask: np.ndarray) -> Tensor:
        """Returns frame vectors of shape (B, n_vector_channels, dim)."""
        x = ag.as_tensor(x)
        B, N, d = x.shape
        if np.any(mask.sum(1) < 2):
            raise ValueError("canonicalizer needs at least two atoms per cloud")
        C = self.cfg.n_vector_channels
        m = mask[..., None]
        n = mask.sum(1)[:, None, None]
        centroid = ag.tsum(x * m, axis=1, keepdims=True) / n
        X = ag.broadcast_to(ag.reshape(x, (B, N, 1, d)), (B, N, C, d))
        h = ag.silu(self.embed(Tensor(features)))
        em = edge_mask(mask)
        for layer in self.layers:
            h, X = layer(h, X, em)
        rel = (X - ag.reshape(centroid, (B, 1, 1, d))) * m[..., None]
        v = ag.tsum(rel, axis=1) / n
        return _check_finite(v, "canonicalizer")


# ------------------------------------------------------ equivariant baseline

@dataclass
class EquiDenoiserConfig:
    feature_dim: int
    dim: int = 3
    hidden: int = 64
    n_layers: int = 4
    time_embed_dim: int = 16
    T: int = 256


EQUI_COORD_RANGE = 15.0


class EquivariantDenoiser(Module):
    """Single-channel EGNN stack predicting noise as the final coordinate displacement."""

    def __init__(self, cfg: EquiDenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.feature_dim + cfg.time_embed_dim, cfg.hidden, rng)
        self.layers = [EGNNLayer(cfg.hidden, 1, rng, coord_gain=0.1, coord_range=EQUI_COORD_RANGE)
                       for _ in range(cfg.n_layers)]

    def __call__(self, z, t, features: np.ndarray, mask: np.ndarray) -> Tensor:
        z = ag.as_tensor(z)
        B, N, d = z.shape
        temb = time_embedding(np.broadcast_to(np.asarray(t), (B,)), self.cfg.T, self.cfg.time_embed_dim)
        temb = np.broadcast_to(temb[:, None, :], (B, N, temb.shape[-1]))
        h = ag.silu(self.embed(Tensor(np.concatenate([features, temb], axis=-1))))
        X = ag.reshape(z, (B, N, 1, d))
        em = edge_mask(mask)
        for layer in self.layers:
            h, X = layer(h, X, em)
        out = masked_center(ag.reshape(X, (B, N, d)) - z, mask)
        return _check_finite(out, "equivariant denoiser")


def matched_equivariant_config(den: DenoiserConfig, tolerance: float = 0.10) -> EquiDenoiserConfig:
    """EGNN baseline config whose parameter count is closest to the denoiser's.

    Layer count is kept; hidden width is searched. Raises if no width lands
    within ``tolerance`` relative difference.
    """
    rng = np.random.default_rng(0)
    target = DenoiserNet(den, rng).n_params()
    best = None
    for hidden in range(8, 4 * den.hidden + 1):
        cfg = EquiDenoiserConfig(den.feature_dim, den.dim, hidden, den.n_layers, den.time_embed_dim, den.T)
        gap = abs(EquivariantDenoiser(cfg, rng).n_params() - target) / target
        if best is None or gap < best[0]:
            best = (gap, cfg)
    if best[0] > tolerance:
        raise ValueError(f"no matched width within {tolerance:.0%} (best gap {best[0]:.1%})")
    return best[1]
