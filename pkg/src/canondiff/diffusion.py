"""Variance-preserving diffusion on point-cloud coordinates.

Coordinates are diffused, atom features are conditioning only. With
``com_project`` every noise draw is projected to the zero-mean subspace so the
model lives on the (n*dim - dim)-dimensional translation-free space.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor
from .canonical import Canonicalizer, canonicalize_batch
from .optim import AdamState, EmaState, adam_step, ema_update


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    precision_s: float

    @property
    def alpha2(self) -> np.ndarray:
        return self.alpha ** 2

    @property
    def snr(self) -> np.ndarray:
        return self.alpha ** 2 / self.sigma ** 2


def polynomial_schedule(T: int, s: float = 1e-5, power: float = 2.0, clip: float = 0.001) -> NoiseSchedule:
    """alpha_bar_t^2 = s + (1 - 2s) * (1 - (t/T)^power)^2, t = 0..T.

    Step ratios of the raw curve are clamped below at ``clip`` for t < T; the
    last step is left alone so that alpha_bar_T^2 = s.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < s < 0.5:
        raise ValueError("precision s must lie in (0, 0.5)")
    if power <= 0:
        raise ValueError("power must be positive")
    t = np.arange(T + 1, dtype=np.float64)
    raw = (1.0 - (t / T) ** power) ** 2
    if T > 1:
        ratios = np.clip(raw[1:T] / raw[:T - 1], clip, 1.0)
        raw[1:T] = np.cumprod(ratios)
    a2 = (1.0 - s) * raw + s * (1.0 - raw)
    return NoiseSchedule(T, np.sqrt(a2), np.sqrt(1.0 - a2), s)


def project_com(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the per-cloud mean over real atoms and zero padded rows."""
    m = mask[..., None]
    mu = (x * m).sum(1, keepdims=True) / mask.sum(1)[:, None, None]
    return (x - mu) * m


def sample_noise(rng: np.random.Generator, shape, mask: np.ndarray, com_project: bool = True) -> np.ndarray:
    eps = rng.standard_normal(shape) * mask[..., None]
    return project_com(eps, mask) if com_project else eps


def forward_noise(schedule: NoiseSchedule, x, t, eps):
    """z_t = alpha_t * x + sigma_t * eps (broadcast over a leading batch axis)."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"t outside [0, {schedule.T}]")
    a = schedule.alpha[t]
    s = schedule.sigma[t]
    if t.ndim:
        a = a.reshape(-1, *([1] * (np.ndim(getattr(x, "data", x)) - 1)))
        s = s.reshape(a.shape)
    if isinstance(x, Tensor):
        return x * a + Tensor(eps * s)
    return a * np.asarray(x) + s * eps


# ---------------------------------------------------------------- training

@dataclass
class DiffusionConfig:
    T: int = 256
    precision_s: float = 1e-5
    power: float = 2.0
    batch_size: int = 64
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    com_project_noise: bool = True
    frame_penalty: float = 0.0
    grad_clip: float | None = None
    reverse_var: str = "forward"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 < self.precision_s < 0.5:
            raise ValueError("precision_s must lie in (0, 0.5)")

    def schedule(self) -> NoiseSchedule:
        return polynomial_schedule(self.T, self.precision_s, self.power)


@dataclass
class PaddedData:
    coords: np.ndarray
    features: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.coords.shape[0]

    def take(self, idx) -> "PaddedData":
        return PaddedData(self.coords[idx], self.features[idx], self.mask[idx])


@dataclass
class TrainState:
    step: int
    adam: AdamState
    ema: EmaState
    rng: np.random.Generator
    losses: list[float] = field(default_factory=list)
    skipped: int = 0


def trainable_params(denoiser, canonicalizer: Canonicalizer) -> dict[str, Tensor]:
    params = {f"denoiser.{k}": v for k, v in denoiser.parameters().items()}
    params.update({f"canonicalizer.{k}": v for k, v in canonicalizer.parameters().items()})
    return params


def init_train_state(cfg: DiffusionConfig, denoiser, canonicalizer: Canonicalizer, rng: np.random.Generator) -> TrainState:
    arrays = [p.data for p in trainable_params(denoiser, canonicalizer).values()]
    adam = AdamState.zeros_like(arrays, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    return TrainState(step=0, adam=adam, ema=EmaState.from_params(arrays, cfg.ema_decay), rng=rng)


def _frame_penalty(canonicalizer: Canonicalizer, x_centered: Tensor, batch: PaddedData) -> Tensor:
    v = canonicalizer.net(x_centered, batch.features, batch.mask)
    v1 = v[:, 0]
    n1 = ag.norm(v1, axis=-1, keepdims=True)
    res = n1
    if v.shape[-1] == 3:
        c1 = v1 / n1
        v2 = v[:, 1]
        res = ag.norm(v2 - ag.tsum(v2 * c1, axis=-1, keepdims=True) * c1, axis=-1, keepdims=True)
    gap = ag.relu(1e-3 - res)
    return ag.mean(ag.square(gap))


def training_loss(schedule: NoiseSchedule, denoiser, canonicalizer: Canonicalizer, batch: PaddedData,
                  t: np.ndarray, eps: np.ndarray, frame_penalty: float = 0.0, coords=None):
    """Mean per-cloud squared error ||eps - phi(z_t, t)||^2 / (n * dim).

    Clouds whose frame is degenerate are dropped from the mean; returns
    ``(loss, ok)``. ``loss`` is None when every cloud was dropped.
    """
    coords = batch.coords if coords is None else coords
    x_canon, _, _, ok = canonicalize_batch(canonicalizer, coords, batch.features, batch.mask, check=False)
    if not ok.any():
        return None, ok
    z = forward_noise(schedule, x_canon, t, eps)
    pred = denoiser(z, t, batch.features, batch.mask)
    d = batch.coords.shape[-1]
    weight = ok / (batch.mask.sum(1) * d) / ok.sum()
    loss = ag.tsum(ag.tsum(ag.square(pred - eps), axis=(1, 2)) * weight)
    if frame_penalty > 0 and canonicalizer.trainable:
        loss = loss + frame_penalty * _frame_penalty(canonicalizer, ag.as_tensor(coords), batch)
    return loss, ok


def train(cfg: DiffusionConfig, canonicalizer: Canonicalizer, denoiser, data: PaddedData,
          state: TrainState | None = None, steps: int | None = None, rng: np.random.Generator | None = None,
          callback=None) -> TrainState:
    """Joint training of the denoiser and (if learned) the canonicalizer.

    Each step draws a batch, canonicalizes it, noises it at uniform t, and takes
    one Adam step on the denoising loss over both parameter sets, followed by
    an EMA update. Continues from ``state`` when given.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    schedule = cfg.schedule()
    params = trainable_params(denoiser, canonicalizer)
    tensors = list(params.values())
    if state is None:
        state = init_train_state(cfg, denoiser, canonicalizer, rng or np.random.default_rng(cfg.seed))
    total = cfg.steps if steps is None else steps
    rng = state.rng
    while state.step < total:
        idx = rng.integers(0, len(data), cfg.batch_size)
        batch = data.take(idx)
        t = rng.integers(0, schedule.T + 1, cfg.batch_size)
        eps = sample_noise(rng, batch.coords.shape, batch.mask, cfg.com_project_noise)
        loss, ok = training_loss(schedule, denoiser, canonicalizer, batch, t, eps, cfg.frame_penalty)
        state.skipped += int((~ok).sum())
        state.step += 1
        if loss is None:
            state.losses.append(float("nan"))
            continue
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {state.step}", op="loss")
        grads = ag.grad(loss, tensors)
        if cfg.grad_clip is not None:
            gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if gnorm > cfg.grad_clip:
                grads = [g * (cfg.grad_clip / gnorm) for g in grads]
        new_params, state.adam = adam_step(state.adam, [p.data for p in tensors], grads)
        for p, arr in zip(tensors, new_params):
            p.data = arr
        state.ema = ema_update(state.ema, new_params)
        state.losses.append(float(loss.data))
        if callback is not None:
            callback(state)
    return state


def ema_params(state: TrainState, denoiser, canonicalizer: Canonicalizer) -> dict[str, np.ndarray]:
    names = list(trainable_params(denoiser, canonicalizer))
    return dict(zip(names, state.ema.shadow))


# ---------------------------------------------------------------- sampling

REVERSE_VARIANCES = ("forward", "posterior")


def reverse_variance(schedule: NoiseSchedule, t: int, kind: str = "forward") -> float:
    """Variance of p(z_{t-1} | z_t).

    ``forward`` is the one-step forward variance sigma^2_{t|t-1} (exact for
    standard normal data); ``posterior`` is the variance of
    q(z_{t-1} | z_t, x), sigma^2_{t|t-1} sigma^2_{t-1} / sigma^2_t.
    """
    a, s = schedule.alpha, schedule.sigma
    a_ts = a[t] / a[t - 1]
    var_ts = s[t] ** 2 - a_ts ** 2 * s[t - 1] ** 2
    if kind == "forward":
        return var_ts
    if kind == "posterior":
        return var_ts * s[t - 1] ** 2 / s[t] ** 2
    raise ValueError(f"unknown reverse variance {kind!r}")


def predict(denoiser, z: np.ndarray, t, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return denoiser(Tensor(z), t, features, mask).data


def sample_batch(schedule: NoiseSchedule, denoiser, features: np.ndarray, mask: np.ndarray,
                 rng: np.random.Generator, dim: int = 3, com_project: bool = True,
                 deterministic: bool = False, z_T: np.ndarray | None = None,
                 reverse_var: str = "forward") -> np.ndarray:
    """Ancestral sampling from t = T down to 1; returns z_0 with shape (B, N, dim).

    The last step (t = 1) returns the mean without noise.
    """
    B, N = mask.shape
    z = sample_noise(rng, (B, N, dim), mask, com_project) if z_T is None else np.array(z_T, dtype=np.float64)
    a, s = schedule.alpha, schedule.sigma
    for t in range(schedule.T, 0, -1):
        a_ts = a[t] / a[t - 1]
        var_ts = s[t] ** 2 - a_ts ** 2 * s[t - 1] ** 2
        eps_hat = predict(denoiser, z, np.full(B, t), features, mask)
        z = z / a_ts - (var_ts / (a_ts * s[t])) * eps_hat
        if t > 1 and not deterministic:
            std = np.sqrt(reverse_variance(schedule, t, reverse_var))
            z = z + std * sample_noise(rng, z.shape, mask, com_project)
        z = z * mask[..., None]
    if not np.all(np.isfinite(z)):
        raise NumericError("sampler produced non-finite coordinates", op="sample")
    return z


def sample(schedule: NoiseSchedule, denoiser, n_atoms: int, features: np.ndarray, rng: np.random.Generator,
           dim: int = 3, com_project: bool = True, reverse_var: str = "forward") -> np.ndarray:
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    features = np.asarray(features, dtype=np.float64).reshape(1, n_atoms, -1)
    return sample_batch(schedule, denoiser, features, np.ones((1, n_atoms)), rng, dim, com_project,
                        reverse_var=reverse_var)[0]


# --------------------------------------------------------------------- NLL

def estimate_nll(schedule: NoiseSchedule, denoiser, canonicalizer: Canonicalizer, data: PaddedData,
                 rng: np.random.Generator, com_project: bool = True, max_exact_T: int = 256,
                 n_t: int = 256, reverse_var: str = "forward") -> np.ndarray:
    """Discrete-time variational bound per cloud, in nats per effective dimension.

    Sums the prior KL at T, one Gaussian KL per reverse step t = 1..T (a
    constant variance-mismatch part plus a weighted ||eps - eps_hat||^2), and
    a Gaussian reconstruction term -log p(x | z_0). Steps are summed exactly
    when T <= ``max_exact_T``, otherwise estimated from ``n_t`` uniform draws.
    """
    x, _, _, _ = canonicalize_batch(canonicalizer, data.coords, data.features, data.mask)
    x = x.data
    B, N, d = x.shape
    n = data.mask.sum(1)
    D = (n - 1) * d if com_project else n * d
    a, s = schedule.alpha, schedule.sigma
    T = schedule.T
    sq = (x ** 2).sum((1, 2))
    prior = 0.5 * (D * (s[T] ** 2 - 1.0 - np.log(s[T] ** 2)) + a[T] ** 2 * sq)

    def err(t):
        eps = sample_noise(rng, x.shape, data.mask, com_project)
        z = a[t] * x + s[t] * eps
        return ((eps - predict(denoiser, z, np.full(B, t), data.features, data.mask)) ** 2).sum((1, 2))

    def step_kl(t):
        a_ts = a[t] / a[t - 1]
        var_ts = s[t] ** 2 - a_ts ** 2 * s[t - 1] ** 2
        v_q = var_ts * s[t - 1] ** 2 / s[t] ** 2
        v_p = reverse_variance(schedule, t, reverse_var)
        mean_coef = a[t - 1] * var_ts / s[t] ** 2
        weight = mean_coef ** 2 * s[t] ** 2 / a[t] ** 2 / (2.0 * v_p)
        const = 0.5 * D * (np.log(v_p / v_q) + v_q / v_p - 1.0)
        return const + weight * err(t)

    if T <= max_exact_T:
        diff = sum(step_kl(t) for t in range(1, T + 1))
    else:
        ts = rng.integers(1, T + 1, n_t)
        diff = T * np.mean([step_kl(t) for t in ts], axis=0)
    recon = 0.5 * D * np.log(2 * np.pi * s[0] ** 2 / a[0] ** 2) + 0.5 * err(0)
    return (prior + diff + recon) / D


def config_dict(cfg: DiffusionConfig) -> dict:
    return asdict(cfg)
