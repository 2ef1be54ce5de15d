"""Run configuration, model construction per variant, RNG substreams and checkpoints."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .canonical import Canonicalizer
from .diffusion import DiffusionConfig, TrainState, trainable_params
from .nets import (CanonicalizerConfig, CanonicalizerNet, DenoiserConfig, DenoiserNet, EquivariantDenoiser,
                   matched_equivariant_config)
from .optim import AdamState, EmaState

VARIANTS = {
    "gdm": "identity",
    "edm_lite": "identity",
    "canon_gdm": "learned",
    "canon_fr_gdm": "frozen",
}
STREAMS = {"data": 0, "init": 1, "train": 2, "sample": 3, "eval": 4}
FORMAT_VERSION = 1
MAGIC = b"CANONDIF"


class ConfigError(ValueError):
    """Inconsistent or malformed run configuration."""


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent generator derived from one root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name]]))


@dataclass
class NetSizes:
    denoiser_hidden: int = 64
    denoiser_layers: int = 4
    time_embed_dim: int = 16
    canon_hidden: int = 32
    canon_layers: int = 3
    canon_channels: int | None = None


@dataclass
class RunConfig:
    model_variant: str = "canon_gdm"
    data_dir: str = "data"
    output_dir: str = "runs/default"
    seed: int = 0
    dim: int = 3
    ckpt_every: int = 0
    canonicalizer: str | None = None
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    nets: NetSizes = field(default_factory=NetSizes)

    def __post_init__(self):
        if self.model_variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.model_variant!r}; choose from {sorted(VARIANTS)}")
        if self.canonicalizer is not None and self.canonicalizer != VARIANTS[self.model_variant]:
            raise ConfigError(f"variant {self.model_variant} uses canonicalizer "
                              f"{VARIANTS[self.model_variant]!r}, config says {self.canonicalizer!r}")
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")

    @property
    def canonicalizer_kind(self) -> str:
        return VARIANTS[self.model_variant]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            diff = DiffusionConfig(**d.pop("diffusion", {}))
            nets = NetSizes(**d.pop("nets", {}))
            return cls(diffusion=diff, nets=nets, **d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON, falling back to strings."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override path {key!r} does not exist")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist")
        node[parts[-1]] = value
    return d


@dataclass
class Models:
    denoiser: object
    canonicalizer: Canonicalizer


def build_models(cfg: RunConfig, feature_dim: int) -> Models:
    """Initialize networks from the ``init`` substream; the denoiser draws first."""
    rng = substream(cfg.seed, "init")
    n = cfg.nets
    T = cfg.diffusion.T
    den_cfg = DenoiserConfig(feature_dim, cfg.dim, n.denoiser_hidden, n.denoiser_layers, n.time_embed_dim, T)
    if cfg.model_variant == "edm_lite":
        denoiser = EquivariantDenoiser(matched_equivariant_config(den_cfg), rng)
    else:
        denoiser = DenoiserNet(den_cfg, rng)
    kind = cfg.canonicalizer_kind
    net = None
    if kind in ("learned", "frozen"):
        net = CanonicalizerNet(CanonicalizerConfig(feature_dim, cfg.dim, n.canon_hidden, n.canon_layers,
                                                   n.canon_channels), rng)
    return Models(denoiser, Canonicalizer(kind, net))


# --------------------------------------------------------------- checkpoint

def _blocks(models: Models, state: TrainState | None) -> dict[str, np.ndarray]:
    blocks = {f"param/denoiser.{k}": v.data for k, v in models.denoiser.parameters().items()}
    if models.canonicalizer.net is not None:
        blocks.update({f"param/canonicalizer.{k}": v.data for k, v in models.canonicalizer.net.parameters().items()})
    if state is not None:
        names = list(trainable_params(models.denoiser, models.canonicalizer))
        for name, s, m, v in zip(names, state.ema.shadow, state.adam.m, state.adam.v):
            blocks[f"ema/{name}"] = s
            blocks[f"adam_m/{name}"] = m
            blocks[f"adam_v/{name}"] = v
        blocks["trace/losses"] = np.asarray(state.losses, dtype=np.float64)
    return blocks


def save_checkpoint(path, cfg: RunConfig, models: Models, state: TrainState | None = None,
                    meta: dict | None = None) -> None:
    """Little-endian container: magic, u32 version, u64 header size, JSON header, float64 blob."""
    blocks = _blocks(models, state)
    index, offset, payload = [], 0, []
    for name, arr in blocks.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "dtype": "<f8", "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "config": cfg.to_dict(), "blocks": index, "meta": meta or {}}
    if state is not None:
        header["train"] = {"step": state.step, "adam_step": state.adam.step, "skipped": state.skipped,
                           "rng_state": state.rng.bit_generator.state}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for raw in payload:
            f.write(raw)
    tmp.replace(path)


@dataclass
class Checkpoint:
    config: RunConfig
    blocks: dict[str, np.ndarray]
    meta: dict
    train: dict | None

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        tag = f"{prefix}/"
        return {k[len(tag):]: v for k, v in self.blocks.items() if k.startswith(tag)}


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format_version {version}")
        header = json.loads(f.read(hlen))
        blob = f.read()
    blocks = {}
    for e in header["blocks"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        blocks[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(RunConfig.from_dict(header["config"]), blocks, header.get("meta", {}), header.get("train"))


def restore(ck: Checkpoint, feature_dim: int, use_ema: bool = False) -> tuple[Models, TrainState | None]:
    """Rebuild models (and training state when present) from a checkpoint."""
    models = build_models(ck.config, feature_dim)
    params = ck.params("param")
    models.denoiser.load_arrays({k[len("denoiser."):]: v for k, v in params.items() if k.startswith("denoiser.")})
    if models.canonicalizer.net is not None:
        models.canonicalizer.net.load_arrays(
            {k[len("canonicalizer."):]: v for k, v in params.items() if k.startswith("canonicalizer.")})
    state = None
    names = list(trainable_params(models.denoiser, models.canonicalizer))
    if ck.train is not None:
        d = ck.config.diffusion
        ema, m, v = ck.params("ema"), ck.params("adam_m"), ck.params("adam_v")
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.train["rng_state"]
        adam = AdamState(m=[m[n] for n in names], v=[v[n] for n in names], step=ck.train["adam_step"], lr=d.lr,
                         beta1=d.beta1, beta2=d.beta2, eps=d.adam_eps)
        state = TrainState(step=ck.train["step"], adam=adam,
                           ema=EmaState(decay=d.ema_decay, shadow=[ema[n] for n in names]), rng=rng,
                           losses=ck.blocks["trace/losses"].tolist(), skipped=ck.train["skipped"])
        if use_ema:
            live = trainable_params(models.denoiser, models.canonicalizer)
            for n in names:
                live[n].data = ema[n].copy()
    elif use_ema:
        raise ValueError("checkpoint carries no EMA state")
    return models, state
