import struct

import numpy as np
import pytest

from canondiff.autograd import Tensor
from canondiff.diffusion import train
from canondiff.experiment import (FORMAT_VERSION, MAGIC, ConfigError, RunConfig, apply_overrides, build_models,
                                  read_checkpoint, restore, save_checkpoint, substream)

from helpers import synthetic as _synthetic


def synthetic(count, seed):
    return _synthetic(count, seed)[1].padded()


def small_cfg(variant="canon_gdm", **kw):
    d = {"model_variant": variant, "seed": 3,
         "diffusion": {"T": 20, "batch_size": 8, "steps": 4},
         "nets": {"denoiser_hidden": 8, "denoiser_layers": 1, "time_embed_dim": 8, "canon_hidden": 8,
                  "canon_layers": 1}}
    d.update(kw)
    return RunConfig.from_dict(d)


def forward(models, data):
    t = np.arange(data.coords.shape[0]) % 20
    return models.denoiser(Tensor(data.coords), t, data.features, data.mask).data


def test_substreams_are_independent_and_reproducible():
    a = substream(5, "train").standard_normal(4)
    assert a.tobytes() == substream(5, "train").standard_normal(4).tobytes()
    assert a.tobytes() != substream(5, "sample").standard_normal(4).tobytes()
    assert a.tobytes() != substream(6, "train").standard_normal(4).tobytes()


@pytest.mark.parametrize("variant,kind", [("gdm", "identity"), ("edm_lite", "identity"), ("canon_gdm", "learned"),
                                          ("canon_fr_gdm", "frozen")])
def test_variant_builds_matching_canonicalizer(variant, kind):
    m = build_models(small_cfg(variant), 4)
    assert m.canonicalizer.kind == kind
    assert (m.canonicalizer.net is None) == (kind == "identity")


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig(model_variant="nope")
    with pytest.raises(ConfigError):
        RunConfig(model_variant="gdm", canonicalizer="learned")
    with pytest.raises(ConfigError):
        RunConfig(dim=4)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"diffusion": {"bogus": 1}})
    assert RunConfig(model_variant="canon_fr_gdm", canonicalizer="frozen").canonicalizer_kind == "frozen"


def test_overrides():
    d = RunConfig().to_dict()
    out = apply_overrides(d, ["diffusion.lr=0.01", "model_variant=gdm", "nets.canon_channels=null"])
    assert out["diffusion"]["lr"] == 0.01 and out["model_variant"] == "gdm" and out["nets"]["canon_channels"] is None
    assert d["diffusion"]["lr"] == 1e-3
    for bad in (["diffusion.nope=1"], ["novalue"], ["seed.x=1"]):
        with pytest.raises(ConfigError):
            apply_overrides(d, bad)


def test_config_dict_round_trip():
    cfg = small_cfg("edm_lite")
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    data = synthetic(24, 0)
    cfg = small_cfg()
    models = build_models(cfg, data.features.shape[-1])
    st = train(cfg.diffusion, models.canonicalizer, models.denoiser, data, rng=substream(3, "train"))
    save_checkpoint(tmp_path / "a.ckpt", cfg, models, st, {"elements": ["C"]})
    ck = read_checkpoint(tmp_path / "a.ckpt")
    assert ck.meta == {"elements": ["C"]} and ck.config == cfg
    back, st2 = restore(ck, data.features.shape[-1])
    assert forward(back, data).tobytes() == forward(models, data).tobytes()
    assert st2.step == st.step and st2.losses == st.losses
    assert st2.rng.bit_generator.state == st.rng.bit_generator.state
    for a, b in zip(st.adam.m + st.adam.v + st.ema.shadow, st2.adam.m + st2.adam.v + st2.ema.shadow):
        assert a.tobytes() == b.tobytes()
    save_checkpoint(tmp_path / "b.ckpt", cfg, back, st2, {"elements": ["C"]})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resumed_training_matches_uninterrupted(tmp_path):
    data = synthetic(24, 0)
    cfg = small_cfg()
    F = data.features.shape[-1]
    full = build_models(cfg, F)
    st_full = train(cfg.diffusion, full.canonicalizer, full.denoiser, data, rng=substream(3, "train"), steps=6)
    part = build_models(cfg, F)
    st = train(cfg.diffusion, part.canonicalizer, part.denoiser, data, rng=substream(3, "train"), steps=3)
    save_checkpoint(tmp_path / "p.ckpt", cfg, part, st)
    resumed, st = restore(read_checkpoint(tmp_path / "p.ckpt"), F)
    st = train(cfg.diffusion, resumed.canonicalizer, resumed.denoiser, data, state=st, steps=6)
    assert np.array(st.losses).tobytes() == np.array(st_full.losses).tobytes()
    assert forward(resumed, data).tobytes() == forward(full, data).tobytes()


def test_ema_restore_and_inference_only_checkpoints(tmp_path):
    data = synthetic(16, 1)
    cfg = small_cfg("gdm")
    models = build_models(cfg, data.features.shape[-1])
    save_checkpoint(tmp_path / "w.ckpt", cfg, models)
    ck = read_checkpoint(tmp_path / "w.ckpt")
    assert ck.train is None
    restore(ck, data.features.shape[-1])
    with pytest.raises(ValueError):
        restore(ck, data.features.shape[-1], use_ema=True)


def test_rejects_foreign_or_future_files(tmp_path):
    data = synthetic(8, 0)
    cfg = small_cfg("gdm")
    save_checkpoint(tmp_path / "a.ckpt", cfg, build_models(cfg, data.features.shape[-1]))
    raw = (tmp_path / "a.ckpt").read_bytes()
    bumped = MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + raw[len(MAGIC) + 4:]
    (tmp_path / "b.ckpt").write_bytes(bumped)
    with pytest.raises(ValueError, match="format_version"):
        read_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "c.ckpt")
