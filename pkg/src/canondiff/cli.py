"""Command line interface: gen-data, train, sample, eval, canon, nll.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 IO or file-format failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import plots
from .autograd import NumericError
from .canonical import KINDS, Canonicalizer, DegenerateSpectrum, canonicalize, invariance_error
from .data import (SPLITS, BondTable, Dataset, ParseError, TemplateSpec, bond_table_from_templates,
                   default_templates, element_vocab, featurize, gen_synthetic, load_split, load_templates, pad,
                   read_xyz, save_templates, split_indices, unpad, write_xyz)
from .diffusion import estimate_nll, init_train_state, sample_batch, train
from .experiment import (STREAMS, ConfigError, RunConfig, apply_overrides, build_models, read_checkpoint, restore,
                         save_checkpoint, substream)
from .groups import DegenerateFrame
from .metrics import default_tau, evaluate_scored, frame_angles, pose_concentration, score_clouds
from .nets import CanonicalizerConfig, CanonicalizerNet

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "CANON_DIFFUSE_SEED"
SAMPLE_CHUNK = 16


class UsageError(ValueError):
    pass


def _resolve_seed(flag: int | None, fallback: int = 0) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_templates(data_dir) -> list[TemplateSpec]:
    p = Path(data_dir) / "templates.json"
    return load_templates(p) if p.exists() else default_templates()


def _dataset(data_dir, split: str, elements=None) -> Dataset:
    records = load_split(data_dir, split)
    if elements is None:
        elements = element_vocab(_load_templates(data_dir))
    return Dataset(records, tuple(elements), source=str(data_dir))


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(a) -> int:
    if a.count < 1:
        raise UsageError("--count must be >= 1")
    seed = _resolve_seed(a.seed)
    templates = load_templates(a.templates) if a.templates else default_templates()
    if a.jitter is not None:
        if a.jitter < 0:
            raise UsageError("--jitter must be >= 0")
        templates = [TemplateSpec(t.id, t.atom_labels, t.base_coords, a.jitter, t.bonds) for t in templates]
    rng = substream(seed, "data")
    ds = gen_synthetic(templates, a.count, rng, seed)
    splits = split_indices(len(ds), rng)
    out = Path(a.out)
    for name in SPLITS:
        _write(out / name / "data.xyz", write_xyz([ds.records[i] for i in splits[name]]))
    save_templates(templates, out / "templates.json")
    bond_table_from_templates(templates).save(out / "bond_table.json")
    manifest = {"count": a.count, "seed": seed, "elements": list(ds.elements),
                "splits": {k: int(len(v)) for k, v in splits.items()},
                "templates": [t.id for t in templates]}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {a.count} clouds to {out} (" + ", ".join(f"{k} {len(v)}" for k, v in splits.items()) + ")")
    return EXIT_OK


# ------------------------------------------------------------------- train

def _run_config(a) -> RunConfig:
    base = RunConfig().to_dict()
    if a.config:
        base = json.loads(Path(a.config).read_text())
    d = apply_overrides(base, a.set)
    if a.variant is not None:
        d["model_variant"] = a.variant
    if a.data is not None:
        d["data_dir"] = a.data
    if a.out is not None:
        d["output_dir"] = a.out
    if a.ckpt_every is not None:
        d["ckpt_every"] = a.ckpt_every
    d.setdefault("diffusion", {})
    if a.steps is not None:
        d["diffusion"]["steps"] = a.steps
    d["seed"] = _resolve_seed(a.seed, d.get("seed", 0))
    return RunConfig.from_dict(d)


def _label_pool(ds: Dataset) -> dict:
    counts = Counter(tuple(r.labels) for r in ds.records)
    pool = sorted(counts)
    return {"elements": list(ds.elements), "label_pool": [list(p) for p in pool],
            "label_weights": [counts[p] for p in pool]}


def _write_loss_csv(path, losses) -> None:
    _write(path, "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses)))


def cmd_train(a) -> int:
    if a.resume:
        ck = read_checkpoint(a.resume)
        if ck.train is None:
            raise UsageError(f"{a.resume} has no training state to resume from")
        d = apply_overrides(ck.config.to_dict(), a.set)
        if a.steps is not None:
            d["diffusion"]["steps"] = a.steps
        if a.out is not None:
            d["output_dir"] = a.out
        if a.ckpt_every is not None:
            d["ckpt_every"] = a.ckpt_every
        if a.data is not None:
            d["data_dir"] = a.data
        cfg = RunConfig.from_dict(d)
        meta = ck.meta
        ck.config = cfg
        models, state = restore(ck, len(meta["elements"]))
        ds = _dataset(cfg.data_dir, "train", meta["elements"])
    else:
        cfg = _run_config(a)
        ds = _dataset(cfg.data_dir, "train")
        meta = _label_pool(ds)
        models = build_models(cfg, len(ds.elements))
        state = init_train_state(cfg.diffusion, models.denoiser, models.canonicalizer, substream(cfg.seed, "train"))
    if cfg.dim != ds.records[0].dim:
        raise ConfigError(f"config dim {cfg.dim} does not match data dim {ds.records[0].dim}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    def on_step(st):
        if cfg.ckpt_every and st.step % cfg.ckpt_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"step_{st.step:06d}.ckpt", cfg, models, st, meta)

    try:
        state = train(cfg.diffusion, models.canonicalizer, models.denoiser, ds.padded(), state=state,
                      callback=on_step)
    except NumericError as e:
        _write_loss_csv(out / "loss.csv", state.losses)
        raise NumericError(f"{e} (variant {cfg.model_variant}, seed {cfg.seed}, last finite loss "
                           f"{next((v for v in reversed(state.losses) if np.isfinite(v)), None)})", e.op) from None
    save_checkpoint(out / "model.ckpt", cfg, models, state, meta)
    _write_loss_csv(out / "loss.csv", state.losses)
    read_checkpoint(out / "model.ckpt")
    print(f"{cfg.model_variant}: {state.step} steps, final loss {state.losses[-1]:.4f}, "
          f"skipped clouds {state.skipped}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


# ------------------------------------------------------------------ sample

def _load_for_inference(path, use_ema: bool = True):
    ck = read_checkpoint(path)
    elements = ck.meta.get("elements")
    if elements is None:
        raise UsageError(f"{path} carries no element vocabulary")
    models, _ = restore(ck, len(elements), use_ema=use_ema and ck.train is not None)
    return ck, models, elements


def _sample_chunk(job):
    ckpt, use_ema, labels, seed_seq = job
    ck, models, elements = _load_for_inference(ckpt, use_ema)
    index = {e: i for i, e in enumerate(elements)}
    n_max = max(len(lab) for lab in labels)
    feats = np.zeros((len(labels), n_max, len(elements)))
    mask = np.zeros((len(labels), n_max))
    for b, lab in enumerate(labels):
        mask[b, :len(lab)] = 1.0
        for i, e in enumerate(lab):
            feats[b, i, index[e]] = 1.0
    d = ck.config.diffusion
    z = sample_batch(d.schedule(), models.denoiser, feats, mask, np.random.default_rng(seed_seq), ck.config.dim,
                     d.com_project_noise, reverse_var=d.reverse_var)
    return z, mask


def generate(ckpt, n: int, seed: int, workers: int = 1, use_ema: bool = True):
    """Sample ``n`` clouds; output is independent of ``workers``."""
    ck = read_checkpoint(ckpt)
    pool, weights = ck.meta["label_pool"], np.asarray(ck.meta["label_weights"], dtype=float)
    ss = np.random.SeedSequence([seed, STREAMS["sample"]])
    rng = np.random.default_rng(ss)
    picks = rng.choice(len(pool), size=n, p=weights / weights.sum())
    labels = [tuple(pool[i]) for i in picks]
    chunks = [labels[k:k + SAMPLE_CHUNK] for k in range(0, n, SAMPLE_CHUNK)]
    jobs = [(str(ckpt), use_ema, c, s) for c, s in zip(chunks, ss.spawn(len(chunks)))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sample_chunk, jobs))
    else:
        results = [_sample_chunk(j) for j in jobs]
    clouds = []
    for (z, mask), c in zip(results, chunks):
        clouds += unpad(z, mask, c)
    return clouds


def cmd_sample(a) -> int:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    if a.workers < 1:
        raise UsageError("--workers must be >= 1")
    seed = _resolve_seed(a.seed)
    t0 = time.perf_counter()
    clouds = generate(a.ckpt, a.n, seed, a.workers, not a.raw)
    elapsed = time.perf_counter() - t0
    comments = [f"sample={i} seed={seed}" for i in range(len(clouds))]
    _write(a.out, write_xyz(clouds, comments))
    _write(str(a.out) + ".timing.json", json.dumps(
        {"n": a.n, "workers": a.workers, "seconds": elapsed, "sec_per_sample": elapsed / a.n}, indent=2) + "\n")
    print(f"wrote {a.n} samples to {a.out} ({elapsed / a.n:.3f} s/sample)")
    return EXIT_OK


# -------------------------------------------------------------------- eval

def _pose_angles(clouds, can: Canonicalizer) -> np.ndarray:
    """Frame angles, skipping clouds whose frame is undefined (symmetric PCA spectra)."""
    out = []
    for c in clouds:
        try:
            out.append(frame_angles([c], can)[0])
        except (DegenerateSpectrum, DegenerateFrame):
            continue
    return np.array(out)


def cmd_eval(a) -> int:
    if a.workers < 1:
        raise UsageError("--workers must be >= 1")
    clouds = read_xyz(a.samples)
    if not clouds:
        raise UsageError(f"{a.samples} holds no clouds")
    templates = _load_templates(a.data)
    bt_path = Path(a.data) / "bond_table.json"
    table = BondTable.load(bt_path) if bt_path.exists() else bond_table_from_templates(templates)
    tau = a.tau if a.tau is not None else default_tau(templates, clouds[0].dim)
    extra = {}
    if a.timing:
        extra["sec_per_sample"] = json.loads(Path(a.timing).read_text())["sec_per_sample"]
    can, elements = Canonicalizer("pca"), element_vocab(templates)
    if a.ckpt:
        ck, models, elements = _load_for_inference(a.ckpt)
        if models.canonicalizer.kind != "identity":
            can = models.canonicalizer
            feats = [featurize(c, elements) for c in clouds]
            extra["pose_concentration"] = pose_concentration(feats, can)
        if a.nll > 0:
            test = _dataset(a.data, "test", elements)
            rng = substream(ck.config.seed, "eval")
            idx = np.sort(rng.choice(len(test), size=min(a.nll, len(test)), replace=False))
            data = pad([test.records[i] for i in idx], test.elements)
            d = ck.config.diffusion
            nll = estimate_nll(d.schedule(), models.denoiser, models.canonicalizer, data, rng,
                               d.com_project_noise, reverse_var=d.reverse_var)
            extra["mean_nll_per_dim"] = float(np.mean(nll))
    angles = _pose_angles([featurize(c, elements) for c in clouds], can)
    stab, rmsds = score_clouds(clouds, templates, table, a.workers)
    report = evaluate_scored(clouds, stab, rmsds, templates, tau, a.grid, **extra)
    out = Path(a.out)
    _write(out / "metrics.json", report.to_json())
    _write(out / "table.txt", report.table(a.name))
    finite = rmsds[np.isfinite(rmsds)]
    _write(out / "validity.svg", plots.histogram_svg(finite, 30, f"template RMSD (tau={tau:.3f})", "RMSD"))
    _write(out / "pose_angles.svg", plots.histogram_svg(angles, 30, f"frame angles ({can.kind})", "radians",
                                                       (0.0, np.pi)))
    if a.loss:
        rows = np.loadtxt(a.loss, delimiter=",", skiprows=1, ndmin=2)
        _write(out / "loss.svg", plots.line_svg(rows[:, 0], rows[:, 1], "training loss", "step", "loss"))
    sys.stdout.write(report.table(a.name))
    return EXIT_OK


# ------------------------------------------------------------------- canon

def _canonicalizer(a, labels) -> tuple[Canonicalizer, tuple]:
    if a.kind in ("identity", "pca"):
        return Canonicalizer(a.kind), tuple(sorted(set(labels)))
    if a.ckpt:
        ck, models, elements = _load_for_inference(a.ckpt)
        if models.canonicalizer.net is None:
            raise UsageError(f"{a.ckpt} has no canonicalizer network (variant {ck.config.model_variant})")
        can = Canonicalizer(a.kind, models.canonicalizer.net)
        return can, tuple(elements)
    if a.kind == "learned":
        raise UsageError("--kind learned needs --ckpt")
    elements = tuple(sorted(set(labels)))
    cfg = RunConfig(model_variant="canon_fr_gdm", seed=_resolve_seed(a.seed))
    net = CanonicalizerNet(CanonicalizerConfig(len(elements), 3, cfg.nets.canon_hidden, cfg.nets.canon_layers,
                                               cfg.nets.canon_channels), substream(cfg.seed, "init"))
    return Canonicalizer("frozen", net), elements


def cmd_canon(a) -> int:
    clouds = read_xyz(a.input)
    if not clouds:
        raise UsageError(f"{a.input} holds no clouds")
    can, elements = _canonicalizer(a, [lab for c in clouds for lab in c.labels])
    clouds = [featurize(c, elements) for c in clouds]
    rng = substream(_resolve_seed(a.seed), "eval")
    out_clouds, errors = [], []
    for c in clouds:
        out_clouds.append(canonicalize(can, c).x_canon)
        errors.append(invariance_error(can, c, a.trials, rng))
    _write(a.out, write_xyz(out_clouds, [c.meta.get("comment", "") for c in clouds]))
    worst = float(max(errors))
    invariant = can.kind != "identity" and worst < a.tol
    report = {"kind": can.kind, "n_clouds": len(clouds), "trials_per_cloud": a.trials, "tolerance": a.tol,
              "max_invariance_error": worst, "mean_invariance_error": float(np.mean(errors)),
              "status": "invariant" if invariant else "not invariant"}
    _write(a.report or str(a.out) + ".report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{can.kind}: max invariance error {worst:.3e} -> {report['status']}")
    return EXIT_OK


# --------------------------------------------------------------------- nll

def cmd_nll(a) -> int:
    ck, models, elements = _load_for_inference(a.ckpt, not a.raw)
    ds = _dataset(a.data, a.split, elements)
    n = len(ds) if a.n is None else min(a.n, len(ds))
    if n < 1:
        raise UsageError("--n must be >= 1")
    rng = substream(_resolve_seed(a.seed, ck.config.seed), "eval")
    d = ck.config.diffusion
    data = pad(ds.records[:n], ds.elements)
    nll = estimate_nll(d.schedule(), models.denoiser, models.canonicalizer, data, rng, d.com_project_noise,
                       reverse_var=d.reverse_var)
    rows = "".join(f"{i},{ds.records[i].meta.get('template', '')},{float(v)!r}\n" for i, v in enumerate(nll))
    _write(a.out, "index,template,nll_per_dim\n" + rows)
    print(f"mean NLL {np.mean(nll):.4f} nats/dim over {n} clouds")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canondiff", description="Diffusion with learned canonicalization.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic template dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=5000)
    g.add_argument("--seed", type=int)
    g.add_argument("--templates", help="template JSON (default: built-in four templates)")
    g.add_argument("--jitter", type=float, help="override every template's jitter sigma")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model variant")
    t.add_argument("--data")
    t.add_argument("--variant", choices=["gdm", "edm_lite", "canon_gdm", "canon_fr_gdm"])
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dot-path override")
    t.add_argument("--out")
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate clouds from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--raw", action="store_true", help="use live parameters instead of EMA")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="score samples against the templates")
    e.add_argument("--samples", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--loss", help="loss CSV for the loss-curve plot")
    e.add_argument("--timing", help="timing JSON written by sample")
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float)
    e.add_argument("--grid", type=float, default=0.1)
    e.add_argument("--nll", type=int, default=0, help="test clouds for the NLL estimate (needs --ckpt)")
    e.add_argument("--name", default="model")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("canon", help="export canonical poses with an invariance report")
    c.add_argument("--input", required=True)
    c.add_argument("--kind", choices=KINDS, default="pca")
    c.add_argument("--ckpt")
    c.add_argument("--out", required=True)
    c.add_argument("--report")
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--seed", type=int)
    c.set_defaults(fn=cmd_canon)

    n = sub.add_parser("nll", help="per-cloud variational bound in nats per dimension")
    n.add_argument("--ckpt", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--split", choices=SPLITS, default="test")
    n.add_argument("--n", type=int)
    n.add_argument("--seed", type=int)
    n.add_argument("--out", required=True)
    n.add_argument("--raw", action="store_true")
    n.set_defaults(fn=cmd_nll)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure in op {e.op!r}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, json.JSONDecodeError) as e:
        print(f"IO error: {e}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ValueError, KeyError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
