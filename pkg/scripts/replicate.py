#!/usr/bin/env python3
"""Desk-scale comparison of gdm, edm_lite, canon_fr_gdm and canon_gdm.

Trains every variant for each seed on one synthetic dataset, samples, scores,
and then measures sampling speed and pose concentration. Each run is cached
under ``<out>/runs/<variant>_s<seed>/``; rerunning skips finished runs. The
summary goes to ``<out>/replication.json``.

    python3 scripts/replicate.py --out results --steps 10000 --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from canondiff.cli import main
from canondiff.data import featurize, read_xyz
from canondiff.experiment import read_checkpoint, restore, substream
from canondiff.groups import PointCloud, apply, random_rotation
from canondiff.metrics import pose_concentration, time_sampling

VARIANTS = ("gdm", "edm_lite", "canon_fr_gdm", "canon_gdm")


def run(argv) -> None:
    code = main([str(x) for x in argv])
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}: {' '.join(map(str, argv))}")


def one_run(out: Path, data: Path, variant: str, seed: int, args) -> dict:
    rdir = out / "runs" / f"{variant}_s{seed}"
    metrics = rdir / "eval" / "metrics.json"
    if not metrics.exists():
        t0 = time.perf_counter()
        if not (rdir / "model.ckpt").exists():
            run(["train", "--data", data, "--variant", variant, "--steps", args.steps, "--seed", seed,
                 "--out", rdir, "--ckpt-every", args.ckpt_every])
        train_sec = time.perf_counter() - t0
        run(["sample", "--ckpt", rdir / "model.ckpt", "--n", args.n_samples, "--seed", seed,
             "--out", rdir / "samples.xyz"])
        run(["eval", "--samples", rdir / "samples.xyz", "--data", data, "--ckpt", rdir / "model.ckpt",
             "--loss", rdir / "loss.csv", "--timing", rdir / "samples.xyz.timing.json", "--nll", args.nll,
             "--name", variant, "--out", rdir / "eval"])
        (rdir / "wallclock.json").write_text(json.dumps({"train_and_load_sec": train_sec}) + "\n")
    return json.loads(metrics.read_text())


def timing_ratio(out: Path, seed: int, repeats: int = 3) -> dict:
    """Seconds per sample of the plain GNN over the equivariant one, same cloud size."""
    res = {}
    for variant in ("gdm", "edm_lite"):
        ck = read_checkpoint(out / "runs" / f"{variant}_s{seed}" / "model.ckpt")
        elements = ck.meta["elements"]
        models, _ = restore(ck, len(elements), use_ema=True)
        labels = max(ck.meta["label_pool"], key=len)
        cloud = PointCloud(np.zeros((len(labels), 3)), labels=tuple(labels))
        feats = featurize(cloud, elements).features[None]
        res[variant] = time_sampling(models.denoiser, 16, ck.config.diffusion.schedule(), feats,
                                     np.ones((1, len(labels))), repeats=repeats, seed=seed)
        res[f"{variant}_params"] = models.denoiser.n_params()
    res["ratio"] = res["gdm"] / res["edm_lite"]
    return res


def pose_check(out: Path, seed: int) -> dict:
    """Pose concentration of canon_gdm samples against Haar re-rotated copies."""
    rdir = out / "runs" / f"canon_gdm_s{seed}"
    ck = read_checkpoint(rdir / "model.ckpt")
    elements = ck.meta["elements"]
    models, _ = restore(ck, len(elements), use_ema=True)
    can = models.canonicalizer
    clouds = [featurize(c, elements) for c in read_xyz(rdir / "samples.xyz")]
    rng = substream(seed, "eval")
    rotated = [apply(random_rotation(rng, 3), c) for c in clouds]
    a, b = pose_concentration(clouds, can), pose_concentration(rotated, can)
    return {"samples": a, "rerotated": b, "ratio": a / b}


def main_cli(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--steps", type=int, default=10000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    p.add_argument("--train-clouds", type=int, default=5000)
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--nll", type=int, default=64)
    p.add_argument("--ckpt-every", type=int, default=2000)
    args = p.parse_args(argv)

    out = Path(args.out)
    data = out / "data"
    if not (data / "manifest.json").exists():
        # train split is floor(0.8 * count)
        run(["gen-data", "--out", data, "--count", int(np.ceil(args.train_clouds / 0.8)), "--seed", 0])

    summary = {"steps": args.steps, "seeds": args.seeds, "n_samples": args.n_samples, "runs": {}}
    for seed in args.seeds:
        for variant in args.variants:
            print(f"== {variant} seed {seed}", flush=True)
            summary["runs"][f"{variant}_s{seed}"] = one_run(out, data, variant, seed, args)
    if {"gdm", "edm_lite"} <= set(args.variants):
        summary["timing"] = timing_ratio(out, args.seeds[0])
    if "canon_gdm" in args.variants:
        summary["pose"] = {str(s): pose_check(out, s) for s in args.seeds}
    (out / "replication.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print_table(summary)


def print_table(summary: dict) -> None:
    print(f"{'run':<18}{'valid':>8}{'mol':>8}{'atom':>8}{'uniq':>8}{'nll':>9}")
    for name, m in sorted(summary["runs"].items()):
        nll = m.get("mean_nll_per_dim")
        print(f"{name:<18}{100 * m['valid_frac']:8.1f}{100 * m['mol_stable_frac']:8.1f}"
              f"{100 * m['atom_stable_frac']:8.1f}{100 * m['unique_frac']:8.1f}"
              f"{'-' if nll is None else format(nll, '.3f'):>9}")


if __name__ == "__main__":
    main_cli()
