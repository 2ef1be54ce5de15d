"""Sample-quality metrics for generated point clouds.

Validity and uniqueness are surrogates defined on template geometry (no
chemistry toolkit): a cloud is valid when it is within RMSD ``tau`` of a
template's rotation orbit, and uniqueness hashes PCA-canonical coordinates.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .canonical import Canonicalizer, DegenerateSpectrum, canonicalize, pca_frame
from .data import BondTable, TemplateSpec
from .diffusion import NoiseSchedule, sample_batch
from .groups import PointCloud, kabsch_rmsd


def bond_counts(cloud: PointCloud, table: BondTable) -> tuple[np.ndarray, int]:
    """Bonds per atom from the distance windows, plus the count of pairs missing from the table."""
    if cloud.labels is None:
        raise ValueError("stability needs atom labels")
    d = np.linalg.norm(cloud.coords[:, None] - cloud.coords[None], axis=-1)
    counts = np.zeros(cloud.n, dtype=int)
    unknown = 0
    for i in range(cloud.n):
        for j in range(i + 1, cloud.n):
            w = table.window(cloud.labels[i], cloud.labels[j])
            if w is None:
                unknown += 1
            elif w[0] <= d[i, j] <= w[1]:
                counts[i] += 1
                counts[j] += 1
    return counts, unknown


def stability(cloud: PointCloud, table: BondTable) -> tuple[float, bool]:
    counts, _ = bond_counts(cloud, table)
    ok = [int(c) in table.valence.get(lab, frozenset()) for lab, c in zip(cloud.labels, counts)]
    return float(np.mean(ok)), bool(all(ok))


TAU_FLOOR = 0.01


def default_tau(templates, dim: int = 3) -> float:
    """Three jitter standard deviations in RMSD units, floored so noise-free data stays valid."""
    return max(3.0 * max(t.jitter_sigma for t in templates) * math.sqrt(dim), TAU_FLOOR)


def template_rmsd(cloud: PointCloud, templates) -> float:
    """Smallest orbit RMSD to a template with the same atom multiset (inf if none)."""
    best = math.inf
    for t in templates:
        if len(t.atom_labels) != cloud.n or sorted(t.atom_labels) != sorted(cloud.labels or ()):
            continue
        best = min(best, kabsch_rmsd(cloud.coords, t.base_coords)[0])
    return best


def validity(cloud: PointCloud, templates, tau: float | None = None) -> bool:
    if not templates:
        raise ValueError("need templates")
    tau = default_tau(templates, cloud.dim) if tau is None else tau
    if tau <= 0:
        raise ValueError("tau must be positive")
    return template_rmsd(cloud, templates) < tau


def orbit_key(cloud: PointCloud, grid: float):
    labels = tuple(cloud.labels or ())
    try:
        R = pca_frame(cloud.coords)
    except DegenerateSpectrum:
        return labels, None
    x = (cloud.coords - cloud.coords.mean(0)) @ R
    return labels, tuple(np.round(x / grid).astype(int).ravel().tolist())


def uniqueness(clouds, grid: float = 0.1) -> float:
    if grid <= 0:
        raise ValueError("grid must be positive")
    if not clouds:
        raise ValueError("no clouds")
    return len({orbit_key(c, grid) for c in clouds}) / len(clouds)


def pose_concentration(clouds, canonicalizer: Canonicalizer) -> float:
    """Mean RMSD between each centered cloud and its canonical pose, without re-alignment."""
    if not clouds:
        raise ValueError("pose_concentration of an empty set")
    vals = []
    for c in clouds:
        x = c.coords - c.coords.mean(0)
        xc = canonicalize(canonicalizer, c).x_canon.coords
        vals.append(math.sqrt(((x - xc) ** 2).sum() / c.n))
    return float(np.mean(vals))


def frame_angles(clouds, canonicalizer: Canonicalizer) -> np.ndarray:
    """Rotation angle (radians) of the canonicalizing frame of each cloud."""
    out = []
    for c in clouds:
        R = canonicalize(canonicalizer, c).rotation
        out.append(math.acos(float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))))
    return np.array(out)


def time_sampling(denoiser, n_samples: int, schedule: NoiseSchedule, features: np.ndarray, mask: np.ndarray,
                  repeats: int = 3, seed: int = 0, dim: int = 3) -> float:
    """Median wall-clock seconds per sample over ``repeats`` full reverse chains.

    A one-chain warmup is run first and excluded. ``features``/``mask`` describe
    a single cloud and are tiled to ``n_samples``.
    """
    feats = np.broadcast_to(features, (n_samples,) + features.shape[-2:]).copy()
    masks = np.broadcast_to(mask, (n_samples, mask.shape[-1])).copy()
    sample_batch(schedule, denoiser, feats[:1], masks[:1], np.random.default_rng(seed), dim)
    times = []
    for r in range(repeats):
        rng = np.random.default_rng(seed + r)
        t0 = time.perf_counter()
        sample_batch(schedule, denoiser, feats, masks, rng, dim)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) / n_samples


@dataclass
class MetricsReport:
    atom_stable_frac: float
    mol_stable_frac: float
    valid_frac: float
    unique_frac: float
    n_samples: int
    mean_nll_per_dim: float | None = None
    sec_per_sample: float | None = None
    pose_concentration: float | None = None
    invariance_error_max: float | None = None

    def __post_init__(self):
        for name in ("atom_stable_frac", "mol_stable_frac", "valid_frac", "unique_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.sec_per_sample is not None and self.sec_per_sample <= 0:
            raise ValueError("sec_per_sample must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(**{f.name: d.get(f.name) for f in fields(cls)})

    def table(self, name: str = "model") -> str:
        """Aligned text table in the column order NLL, mol/atom stable, valid, unique, s/sample."""
        def pct(v):
            return f"{100 * v:.1f}"

        def opt(v, fmt):
            return "-" if v is None else format(v, fmt)

        head = ["Model", "NLL", "Mol stable", "At stable", "Valid", "Unique", "s/sample"]
        row = [name, opt(self.mean_nll_per_dim, ".3f"), pct(self.mol_stable_frac), pct(self.atom_stable_frac),
               pct(self.valid_frac), pct(self.unique_frac), opt(self.sec_per_sample, ".4f")]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
        return line(head) + "\n" + line(row) + "\n"


def _score_chunk(job):
    clouds, templates, table = job
    return [(stability(c, table), template_rmsd(c, templates)) for c in clouds]


def score_clouds(clouds, templates, table: BondTable, workers: int = 1):
    """Per-cloud ``(atom_frac, mol_stable)`` pairs and template RMSDs, in input order."""
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        jobs = [(clouds[k::workers], templates, table) for k in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_score_chunk, jobs))
        scores = [None] * len(clouds)
        for k, part in enumerate(parts):
            scores[k::workers] = part
    else:
        scores = _score_chunk((clouds, templates, table))
    return [s for s, _ in scores], np.array([r for _, r in scores])


def evaluate(clouds, templates: list[TemplateSpec], table: BondTable, tau: float | None = None,
             grid: float = 0.1, workers: int = 1, **extra) -> MetricsReport:
    if not templates:
        raise ValueError("need templates")
    if not clouds:
        raise ValueError("no clouds to evaluate")
    return evaluate_scored(clouds, *score_clouds(clouds, templates, table, workers), templates, tau, grid, **extra)


def evaluate_scored(clouds, stab, rmsds, templates, tau=None, grid: float = 0.1, **extra) -> MetricsReport:
    if not clouds:
        raise ValueError("no clouds to evaluate")
    tau = default_tau(templates, clouds[0].dim) if tau is None else tau
    if tau <= 0:
        raise ValueError("tau must be positive")
    n_atoms = np.array([c.n for c in clouds])
    return MetricsReport(
        atom_stable_frac=float(np.dot([s[0] for s in stab], n_atoms) / n_atoms.sum()),
        mol_stable_frac=float(np.mean([s[1] for s in stab])),
        valid_frac=float(np.mean(np.asarray(rmsds) < tau)),
        unique_frac=uniqueness(clouds, grid),
        n_samples=len(clouds),
        **extra,
    )
