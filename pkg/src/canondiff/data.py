"""Synthetic rotation-invariant datasets, XYZ I/O, bond tables and splits."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import PaddedData
from .groups import PointCloud, random_rotation

log = logging.getLogger(__name__)

ELEMENTS = frozenset("""
H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr
Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb
Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr
""".split())
GENERIC_LABEL = "X"
SPLITS = ("train", "val", "test")


class ParseError(ValueError):
    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class TemplateSpec:
    id: int
    atom_labels: list[str]
    base_coords: np.ndarray
    jitter_sigma: float = 0.05
    bonds: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.base_coords = np.asarray(self.base_coords, dtype=np.float64)
        self.base_coords = self.base_coords - self.base_coords.mean(0)
        if len(self.atom_labels) != self.base_coords.shape[0]:
            raise ValueError(f"template {self.id}: label/coordinate count mismatch")
        n = len(self.atom_labels)
        if n > 1:
            d = np.linalg.norm(self.base_coords[:, None] - self.base_coords[None], axis=-1)
            if d[~np.eye(n, dtype=bool)].min() < 0.5:
                raise ValueError(f"template {self.id}: atoms closer than 0.5")

    def cloud(self) -> PointCloud:
        return PointCloud(self.base_coords, labels=tuple(self.atom_labels), meta={"template": self.id})

    def to_json(self) -> dict:
        return {"id": self.id, "atom_labels": list(self.atom_labels),
                "base_coords": self.base_coords.tolist(), "jitter_sigma": self.jitter_sigma,
                "bonds": [list(b) for b in self.bonds]}

    @classmethod
    def from_json(cls, d: dict) -> "TemplateSpec":
        return cls(int(d["id"]), list(d["atom_labels"]), np.asarray(d["base_coords"]),
                   float(d.get("jitter_sigma", 0.05)), [tuple(b) for b in d.get("bonds", [])])


def default_templates(jitter_sigma: float = 0.05) -> list[TemplateSpec]:
    """Four small rigid shapes with unit bonds and symmetry-breaking labels.

    Bent triatomic, planar 4-ring, square pyramid and octahedron. Labels are
    chosen so that no nonidentity rotation maps a template onto itself.
    """
    ang = np.deg2rad(109.5)
    bent = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [np.cos(ang), np.sin(ang), 0.0]]
    square = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    h = math.sqrt(0.5)
    pyramid = [[0.5, 0.5, 0], [-0.5, 0.5, 0], [-0.5, -0.5, 0], [0.5, -0.5, 0], [0, 0, h]]
    octa = [[h, 0, 0], [0, h, 0], [0, 0, h], [-h, 0, 0], [0, -h, 0], [0, 0, -h]]
    octa_bonds = [(i, j) for i in range(6) for j in range(i + 1, 6) if j != i + 3]
    return [
        TemplateSpec(0, ["F", "O", "H"], bent, jitter_sigma, [(0, 1), (1, 2)]),
        TemplateSpec(1, ["O", "S", "Se", "N"], square, jitter_sigma, [(0, 1), (1, 2), (2, 3), (0, 3)]),
        TemplateSpec(2, ["N", "N", "B", "B", "C"], pyramid, jitter_sigma,
                     [(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4), (2, 4), (3, 4)]),
        TemplateSpec(3, ["C", "C", "Si", "Si", "Ge", "Ge"], octa, jitter_sigma, octa_bonds),
    ]


def load_templates(path) -> list[TemplateSpec]:
    return [TemplateSpec.from_json(d) for d in json.loads(Path(path).read_text())]


def save_templates(templates, path) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in templates], indent=2) + "\n")


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    records: list[PointCloud]
    elements: tuple[str, ...]
    source: str = "synthetic"
    seed: int | None = None

    def __post_init__(self):
        if not self.records:
            raise ValueError("dataset must be nonempty")
        dims = {r.dim for r in self.records}
        if len(dims) != 1:
            raise ValueError(f"mixed dimensions {dims}")

    def __len__(self) -> int:
        return len(self.records)

    def padded(self) -> PaddedData:
        return pad(self.records, self.elements)


def one_hot(labels, elements) -> np.ndarray:
    index = {e: i for i, e in enumerate(elements)}
    out = np.zeros((len(labels), len(elements)))
    for i, lab in enumerate(labels):
        if lab in index:
            out[i, index[lab]] = 1.0
    return out


def featurize(cloud: PointCloud, elements) -> PointCloud:
    if cloud.labels is None:
        raise ValueError("cloud has no atom labels")
    return PointCloud(cloud.coords, one_hot(cloud.labels, elements), cloud.labels, cloud.meta)


def element_vocab(templates) -> tuple[str, ...]:
    return tuple(sorted({e for t in templates for e in t.atom_labels}))


def pad(records, elements, n_max: int | None = None) -> PaddedData:
    n_max = n_max or max(r.n for r in records)
    d = records[0].dim
    B, F = len(records), len(elements)
    coords, feats, mask = np.zeros((B, n_max, d)), np.zeros((B, n_max, F)), np.zeros((B, n_max))
    for b, r in enumerate(records):
        coords[b, :r.n] = r.coords
        feats[b, :r.n] = one_hot(r.labels, elements) if r.labels is not None else r.features
        mask[b, :r.n] = 1.0
    return PaddedData(coords, feats, mask)


def unpad(coords: np.ndarray, mask: np.ndarray, labels_list, meta_list=None) -> list[PointCloud]:
    out = []
    for b in range(coords.shape[0]):
        n = int(mask[b].sum())
        meta = meta_list[b] if meta_list is not None else {}
        out.append(PointCloud(coords[b, :n], labels=labels_list[b], meta=dict(meta)))
    return out


def gen_synthetic(templates, count: int, rng: np.random.Generator, seed: int | None = None) -> Dataset:
    """Rotated, jittered copies of templates, picked uniformly; zero center of mass."""
    if not templates:
        raise ValueError("need at least one template")
    if count < 1:
        raise ValueError("count must be >= 1")
    elements = element_vocab(templates)
    records = []
    for _ in range(count):
        tpl = templates[int(rng.integers(len(templates)))]
        x = tpl.base_coords + rng.normal(0.0, 1.0, tpl.base_coords.shape) * tpl.jitter_sigma
        x = x @ random_rotation(rng, x.shape[1]).T
        x = x - x.mean(0)
        comment = f"template={tpl.id} seed={seed if seed is not None else ''}".rstrip()
        records.append(PointCloud(x, one_hot(tpl.atom_labels, elements), tuple(tpl.atom_labels),
                                  {"template": tpl.id, "comment": comment}))
    return Dataset(records, elements, "synthetic", seed)


def split_indices(n: int, rng: np.random.Generator, fractions=(0.8, 0.1)) -> dict[str, np.ndarray]:
    """Disjoint train/val/test index sets covering ``range(n)``: floor 80% / floor 10% / rest."""
    perm = rng.permutation(n)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


# ---------------------------------------------------------------------- XYZ

def _normalize_symbol(sym: str) -> str:
    sym = sym.capitalize()
    if sym not in ELEMENTS:
        log.warning("unknown element %r recorded as %r", sym, GENERIC_LABEL)
        return GENERIC_LABEL
    return sym


def parse_xyz(text: str) -> list[PointCloud]:
    """Parse concatenated XYZ frames. Comments are kept in ``meta['comment']``."""
    lines = text.splitlines()
    clouds = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"expected atom count, got {lines[i]!r}", i + 1) from None
        if count < 1:
            raise ParseError("atom count must be positive", i + 1)
        if i + 1 + count >= len(lines):
            raise ParseError(f"frame declares {count} atoms but the input ends", len(lines))
        comment = lines[i + 1]
        labels, coords = [], []
        for k in range(count):
            ln = i + 2 + k
            parts = lines[ln].split()
            if len(parts) < 4:
                raise ParseError(f"expected 'El x y z', got {lines[ln]!r}", ln + 1)
            try:
                coords.append([float(v) for v in parts[1:4]])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {lines[ln]!r}", ln + 1) from None
            labels.append(_normalize_symbol(parts[0]))
        meta = {"comment": comment}
        if comment.startswith("template="):
            try:
                meta["template"] = int(comment.split()[0].split("=", 1)[1])
            except ValueError:
                pass
        clouds.append(PointCloud(np.array(coords), labels=tuple(labels), meta=meta))
        i += 2 + count
    return clouds


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_xyz(clouds, comments=None) -> str:
    out = []
    for k, c in enumerate(clouds):
        if c.labels is None:
            raise ValueError("write_xyz needs atom labels")
        if c.dim != 3:
            raise ValueError("XYZ frames are three-dimensional")
        comment = comments[k] if comments is not None else c.meta.get("comment", "")
        out.append(f"{c.n}\n{comment}\n")
        for lab, (x, y, z) in zip(c.labels, c.coords):
            out.append(f"{lab} {_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
    return "".join(out)


def read_xyz(path) -> list[PointCloud]:
    return parse_xyz(Path(path).read_text())


def load_split(root, split: str) -> list[PointCloud]:
    files = sorted((Path(root) / split).glob("*.xyz"))
    if not files:
        raise FileNotFoundError(f"no XYZ files under {Path(root) / split}")
    return [c for f in files for c in read_xyz(f)]


# --------------------------------------------------------------- bond table

@dataclass
class BondTable:
    entries: dict[tuple[str, str], tuple[float, float]]
    valence: dict[str, frozenset[int]]

    def __post_init__(self):
        for k, (lo, hi) in self.entries.items():
            if not lo < hi:
                raise ValueError(f"bond window for {k} must have min < max")
        self.entries = {tuple(sorted(k)): v for k, v in self.entries.items()}

    def window(self, a: str, b: str):
        return self.entries.get(tuple(sorted((a, b))))

    def to_json(self) -> dict:
        return {"bonds": {f"{a}-{b}": list(v) for (a, b), v in sorted(self.entries.items())},
                "valence": {e: sorted(v) for e, v in sorted(self.valence.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "BondTable":
        entries = {tuple(k.split("-")): tuple(v) for k, v in d["bonds"].items()}
        return cls(entries, {e: frozenset(v) for e, v in d["valence"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BondTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def bond_table_from_templates(templates, window=(0.8, 1.2)) -> BondTable:
    """Bond windows for every bonded element pair; valence = observed bond counts."""
    entries, valence = {}, {}
    for t in templates:
        counts = [0] * len(t.atom_labels)
        for i, j in t.bonds:
            entries[tuple(sorted((t.atom_labels[i], t.atom_labels[j])))] = tuple(window)
            counts[i] += 1
            counts[j] += 1
        for lab, c in zip(t.atom_labels, counts):
            valence.setdefault(lab, set()).add(c)
    return BondTable(entries, {e: frozenset(v) for e, v in valence.items()})
