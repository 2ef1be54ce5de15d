"""Small shared builders for tests."""
import numpy as np

from canondiff.data import default_templates, element_vocab, gen_synthetic, one_hot
from canondiff.diffusion import PaddedData
from canondiff.groups import PointCloud


def generic_cloud(rng, n=6, dim=3, n_types=3):
    x = rng.standard_normal((n, dim)) * np.linspace(1.5, 0.7, dim)
    labels = tuple("CNO"[i % n_types] for i in range(n))
    return PointCloud(x - x.mean(0), one_hot(labels, ("C", "N", "O")), labels)


def batch_of(clouds, elements=("C", "N", "O")) -> PaddedData:
    from canondiff.data import pad
    return pad(clouds, elements)


def synthetic(count=64, seed=0):
    ts = default_templates()
    return ts, gen_synthetic(ts, count, np.random.default_rng(seed), seed)


def vocab():
    return element_vocab(default_templates())
