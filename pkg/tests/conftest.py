import numpy as np
import pytest

from retinaseg.dataio import LabelImage
from retinaseg.grid import GridPmf


def constant_labels(size, cls=0):
    return LabelImage(np.full((size, size), cls, dtype=np.int16),
                      np.zeros((size, size), dtype=bool))


def vsplit_labels(size, boundary_x, left=0, right=1):
    """Vertical two-class split: columns < boundary_x are `left`."""
    classes = np.full((size, size), right, dtype=np.int16)
    classes[:, :boundary_x] = left
    return LabelImage(classes, np.zeros((size, size), dtype=bool))


def one_hot_pmf(n_cells, n_classes, cls):
    pmfs = np.zeros((n_cells, n_classes))
    pmfs[:, cls] = 1.0
    return GridPmf(pmfs=pmfs, masked=np.zeros(n_cells, dtype=bool))


def random_pmf(n_cells, n_classes, rng, masked_frac=0.0):
    pmfs = rng.random((n_cells, n_classes)) + 1e-12
    pmfs /= pmfs.sum(axis=1, keepdims=True)
    masked = rng.random(n_cells) < masked_frac
    pmfs[masked] = 1.0 / n_classes
    return GridPmf(pmfs=pmfs, masked=masked)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
