import numpy as np
import pytest

from evclplus.data import Dataset, write_idx
from evclplus.numerics import SeededRng


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """Real handwritten-digit data (sklearn's bundled 8x8 set) as IDX files.

    Stands in for MNIST-format data in pipeline tests: same loader, same
    task constructions, just smaller images.
    """
    sklearn_datasets = pytest.importorskip("sklearn.datasets")
    bunch = sklearn_datasets.load_digits()
    x = bunch.data / 16.0
    y = bunch.target.astype(np.int64)
    order = SeededRng(1234).permutation(len(y))
    x, y = x[order], y[order]
    n_train = 1200
    root = tmp_path_factory.mktemp("digits")
    paths = {}
    for name, (xs, ys) in (("train", (x[:n_train], y[:n_train])),
                           ("test", (x[n_train:], y[n_train:]))):
        ds = Dataset(xs, ys, 10)
        img = root / f"{name}-images-idx3-ubyte"
        lbl = root / f"{name}-labels-idx1-ubyte"
        write_idx(ds, img, lbl, rows=8, cols=8)
        paths[name] = (str(img), str(lbl))
    return paths
