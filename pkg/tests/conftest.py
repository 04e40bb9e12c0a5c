import numpy as np
import pytest

from remind.data import DatasetManifest, generate_synthetic, load_recordings
from remind.frontend import ElectrodeLayout


def random_spd(rng, C, spread=1.0):
    """SPD matrix with log-eigenvalues drawn from N(0, spread^2)."""
    Q, _ = np.linalg.qr(rng.standard_normal((C, C)))
    lam = np.exp(spread * rng.standard_normal(C))
    return (Q * lam) @ Q.T


def random_sym(rng, C):
    A = rng.standard_normal((C, C))
    return 0.5 * (A + A.T)


def random_orthogonal(rng, C):
    Q, R = np.linalg.qr(rng.standard_normal((C, C)))
    return Q * np.sign(np.diag(R))


def numpy_logm(P):
    w, V = np.linalg.eigh(P)
    return (V * np.log(w)) @ V.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four subjects per class, 4 channels, 128 samples, 4 recordings each."""
    root = tmp_path_factory.mktemp("small")
    manifest = generate_synthetic(root, seed=3, subjects_per_class=4, n_channels=4, n_samples=128,
                                  n_recordings=4, delta=0.4)
    layout = ElectrodeLayout.read_csv(root / "layout.csv")
    return manifest, layout, load_recordings(DatasetManifest.load(root))
