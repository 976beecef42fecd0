import numpy as np
import pytest

from mmstn.model import make_synthetic_model


@pytest.fixture(scope="session")
def small_model():
    return make_synthetic_model(seed=3, grid_height=16, grid_width=16, num_modes=4)


@pytest.fixture(scope="session")
def model():
    return make_synthetic_model()


@pytest.fixture(scope="session")
def nose_model():
    return make_synthetic_model(nose=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_difference(fn, x, h=1e-5):
    """Gradient of scalar fn by central differences with relative step h."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(x.shape)


def max_rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))
