import numpy as np
import pytest

from capslab.digits import generate_digit_set


def central_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f() w.r.t. array x.

    Perturbs x in place; f must close over x. Independent of any analytic
    backward code.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric, floor=1e-8):
    """Max |a - n| normalized by the gradient scale (robust near zero)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


@pytest.fixture(scope="session")
def digit_cache(tmp_path_factory):
    """Small shared digit sets, generated once per session."""
    return {
        "train1k": generate_digit_set(1000, seed=11),
        "test200": generate_digit_set(200, seed=12),
    }
