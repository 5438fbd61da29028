import numpy as np
import pytest

import mpo


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(spec, size, seed):
    r = np.random.default_rng(seed)
    return mpo.Batch(r.random((size,) + spec.input_shape),
                     r.integers(0, spec.num_classes, size))


def fd_gradient(fn, x, h=1e-5):
    """Central finite differences of a scalar function over a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        out[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-5, atol=1e-7):
    """Componentwise agreement: relative error within rtol wherever the
    magnitudes rise above the finite-difference noise floor, absolute
    agreement within atol below it."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = (err > atol) & (err > rtol * scale)
    assert not bad.any(), (
        f"{bad.sum()} gradient components disagree; worst rel "
        f"{(err / np.maximum(scale, 1e-300))[bad].max():.3e}")
