import numpy as np
import pytest

from crossalign import autodiff as ad


@pytest.fixture
def f64():
    """Run a test in 64-bit verification mode."""
    with ad.precision(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_gradient(f, param, h=1e-4):
    """Central finite differences of scalar-valued f() w.r.t. every entry of param.

    Mutates param.data in place and restores it. Independent of the tape:
    f is re-evaluated forward-only for each perturbation.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad.reshape(param.data.shape)


def assert_grads_close(ad_grad, fd_grad, rel_tol=1e-5, abs_floor=1e-3, abs_tol=1e-7):
    """Relative comparison, falling back to absolute where the gradient is tiny."""
    ad_grad = np.asarray(ad_grad, dtype=np.float64)
    fd_grad = np.asarray(fd_grad, dtype=np.float64)
    scale = np.maximum(np.abs(fd_grad), np.abs(ad_grad))
    small = scale < abs_floor
    abs_err = np.abs(ad_grad - fd_grad)
    bad_small = small & (abs_err > abs_tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_err = np.where(scale > 0, abs_err / scale, 0.0)
    bad_large = ~small & (rel_err > rel_tol)
    assert not bad_small.any(), f"absolute error up to {abs_err[bad_small].max():.3g} on small gradients"
    assert not bad_large.any(), f"relative error up to {rel_err[bad_large].max():.3g}"
