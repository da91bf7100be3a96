import numpy as np
import pytest

from s3dm.tensor import Tape


def finite_difference_gradients(func, tensors, h=1e-5):
    """Central-difference gradients of a scalar-valued forward function.

    The oracle re-evaluates only the forward pass, so it stays independent
    of the tape it checks.
    """
    grads = []
    for t in tensors:
        num = np.zeros_like(t.data)
        flat = t.data.ravel()
        nf = num.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = func().item()
            flat[i] = old - h
            down = func().item()
            flat[i] = old
            nf[i] = (up - down) / (2.0 * h)
        grads.append(num)
    return grads


def check_gradients(func, tensors, rel_tol=1e-5, h=1e-5):
    """Assert tape gradients match finite differences within rel_tol."""
    with Tape() as tape:
        loss = func()
    analytic = tape.gradients(loss, tensors)
    numeric = finite_difference_gradients(func, tensors, h)
    for t, num in zip(tensors, numeric):
        scale = max(np.abs(num).max(), 1e-6)
        err = np.abs(analytic[t] - num).max() / scale
        assert err <= rel_tol, f"gradient mismatch {err:.2e} for {t.name or t.shape}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
