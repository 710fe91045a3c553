import numpy as np
import pytest

from prusc.autodiff import Tensor, backward

FD_STEP = 1e-5
# denominators below this are treated as this (gradients near zero compare absolutely)
REL_FLOOR = 1e-4


def numeric_grad(f, arrays, i, h=FD_STEP):
    """Central differences of scalar f(*arrays) w.r.t. arrays[i]."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    x = base[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        k = it.multi_index
        old = x[k]
        x[k] = old + h
        up = f(*[Tensor(a) for a in base]).item()
        x[k] = old - h
        dn = f(*[Tensor(a) for a in base]).item()
        x[k] = old
        g[k] = (up - dn) / (2 * h)
    return g


def analytic_grads(f, arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(f(*ts))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def max_rel_err(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)).max(initial=0.0))


def gradcheck(f, arrays):
    """Worst relative error between analytic and central-difference gradients."""
    grads = analytic_grads(f, arrays)
    return max(max_rel_err(g, numeric_grad(f, arrays, i)) for i, g in enumerate(grads))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
