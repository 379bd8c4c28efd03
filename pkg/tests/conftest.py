import numpy as np
import pytest

from minutecast.autodiff import Tensor, backward, zero_grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_grad(loss_fn, tensor, h=1e-5):
    """Central-difference gradient of a scalar loss wrt one tensor's entries.

    ``loss_fn`` rebuilds the forward pass from scratch and returns a float;
    it must read ``tensor.data`` in place. This keeps the oracle independent
    of the backward implementation it checks.
    """
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        saved = tensor.data[i]
        tensor.data[i] = saved + h
        f_plus = loss_fn()
        tensor.data[i] = saved - h
        f_minus = loss_fn()
        tensor.data[i] = saved
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((diff / scale).max())


def check_gradients(build_loss, params, tol=1e-4, h=1e-5):
    """Assert analytic gradients of ``build_loss()`` match finite differences.

    ``build_loss`` returns a scalar Tensor built from the given parameter
    tensors. Returns the worst relative error seen.
    """
    zero_grads(params)
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        fd = finite_difference_grad(lambda: build_loss().item(), p, h=h)
        worst = max(worst, max_rel_error(p.grad, fd))
    assert worst < tol, f"max relative error {worst:.3e} >= {tol}"
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)
