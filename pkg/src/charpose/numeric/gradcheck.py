import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def grad_check(function, point, eps=1e-5):
    """Max relative error between tape gradients and central differences.

    ``function`` maps a list of :class:`Tensor` (one per array in ``point``)
    to a scalar :class:`Tensor`. ``point`` is an array or a list of arrays.
    """
    arrays = [point] if isinstance(point, np.ndarray) else list(point)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = function(tensors)
    analytic = tape.gradients(out, tensors)

    worst = 0.0
    for k, a in enumerate(arrays):
        def f_k(v, k=k):
            args = [Tensor(arr) for arr in arrays]
            args[k] = Tensor(v)
            return function(args).data

        numeric = numeric_gradient(f_k, a, eps)
        worst = max(worst, relative_error(analytic[k], numeric))
    return worst
