"""Shared test utilities: the central finite-difference gradient oracle.

The oracle evaluates the forward function only; it never touches the tape or
the analytic backward rules it is checking.
"""

import numpy as np

from lord.autograd import Graph, Tensor, backward, zero_grad


def numeric_gradient(fn, arrays, index, h=1e-5):
    """Central-difference d(fn)/d(arrays[index]), elementwise."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[index][idx] += h
        minus[index][idx] -= h
        grad[idx] = (fn(*plus) - fn(*minus)) / (2.0 * h)
    return grad


def analytic_gradients(build, arrays):
    """Run build(*tensors) under a fresh graph and return each input's grad."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    graph = Graph()
    with graph:
        loss = build(*tensors)
    zero_grad(tensors)
    backward(loss, graph)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(build, arrays, rtol=1e-5, h=1e-5):
    """Compare analytic and numeric gradients for every input array."""
    analytic = analytic_gradients(build, arrays)

    def scalar_fn(i):
        def fn(*vals):
            tensors = [Tensor(v) for v in vals]
            tensors[i] = Tensor(vals[i], requires_grad=True)
            graph = Graph()
            with graph:
                out = build(*tensors)
            return float(out.data)

        return fn

    for i in range(len(arrays)):
        numeric = numeric_gradient(scalar_fn(i), arrays, i, h=h)
        denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic[i])), 1e-6)
        rel = np.abs(analytic[i] - numeric) / denom
        assert rel.max() <= rtol, f"input {i}: rel err {rel.max():.3g} > {rtol}"
