"""Central finite-difference gradient oracle (independent of the tape)."""

import numpy as np

from magic.engine import Tape, Tensor


def numeric_grad(fn, arrays, wrt, step=1e-5):
    """d fn / d arrays[wrt] by central differences, elementwise."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(*base)
        flat[i] = orig - step
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def tape_grads(build_loss, arrays):
    """Analytic grads of a scalar built by build_loss(*tensors) for each input."""
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        loss = build_loss(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors]


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_op(build_loss, arrays, step=1e-5, tol=1e-4):
    """Assert analytic vs numeric gradients agree for every input."""
    analytic = tape_grads(build_loss, arrays)

    def value(*arrs):
        tensors = [Tensor(a, dtype=np.float64) for a in arrs]
        return float(build_loss(*tensors).data)

    for i in range(len(arrays)):
        numeric = numeric_grad(value, list(arrays), i, step=step)
        err = rel_err(analytic[i], numeric)
        assert err < tol, f"gradient mismatch on input {i}: rel err {err:.3e}"
