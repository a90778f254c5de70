"""Shared oracles for the test suite.

The finite-difference gradient here is deliberately independent of the
autodiff tape: it re-evaluates the forward closure with perturbed raw
buffers and never inspects analytic adjoints.
"""

import numpy as np

from gs4d import no_grad


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each array.

    ``f`` must recompute its value from the current contents of ``arrays``;
    entries are perturbed in place and restored.
    """
    grads = []
    with no_grad():
        for x in arrays:
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            gf = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                gf[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-2):
    """Max elementwise relative error, degrading to absolute below ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_grads(build_loss, params, h=1e-5, tol=1e-4):
    """Compare tape gradients of ``build_loss()`` against finite differences.

    ``params`` are requires_grad tensors whose ``.data`` buffers feed the
    closure. Returns the worst relative error over all parameters.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = finite_difference(lambda: build_loss().item(), [p.data for p in params], h=h)
    worst = max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel error {worst:.3e} >= {tol:g}"
    return worst
