"""Shared test oracles: finite differences and brute-force forward loops.

Everything here is deliberately independent of the library's vectorized
implementations (nested loops, closed forms) so tests compare two routes.
"""

import numpy as np

from isofed import autodiff as ad

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


def numeric_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar-valued ``f()`` w.r.t. array ``x``.

    ``f`` must recompute the forward pass reading the current contents of
    ``x`` (tensors wrap the arrays without copying).
    """
    g = np.zeros_like(x)
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(x.size):
        old = xf[i]
        xf[i] = old + eps
        fp = f()
        xf[i] = old - eps
        fm = f()
        xf[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def assert_grad_close(analytic, numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL):
    analytic = np.zeros_like(numeric) if analytic is None else analytic
    err = np.abs(analytic - numeric)
    allowed = np.maximum(rtol * np.abs(numeric), atol)
    assert (err <= allowed).all(), (
        f"gradient mismatch: max err {err.max():.3e}, allowed {allowed[err.argmax()]:.3e}"
    )


def check_op_grads(build, arrays, eps=1e-5):
    """Compare autodiff grads of ``loss = build(arrays)`` against finite differences.

    ``build`` maps the list of numpy arrays to a scalar Tensor, creating one
    requires_grad Tensor per array (wrapping, not copying). Returns the max
    absolute deviation seen (for reporting).
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(tensors)
    ad.backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numeric_grad(lambda: build([ad.Tensor(x) for x in arrays]).item(), a, eps=eps)
        assert_grad_close(t.grad, num)
        got = np.zeros_like(num) if t.grad is None else t.grad
        worst = max(worst, float(np.abs(got - num).max()))
    return worst


# -- brute-force forward oracles ----------------------------------------------


def conv2d_loops(x, w, b):
    """Direct nested-loop valid cross-correlation."""
    n, c, h, ww = x.shape
    f, _, kh, kw = w.shape
    oh, ow = h - kh + 1, ww - kw + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += x[ni, ci, oi + ki, oj + kj] * w[fi, ci, ki, kj]
                    out[ni, fi, oi, oj] = acc + b[fi]
    return out


def maxpool2x2_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for oi in range(h // 2):
                for oj in range(w // 2):
                    out[ni, ci, oi, oj] = max(
                        x[ni, ci, 2 * oi, 2 * oj],
                        x[ni, ci, 2 * oi, 2 * oj + 1],
                        x[ni, ci, 2 * oi + 1, 2 * oj],
                        x[ni, ci, 2 * oi + 1, 2 * oj + 1],
                    )
    return out


def matmul_loops(a, b):
    n, d = a.shape
    d2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for k in range(d):
                out[i, j] += a[i, k] * b[k, j]
    return out


def auc_pairs(scores, positives):
    """O(P*N) pairwise rank AUC with 0.5 tie credit."""
    pos = scores[positives]
    neg = scores[~positives]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))
