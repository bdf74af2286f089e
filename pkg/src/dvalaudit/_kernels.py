"""Compiled inner loops for the valuation hot paths."""

import numba
import numpy as np


@numba.njit(cache=True)
def softmax_gd(zb, yidx, w, lr, l2, max_iter, tol):
    """Full-batch gradient descent on mean softmax cross-entropy + l2/2 ||W||^2.

    Updates ``w`` in place and returns the number of iterations run. The loop
    stops before stepping once the gradient norm drops below ``tol``.
    """
    n, p = zb.shape
    k_rows = w.shape[0]
    probs = np.empty(k_rows)
    grad = np.empty((k_rows, p))
    it = 0
    for it in range(1, max_iter + 1):
        grad[:] = 0.0
        if k_rows == 2:
            # two classes: the softmax is a sigmoid of the logit gap, one exp per row
            for i in range(n):
                gap = 0.0
                for j in range(p):
                    gap += (w[0, j] - w[1, j]) * zb[i, j]
                if gap >= 0.0:
                    e = np.exp(-gap)
                    p0 = 1.0 / (1.0 + e)
                else:
                    e = np.exp(gap)
                    p0 = e / (1.0 + e)
                c = p0 - 1.0 if yidx[i] == 0 else p0
                for j in range(p):
                    grad[0, j] += c * zb[i, j]
                    grad[1, j] -= c * zb[i, j]
        for i in range(n if k_rows != 2 else 0):
            top = -np.inf
            for k in range(k_rows):
                s = 0.0
                for j in range(p):
                    s += w[k, j] * zb[i, j]
                probs[k] = s
                if s > top:
                    top = s
            total = 0.0
            for k in range(k_rows):
                probs[k] = np.exp(probs[k] - top)
                total += probs[k]
            for k in range(k_rows):
                c = probs[k] / total
                if k == yidx[i]:
                    c -= 1.0
                for j in range(p):
                    grad[k, j] += c * zb[i, j]
        norm = 0.0
        for k in range(k_rows):
            for j in range(p):
                g = grad[k, j] / n + l2 * w[k, j]
                grad[k, j] = g
                norm += g * g
        if np.sqrt(norm) < tol:
            break
        for k in range(k_rows):
            for j in range(p):
                w[k, j] -= lr * grad[k, j]
    return it


@numba.njit(cache=True)
def sgd_pass(zb, yidx, order, w0, lr):
    """Apply one single-example softmax step per datum in ``order``.

    Returns the weight snapshots before the pass and after each step,
    shape ``(len(order) + 1, K, p)``.
    """
    k_rows, p = w0.shape
    steps = order.shape[0]
    snaps = np.empty((steps + 1, k_rows, p))
    w = w0.copy()
    snaps[0] = w
    probs = np.empty(k_rows)
    for t in range(steps):
        i = order[t]
        top = -np.inf
        for k in range(k_rows):
            s = 0.0
            for j in range(p):
                s += w[k, j] * zb[i, j]
            probs[k] = s
            if s > top:
                top = s
        total = 0.0
        for k in range(k_rows):
            probs[k] = np.exp(probs[k] - top)
            total += probs[k]
        for k in range(k_rows):
            c = probs[k] / total
            if k == yidx[i]:
                c -= 1.0
            for j in range(p):
                w[k, j] -= lr * c * zb[i, j]
        snaps[t + 1] = w
    return snaps
