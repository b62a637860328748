"""Compiled inner loops (coordinate descent, B-spline evaluation)."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _block_update(UT, lo, hi, r, alpha, thresh):
    """Soft-threshold block ``lo:hi`` against residual ``r`` (both updated in place).

    Returns ``(squared change, shrinkage)``.
    """
    k = hi - lo
    n = r.size
    c = np.empty(k)
    nf = 0.0
    for i in range(k):
        acc = 0.0
        row = UT[lo + i]
        for t in range(n):
            acc += row[t] * r[t]
        c[i] = acc + alpha[lo + i]
        nf += c[i] * c[i]
    nf = np.sqrt(nf)
    s = 0.0
    if nf > 0.0:
        s = 1.0 - thresh / nf
        if s < 0.0:
            s = 0.0
    moved = 0.0
    for i in range(k):
        d = s * c[i] - alpha[lo + i]
        if d != 0.0:
            row = UT[lo + i]
            for t in range(n):
                r[t] -= d * row[t]
            alpha[lo + i] += d
            moved += d * d
    return moved, s


@njit(cache=True)
def _objective(r, alpha, offs, lam, n):
    pen = 0.0
    for b in range(offs.size - 1):
        sq = 0.0
        for i in range(offs[b], offs[b + 1]):
            sq += alpha[i] * alpha[i]
        pen += np.sqrt(sq)
    return (r @ r) / n + 2.0 * lam * pen / np.sqrt(n)


@njit(cache=True)
def block_coordinate_descent(UT, offs, y, alpha, lam, tol, max_sweeps, trace):
    """Group soft-thresholding coordinate descent on orthonormal blocks.

    ``UT`` stacks the transposed orthonormal bases of all blocks (rows
    ``offs[b]:offs[b+1]`` belong to block ``b``) and ``alpha`` holds the
    block coefficients (updated in place).  A full sweep is followed by
    sweeps over the nonzero blocks until their relative change drops below
    ``tol``, then a full sweep confirms.  Returns ``(shrink, sweeps,
    converged, objective_trace)``; the trace is empty unless ``trace``.
    """
    n = y.size
    K = offs.size - 1
    r = y - UT.T @ alpha
    shrink = np.zeros(K)
    for b in range(K):
        for i in range(offs[b], offs[b + 1]):
            if alpha[i] != 0.0:
                shrink[b] = 1.0
    thresh = lam * np.sqrt(n)
    hist = np.empty(max_sweeps + 1 if trace else 0)
    if trace:
        hist[0] = _objective(r, alpha, offs, lam, n)
    sweeps = 0
    converged = K == 0
    full = True
    while not converged and sweeps < max_sweeps:
        moved = 0.0
        for b in range(K):
            if full or shrink[b] > 0.0:
                m, s = _block_update(UT, offs[b], offs[b + 1], r, alpha, thresh)
                moved += m
                shrink[b] = s
        sweeps += 1
        if trace:
            hist[sweeps] = _objective(r, alpha, offs, lam, n)
        size = alpha @ alpha
        if moved == 0.0:
            rel = 0.0
        elif size > 0.0:
            rel = np.sqrt(moved / size)
        else:
            rel = np.inf
        if rel < tol:
            if full:
                converged = True
            full = True
        else:
            full = False
    return shrink, sweeps, converged, hist[:sweeps + 1] if trace else hist


@njit(cache=True)
def lasso_covariance_cd(C, xy, b, lam, tol, max_iter):
    """Cyclic coordinate descent for ``b^T C b / 2 - xy^T b + lam ||b||_1``.

    ``b`` is updated in place.  After each full sweep the nonzero
    coordinates are cycled until their largest change is below ``tol``;
    stops when a full sweep changes nothing by more than ``tol``.
    Returns the number of full sweeps.
    """
    m = b.size
    Cb = C @ b
    for it in range(max_iter):
        for phase in range(2):
            # phase 0: one full sweep; phase 1: nonzero coordinates to convergence
            for inner in range(max_iter if phase == 1 else 1):
                biggest = 0.0
                for k in range(m):
                    if C[k, k] == 0.0 or (phase == 1 and b[k] == 0.0):
                        continue
                    old = b[k]
                    rho = xy[k] - Cb[k] + C[k, k] * old
                    mag = abs(rho) - lam
                    new = 0.0
                    if mag > 0.0:
                        new = (mag if rho > 0 else -mag) / C[k, k]
                    d = new - old
                    if d != 0.0:
                        for t in range(m):
                            Cb[t] += C[t, k] * d
                        b[k] = new
                        if abs(d) > biggest:
                            biggest = abs(d)
                if phase == 0:
                    full_change = biggest
                if biggest < tol:
                    break
            if phase == 0 and full_change < tol:
                return it + 1
    return max_iter


@njit(cache=True)
def bspline_matrix(x, t, k, lo_span, hi_span):
    """Dense ``(len(x), len(t) - k - 1)`` matrix of degree-``k`` B-splines (triangular scheme).

    Spans are clipped to ``[lo_span, hi_span]``, which must index
    non-degenerate knot intervals.
    """
    nbasis = t.size - k - 1
    out = np.zeros((x.size, nbasis))
    N = np.empty(k + 1)
    left = np.empty(k + 1)
    right = np.empty(k + 1)
    for i in range(x.size):
        xi = x[i]
        # largest span with t[span] <= xi
        a, b = lo_span, hi_span
        while a < b:
            mid = (a + b + 1) // 2
            if t[mid] <= xi:
                a = mid
            else:
                b = mid - 1
        span = a
        N[0] = 1.0
        for j in range(1, k + 1):
            left[j] = xi - t[span + 1 - j]
            right[j] = t[span + j] - xi
            saved = 0.0
            for r in range(j):
                temp = N[r] / (right[r + 1] + left[j - r])
                N[r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            N[j] = saved
        for j in range(k + 1):
            out[i, span - k + j] = N[j]
    return out
