"""Pure numpy implementation of the hot kernels.

Every function here has a compiled twin in ``_compiled.pyx`` with the
same name and contract. Inputs are C-contiguous float64 arrays (int64
for index vectors); outputs are freshly allocated.

Row convention: feature matrices are [rows, features]; a linear layer
maps [k, n] @ [n, m] + [m] -> [k, m], each row an independent sample.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_vjp(x, w, gy):
    """Vector-Jacobian products of y = x @ w + b.

    Returns (gx, gw, gb).
    """
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0)
    return gx, gw, gb


def linear_lrp_eps(x, w, b, r_out, eps, signed):
    """Redistribute relevance through y = x @ w + b, epsilon-stabilized.

    Default (signed=False) keeps only positive contributions: with
    z_ij = x_i * w_ij per row,

        r_in_i = sum_j z+_ij / (sum_i' z+_i'j + b+_j + eps) * r_out_j

    and the bias share b+_j/(...) * r_out_j is returned separately as a
    sink total. signed=True is the conventional variant over raw z with
    a sign-matched stabilizer.

    Returns (r_in, sink).
    """
    k, n = x.shape
    m = w.shape[1]
    z = x[:, :, None] * w[None, :, :]  # [k, n, m]
    if signed:
        zc = z
        bc = b
        den = zc.sum(axis=1) + bc[None, :]  # [k, m]
        den = den + eps * np.where(den >= 0.0, 1.0, -1.0)
    else:
        zc = np.maximum(z, 0.0)
        bc = np.maximum(b, 0.0)
        den = zc.sum(axis=1) + bc[None, :] + eps
    coef = r_out / den  # [k, m]
    r_in = np.einsum("knm,km->kn", zc, coef)
    sink = float((bc[None, :] * coef).sum())
    return r_in, sink


def linear_lrp_ab(x, w, b, r_out, alpha, beta):
    """Alpha/beta split of relevance through y = x @ w + b.

    Positive and negative contributions are redistributed separately;
    zero denominators contribute nothing. Returns (r_in, sink).
    """
    z = x[:, :, None] * w[None, :, :]  # [k, n, m]
    zp = np.maximum(z, 0.0)
    zn = np.minimum(z, 0.0)
    bp = np.maximum(b, 0.0)
    bn = np.minimum(b, 0.0)
    den_p = zp.sum(axis=1) + bp[None, :]
    den_n = zn.sum(axis=1) + bn[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        coef_p = np.where(den_p != 0.0, r_out / den_p, 0.0)
        coef_n = np.where(den_n != 0.0, r_out / den_n, 0.0)
    r_in = alpha * np.einsum("knm,km->kn", zp, coef_p) + beta * np.einsum(
        "knm,km->kn", zn, coef_n
    )
    sink = float(alpha * (bp[None, :] * coef_p).sum() + beta * (bn[None, :] * coef_n).sum())
    return r_in, sink


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_vjp(x, gy, guided):
    """Mask by active inputs; guided mode additionally clips negative
    upstream gradients to zero."""
    gx = np.where(x > 0.0, gy, 0.0)
    if guided:
        gx = np.maximum(gx, 0.0)
    return gx


def segment_sum(x, ids, n_seg):
    out = np.zeros((n_seg, x.shape[1]), dtype=np.float64)
    np.add.at(out, ids, x)
    return out


def segment_counts(ids, n_seg):
    return np.bincount(ids, minlength=n_seg).astype(np.int64)


def segment_mean(x, ids, n_seg):
    out = segment_sum(x, ids, n_seg)
    counts = segment_counts(ids, n_seg)
    nz = counts > 0
    out[nz] /= counts[nz, None]
    return out


def segment_max(x, ids, n_seg):
    """Per-segment column max. Empty segments yield zero rows.

    Returns (out, argmax) where argmax[s, c] is the input row index of
    the winner (ties: lowest row index) or -1 for empty segments.
    """
    k, d = x.shape
    out = np.zeros((n_seg, d), dtype=np.float64)
    argmax = np.full((n_seg, d), -1, dtype=np.int64)
    for i in range(k):
        s = ids[i]
        row = x[i]
        if argmax[s, 0] == -1:
            out[s] = row
            argmax[s] = i
        else:
            better = row > out[s]
            out[s, better] = row[better]
            argmax[s, better] = i
    return out, argmax


def segment_broadcast(gy, ids):
    """Backward of segment_sum: copy each segment's adjoint to members."""
    return gy[ids]


def segment_broadcast_mean(gy, ids, counts):
    return gy[ids] / counts[ids, None]


def segment_max_route(gy, ids, argmax, k):
    """Backward of segment_max: route each output entry to its winner."""
    gx = np.zeros((k, gy.shape[1]), dtype=np.float64)
    n_seg, d = gy.shape
    for s in range(n_seg):
        for c in range(d):
            i = argmax[s, c]
            if i >= 0:
                gx[i, c] += gy[s, c]
    return gx


def segment_prop_lrp(x, ids, n_seg, r_out, eps):
    """Proportional relevance split for sum/mean pooling.

    Per segment and feature column: r_i = v_i / (sum_j v_j + eps
    sign-matched to the sum) * R.
    """
    totals = segment_sum(x, ids, n_seg)
    den = totals + eps * np.where(totals >= 0.0, 1.0, -1.0)
    coef = r_out / den
    return x * coef[ids]


def scatter_add_rows(gy, idx, n_rows):
    """Backward of row gather: accumulate adjoints into source rows."""
    gx = np.zeros((n_rows, gy.shape[1]), dtype=np.float64)
    np.add.at(gx, idx, gy)
    return gx


def proportional_pair(a, b, r, eps):
    """Split relevance of an elementwise sum between its two addends."""
    tot = a + b
    den = tot + eps * np.where(tot >= 0.0, 1.0, -1.0)
    coef = r / den
    return a * coef, b * coef
