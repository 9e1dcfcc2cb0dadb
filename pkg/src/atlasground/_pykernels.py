"""Pure numpy fallback for the compiled kernels; same signatures and results."""

import numpy as np


def sod_batch(pred, points, n_organs, gamma_p, gamma_o):
    pred = np.asarray(pred, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n_organs = np.asarray(n_organs)
    B, M, N, _ = points.shape
    diff = pred[:, None, None, :] - points  # (B, M, N, 3)
    dist = np.sqrt(np.einsum("bmnk,bmnk->bmn", diff, diff))
    e = np.exp(-(dist - dist.min(axis=2, keepdims=True)) / gamma_p)
    w = e / e.sum(axis=2, keepdims=True)
    organ = (dist * w).sum(axis=2)  # (B, M)
    coef = w * (1.0 - (dist - organ[..., None]) / gamma_p)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(dist > 0, coef / dist, 0.0)
    gorg = np.einsum("bmn,bmnk->bmk", coef, diff)

    valid = np.arange(M)[None, :] < n_organs[:, None]
    masked = np.where(valid, organ, np.inf)
    ev = np.where(valid, np.exp(-(masked - masked.min(axis=1, keepdims=True)) / gamma_o), 0.0)
    v = ev / ev.sum(axis=1, keepdims=True)
    organ = np.where(valid, organ, 0.0)
    loss = (organ * v).sum(axis=1)
    vcoef = v * (1.0 - (organ - loss[:, None]) / gamma_o)
    grad = np.einsum("bm,bmk->bk", vcoef, gorg)
    return loss, grad, organ
