"""Forward and backward primitives for the segmentation network.

All tensors are channels-last: activations (N, H, W, C), conv weights
(kh, kw, Cin, Cout). Convolutions are stride-1 with same-padding, realized
as kh*kw shifted matmuls so block input/output sizes match without the
memory cost of a full im2col buffer.
"""

from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x
    y = np.zeros((n * h * wd, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + h, j : j + wd, :].reshape(-1, cin)
            y += xs @ w[i, j]
    y += b
    return y.reshape(n, h, wd, cout), (xp, x.shape)


def conv2d_backward(dy: np.ndarray, w: np.ndarray, cache):
    xp, xshape = cache
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = xshape
    ph, pw = kh // 2, kw // 2
    dyf = dy.reshape(-1, cout)
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + h, j : j + wd, :].reshape(-1, cin)
            dw[i, j] = xs.T @ dyf
            dxp[:, i : i + h, j : j + wd, :] += (dyf @ w[i, j].T).reshape(n, h, wd, cin)
    db = dyf.sum(axis=0)
    dx = dxp[:, ph : ph + h, pw : pw + wd, :] if (ph or pw) else dxp
    return dx, dw, db


def bn_forward_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    axes = (0, 1, 2)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = gamma * xhat + beta
    m = x.shape[0] * x.shape[1] * x.shape[2]
    return y, (xhat, inv, gamma, m), mu, var


def bn_forward_infer(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
    running_mean: np.ndarray, running_var: np.ndarray, eps: float,
) -> np.ndarray:
    inv = 1.0 / np.sqrt(running_var + eps)
    return (gamma * inv).astype(x.dtype) * x + (beta - gamma * running_mean * inv).astype(x.dtype)


def bn_backward(dy: np.ndarray, cache):
    xhat, inv, gamma, m = cache
    axes = (0, 1, 2)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def elu_forward(x: np.ndarray, alpha: float):
    y = np.where(x > 0, x, alpha * np.expm1(x))
    return y.astype(x.dtype, copy=False), y


def elu_backward(dy: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    # for x <= 0: d/dx = alpha*exp(x) = y + alpha (y stores the forward output)
    return dy * np.where(y > 0, np.asarray(1.0, dtype=dy.dtype), y + alpha)


def maxpool2_forward(x: np.ndarray):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    xr = x.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(dy: np.ndarray, cache):
    idx, xshape = cache
    n, h, w, c = xshape
    ho, wo = h // 2, w // 2
    g = np.zeros((n, ho, wo, c, 4), dtype=dy.dtype)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    return g.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)


def upconv2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """2x2 stride-2 transposed convolution (no output overlap)."""
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xf = x.reshape(-1, cin)
    y = np.empty((n, 2 * h, 2 * wd, cout), dtype=x.dtype)
    for a in range(2):
        for c in range(2):
            y[:, a::2, c::2, :] = (xf @ w[a, c]).reshape(n, h, wd, cout)
    y += b
    return y, (x,)


def upconv2_backward(dy: np.ndarray, w: np.ndarray, cache):
    (x,) = cache
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xf = x.reshape(-1, cin)
    dw = np.empty_like(w)
    dxf = np.zeros((n * h * wd, cin), dtype=dy.dtype)
    for a in range(2):
        for c in range(2):
            dyac = dy[:, a::2, c::2, :].reshape(-1, cout)
            dw[a, c] = xf.T @ dyac
            dxf += dyac @ w[a, c].T
    db = dy.sum(axis=(0, 1, 2))
    return dxf.reshape(x.shape), dw, db


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


LOG_CLAMP = 1e-12


def xent_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Soft-target cross-entropy, averaged over pixels (summed over channels)."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    npix = int(np.prod(pred.shape[:-1]))
    return float(-(target * np.log(np.maximum(pred, LOG_CLAMP))).sum() / npix)


def xent_softmax_grad(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the pixel-mean cross-entropy w.r.t. pre-softmax logits."""
    npix = int(np.prod(probs.shape[:-1]))
    return ((probs - target) / npix).astype(probs.dtype, copy=False)
