"""Numpy implementations of the hot kernels.

These are the fallback used when the compiled extension is unavailable.
Convolutions are causal: the input is logically left-padded with k-1 zeros,
so output[t] depends only on input[..t] and the output keeps the input
length.  Forward/backward are expressed as one BLAS matmul over an im2col
panel; the panel is chunked along time so long inputs never materialize
gigabyte-sized intermediates.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Cap on the size of a single im2col panel.
_PANEL_BYTES = 32 * 2**20

NAME = "reference"


def _chunk_len(cin: int, k: int) -> int:
    cols = max(1, _PANEL_BYTES // (8 * cin * k))
    return int(cols)


def _panel(xpad: np.ndarray, k: int, t0: int, t1: int) -> np.ndarray:
    # xpad is (cin, L+k-1); columns t0..t1 of the output need xpad[:, t0:t1+k-1]
    win = sliding_window_view(xpad[:, t0 : t1 + k - 1], k, axis=1)  # (cin, t1-t0, k)
    return win.transpose(0, 2, 1).reshape(xpad.shape[0] * k, t1 - t0)


def conv1d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    cout, cin, k = w.shape
    length = x.shape[1]
    xpad = np.zeros((cin, length + k - 1), dtype=np.float64)
    xpad[:, k - 1 :] = x
    w2d = w.reshape(cout, cin * k)
    y = np.empty((cout, length), dtype=np.float64)
    step = _chunk_len(cin, k)
    for t0 in range(0, length, step):
        t1 = min(t0 + step, length)
        np.dot(w2d, _panel(xpad, k, t0, t1), out=y[:, t0:t1])
    y += b[:, None]
    return y


def conv1d_bwd(x, w, gy):
    """Gradients of sum(gy * conv1d_fwd(x, w, b)) w.r.t. x, w, b."""
    cout, cin, k = w.shape
    length = x.shape[1]
    xpad = np.zeros((cin, length + k - 1), dtype=np.float64)
    xpad[:, k - 1 :] = x
    w2d = w.reshape(cout, cin * k)

    gb = gy.sum(axis=1)
    gw2d = np.zeros((cout, cin * k), dtype=np.float64)
    gxpad = np.zeros((cin, length + k - 1), dtype=np.float64)
    step = _chunk_len(cin, k)
    for t0 in range(0, length, step):
        t1 = min(t0 + step, length)
        panel = _panel(xpad, k, t0, t1)
        g = gy[:, t0:t1]
        gw2d += g @ panel.T
        gcols = (w2d.T @ g).reshape(cin, k, t1 - t0)
        for j in range(k):
            gxpad[:, t0 + j : t1 + j] += gcols[:, j, :]
    return gxpad[:, k - 1 :], gw2d.reshape(cout, cin, k), gb


def conv1d_last_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Final output column of the causal convolution, computed directly."""
    cout, cin, k = w.shape
    length = x.shape[1]
    patch = np.zeros((cin, k), dtype=np.float64)
    n = min(k, length)
    patch[:, k - n :] = x[:, length - n :]
    return w.reshape(cout, cin * k) @ patch.ravel() + b


def conv1d_last_bwd(x, w, g):
    cout, cin, k = w.shape
    length = x.shape[1]
    n = min(k, length)
    patch = np.zeros((cin, k), dtype=np.float64)
    patch[:, k - n :] = x[:, length - n :]

    gw = np.outer(g, patch.ravel()).reshape(cout, cin, k)
    gpatch = np.einsum("o,oij->ij", g, w)
    gx = np.zeros_like(x)
    gx[:, length - n :] = gpatch[:, k - n :]
    return gx, gw, g.copy()


def sgd_update(theta, grad, vel, lr, momentum, weight_decay):
    """In-place classic-momentum step: v = m*v + g + wd*theta; theta -= lr*v."""
    vel *= momentum
    vel += grad
    if weight_decay != 0.0:
        vel += weight_decay * theta
    theta -= lr * vel
