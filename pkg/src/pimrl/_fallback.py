"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Same signatures and semantics; used when the extension is not built or when
``PIMRL_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, kh, kw, periodic):
    if not periodic:
        return x
    ph, pw = kh // 2, kw // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)), mode="wrap")


def _windows(x, kh, kw, stride, periodic):
    # (Ci, Ho, Wo, kh, kw) view over the (padded) input
    xp = _pad(x, kh, kw, periodic)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, w, stride=1, periodic=True):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, periodic)
    return np.ascontiguousarray(np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])))


def conv2d_backward_weight(gy, x, kh, kw, stride=1, periodic=True):
    win = _windows(x, kh, kw, stride, periodic)
    return np.ascontiguousarray(np.tensordot(gy, win, axes=([1, 2], [1, 2])))


def conv2d_backward_input(gy, w, H, W, stride=1, periodic=True):
    Ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    Ho, Wo = gy.shape[1], gy.shape[2]
    ph, pw = (kh // 2, kw // 2) if periodic else (0, 0)
    gxp = np.zeros((Ci, H + 2 * ph, W + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w[:, :, i, j], gy, axes=([0], [0]))
            gxp[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += contrib
    if not periodic:
        return gxp[:, :H, :W].copy()
    gx = gxp[:, ph:ph + H, pw:pw + W].copy()
    # fold halo contributions back onto the wrapped cells
    if ph:
        gx[:, H - ph:, :] += gxp[:, :ph, pw:pw + W]
        gx[:, :ph, :] += gxp[:, ph + H:, pw:pw + W]
    if pw:
        gx[:, :, W - pw:] += gxp[:, ph:ph + H, :pw]
        gx[:, :, :pw] += gxp[:, ph:ph + H, pw + W:]
    if ph and pw:
        gx[:, H - ph:, W - pw:] += gxp[:, :ph, :pw]
        gx[:, H - ph:, :pw] += gxp[:, :ph, pw + W:]
        gx[:, :ph, W - pw:] += gxp[:, ph + H:, :pw]
        gx[:, :ph, :pw] += gxp[:, ph + H:, pw + W:]
    return gx


def stencil_periodic(u, s):
    kh, kw = s.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros(u.shape)
    for i in range(kh):
        for j in range(kw):
            coef = s[i, j]
            if coef == 0.0:
                continue
            out += coef * np.roll(u, (ph - i, pw - j), axis=(1, 2))
    return out
