"""Fused single-pass parameter-update kernels (numba when available).

All scalars arrive pre-cast to the array dtype so the loops stay in
float32 and vectorize; the numpy fallbacks run the same operation sequence.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("CURVETONE_NO_NUMBA"):
        raise ImportError("numba disabled via CURVETONE_NO_NUMBA")
    import numba

    @numba.njit(cache=True)
    def _adam_kernel(p, g, m, v, beta1, om_beta1, beta2, om_beta2, scale, inv_bias2, eps):  # pragma: no cover
        for i in range(p.shape[0]):
            gi = g[i]
            mi = beta1 * m[i] + om_beta1 * gi
            vi = beta2 * v[i] + om_beta2 * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= scale * mi / (np.sqrt(vi * inv_bias2) + eps)

    @numba.njit(cache=True)
    def _ema_kernel(target, source, om_tau, tau):  # pragma: no cover
        for i in range(target.shape[0]):
            target[i] = om_tau * target[i] + tau * source[i]

    @numba.njit(cache=True)
    def col2im_add(gc, gx, sh, sw):  # pragma: no cover
        # gc: (N, C, kh, kw, OH, OW) gradient patches; gx: (N, C, H, W) output
        n, c, kh, kw, oh, ow = gc.shape
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            row = i + sh * y
                            for x in range(ow):
                                gx[b, ch, row, j + sw * x] += gc[b, ch, i, j, y, x]

    HAVE_NUMBA = True

except ImportError:  # pragma: no cover - numba is a declared dependency

    def _adam_kernel(p, g, m, v, beta1, om_beta1, beta2, om_beta2, scale, inv_bias2, eps):
        m_new = beta1 * m + om_beta1 * g
        v_new = beta2 * v + om_beta2 * g * g
        m[:] = m_new
        v[:] = v_new
        p -= scale * m_new / (np.sqrt(v_new * inv_bias2) + eps)

    def _ema_kernel(target, source, om_tau, tau):
        target *= om_tau
        target += tau * source

    def col2im_add(gc, gx, sh, sw):
        _, _, kh, kw, oh, ow = gc.shape
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += gc[:, :, i, j]

    HAVE_NUMBA = False


def adam_step(p, g, m, v, beta1, beta2, scale, inv_bias2, eps):
    dt = p.dtype.type
    # JIT dispatch costs ~50us per call; numpy wins on small tensors (biases)
    kernel = _adam_kernel if (HAVE_NUMBA and p.size >= 16384) else _adam_numpy
    kernel(p, g, m, v, dt(beta1), dt(1.0) - dt(beta1), dt(beta2), dt(1.0) - dt(beta2),
           dt(scale), dt(inv_bias2), dt(eps))


def _adam_numpy(p, g, m, v, beta1, om_beta1, beta2, om_beta2, scale, inv_bias2, eps):
    m *= beta1
    m += om_beta1 * g
    v *= beta2
    v += om_beta2 * (g * g)
    p -= scale * m / (np.sqrt(v * inv_bias2) + eps)


def ema_update(target, source, tau):
    dt = target.dtype.type
    _ema_kernel(target, source, dt(1.0) - dt(tau), dt(tau))
