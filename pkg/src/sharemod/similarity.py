"""Pixel and structural similarity measures with exact gradients.

SSIM here uses uniform ``w x w`` windows, population (divide by ``w**2``)
moments and only fully interior windows. The image score is the mean over
all windows of all channels.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimConfig:
    window: int = 5
    c1: float = 0.01**2
    c2: float = 0.03**2
    stride: int = 1

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be positive")
        if not (np.isfinite(self.c1) and np.isfinite(self.c2)) or self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1, c2 must be finite and non-negative")


DEFAULT_SSIM = SsimConfig()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def rmse(a, b):
    return float(np.sqrt(mse(a, b)))


def psnr(a, b, max_value=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_value**2 / err))


def mse_grad(a, b):
    a, b = _check_pair(a, b)
    return 2.0 * (a - b) / a.size


def ssim_window(pa, pb, cfg=DEFAULT_SSIM):
    """SSIM of two ``w x w`` patches."""
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    w = cfg.window
    if pa.shape != (w, w) or pb.shape != (w, w):
        raise ValueError(f"patches must be {w}x{w}, got {pa.shape} and {pb.shape}")
    ma, mb = pa.mean(), pb.mean()
    va = ((pa - ma) ** 2).mean()
    vb = ((pb - mb) ** 2).mean()
    cov = ((pa - ma) * (pb - mb)).mean()
    num = (2 * ma * mb + cfg.c1) * (2 * cov + cfg.c2)
    den = (ma**2 + mb**2 + cfg.c1) * (va + vb + cfg.c2)
    return float(num / den)


def _as_chw(a):
    if a.ndim == 2:
        return a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) image, got shape {a.shape}")
    return a


def _window_terms(a, b, cfg):
    """Per-window moments and SSIM factors, each of shape (C, nh, nw)."""
    w, s = cfg.window, cfg.stride
    if min(a.shape[-2:]) < w:
        raise ValueError(f"image {a.shape[-2:]} smaller than {w}x{w} window")
    wa = sliding_window_view(a, (w, w), axis=(-2, -1))[:, ::s, ::s]
    wb = sliding_window_view(b, (w, w), axis=(-2, -1))[:, ::s, ::s]
    ma = wa.mean(axis=(-2, -1))
    mb = wb.mean(axis=(-2, -1))
    da = wa - ma[..., None, None]
    db = wb - mb[..., None, None]
    va = (da * da).mean(axis=(-2, -1))
    vb = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    a1 = 2 * ma * mb + cfg.c1
    a2 = 2 * cov + cfg.c2
    b1 = ma**2 + mb**2 + cfg.c1
    b2 = va + vb + cfg.c2
    return ma, mb, a1, a2, b1, b2


def ssim_map(a, b, cfg=DEFAULT_SSIM):
    """SSIM of every window, shape (C, nh, nw)."""
    a, b = _check_pair(a, b)
    a, b = _as_chw(a), _as_chw(b)
    _, _, a1, a2, b1, b2 = _window_terms(a, b, cfg)
    return (a1 * a2) / (b1 * b2)


def ssim(a, b, cfg=DEFAULT_SSIM):
    return float(np.mean(ssim_map(a, b, cfg)))


def dissim(a, b, cfg=DEFAULT_SSIM):
    return 1.0 - ssim(a, b, cfg)


def _window_adjoint(m, shape, cfg):
    """Sum per-window values ``m`` (C, nh, nw) onto every pixel each window covers."""
    w, s = cfg.window, cfg.stride
    out = np.zeros(shape)
    nh, nw = m.shape[-2:]
    for i in range(w):
        for j in range(w):
            out[:, i : i + s * (nh - 1) + 1 : s, j : j + s * (nw - 1) + 1 : s] += m
    return out


def ssim_and_grads(a, b, cfg=DEFAULT_SSIM):
    """Return ``(ssim, d ssim / d a, d ssim / d b)`` from one pass over the windows."""
    a, b = _check_pair(a, b)
    orig_shape = a.shape
    a, b = _as_chw(a), _as_chw(b)
    ma, mb, a1, a2, b1, b2 = _window_terms(a, b, cfg)
    den = b1 * b2
    s_val = (a1 * a2) / den
    scale = 2.0 / (cfg.window**2 * s_val.size)
    # inside one window: d s / d a_i = (2/n) * (const_a + a1/den * b_i - s/b2 * a_i)
    k_cross = _window_adjoint(a1 / den, a.shape, cfg)
    k_self = _window_adjoint(-s_val / b2, a.shape, cfg)
    const_a = mb * (a2 - a1) / den - s_val * ma / b1 + s_val * ma / b2
    const_b = ma * (a2 - a1) / den - s_val * mb / b1 + s_val * mb / b2
    ga = _window_adjoint(const_a, a.shape, cfg) + b * k_cross + a * k_self
    gb = _window_adjoint(const_b, a.shape, cfg) + a * k_cross + b * k_self
    return float(s_val.mean()), (ga * scale).reshape(orig_shape), (gb * scale).reshape(orig_shape)


def ssim_grad(a, b, cfg=DEFAULT_SSIM):
    """Gradient of ``ssim(a, b)`` with respect to ``a``."""
    return ssim_and_grads(a, b, cfg)[1]


def dissim_grad(a, b, cfg=DEFAULT_SSIM):
    return -ssim_grad(a, b, cfg)
