"""Shared tensor primitives for the attention-upsampling package.

Conventions used across the package:

- Feature maps are numpy arrays of shape ``(C, H, W)``, channels first.
- Convolution weights are ``(C_out, C_in, K, K)`` with odd ``K`` and stride 1;
  1x1 projections are plain ``(C_out, C_in)`` matrices.
- All randomness flows through generators created by :func:`make_rng` so that
  every run is reproducible from integer seeds.

The implementations here are the product path (vectorised, BLAS-backed).  The
literal loop transcriptions used as oracles live in :mod:`attnup.reference`.
"""

from __future__ import annotations

import numpy as np

# Aliases used in signatures throughout the package.
Tensor = np.ndarray
Rng = np.random.Generator

DEFAULT_DTYPE = np.float32


class EmptyWindowError(ValueError):
    """An attention window contained no unmasked, in-image position."""


def make_rng(seed: int) -> Rng:
    """Deterministic PCG64 generator for an integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


def _check_map(x: Tensor, name: str = "x") -> None:
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (C, H, W), got {x.shape}")


def conv2d(x: Tensor, w: Tensor, padding: int) -> Tensor:
    """Stride-1 2-D convolution with zero padding, output size == input size.

    ``x`` is ``(C_in, H, W)``, ``w`` is ``(C_out, C_in, K, K)`` with K odd and
    ``padding == (K - 1) // 2``.  Internally an im2col + matmul so the heavy
    lifting happens in BLAS; the quadruple-loop equivalent is checked in tests.
    """
    _check_map(x)
    if w.ndim != 4:
        raise ValueError(f"w must have shape (C_out, C_in, K, K), got {w.shape}")
    c_in, h, wd = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if c_in_w != c_in:
        raise ValueError(f"channel mismatch: x has {c_in}, w expects {c_in_w}")
    if padding != (k - 1) // 2:
        raise ValueError(f"padding must be (K-1)//2 = {(k - 1) // 2}, got {padding}")

    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # (C_in, H, W, K, K) -> (C_in*K*K, H*W); the transpose copy is the im2col cost
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, h * wd)
    out = w.reshape(c_out, c_in * k * k) @ cols
    return np.ascontiguousarray(out.reshape(c_out, h, wd))


def conv1x1(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise projection: ``out[o, i, j] = sum_c w[o, c] * x[c, i, j]``."""
    _check_map(x)
    if w.ndim != 2:
        raise ValueError(f"w must have shape (C_out, C_in), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"channel mismatch: x has {x.shape[0]}, w expects {w.shape[1]}")
    return np.tensordot(w, x, axes=([1], [0]))


def softmax_masked(logits: Tensor, mask: Tensor) -> Tensor:
    """Numerically stable softmax over ``logits + mask``.

    ``mask`` entries are 0 (keep) or ``-inf`` (drop); dropped positions come
    out exactly 0.  Raises :class:`EmptyWindowError` when everything is
    masked, since the softmax would be 0/0.
    """
    logits = np.asarray(logits)
    mask = np.asarray(mask)
    if logits.shape != mask.shape or logits.ndim != 1:
        raise ValueError(f"logits/mask must be 1-D and equal length, got {logits.shape} vs {mask.shape}")
    if not np.all((mask == 0) | np.isneginf(mask)):
        raise ValueError("mask entries must be 0 or -inf")
    z = logits + mask
    finite = np.isfinite(z)
    if not finite.any():
        raise EmptyWindowError("all positions masked, softmax undefined")
    # exp(-inf - m) underflows to an exact 0, which is what the mask demands
    e = np.exp(z - z[finite].max())
    return e / e.sum()
