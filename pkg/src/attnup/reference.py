"""Literal transcriptions of the upsampling operators.

Everything in this module favours being obviously correct over being fast:
plain loops over output pixels and window offsets, float64 accumulation, no
code shared with the vectorised paths that are validated against it.  The
fast kernels in :mod:`attnup.fast` and the training path in
:mod:`attnup.autodiff` are both tested against these functions.

Attention here means scaled dot-product attention over a KxK spatial window
with a learned relative positional encoding folded into the keys.  For
upsampling by stride S, keys and values live on the low-resolution grid
(equivalently: a zero-upsampled grid where everything off the S-divisible
lattice is masked out with -inf logits), while queries live on the output
grid.  Window positions outside the image are excluded from the softmax,
which is the same as masking them.

Several functions take an optional :class:`FlopCounter`; it counts the
multiply-accumulates actually performed, and the closed-form cost model in
:mod:`attnup.fast` is required to agree with it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import EmptyWindowError, Rng, Tensor, conv1x1, softmax_masked

NEG_INF = float("-inf")


class FlopCounter:
    """Tally of multiply-accumulate operations."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


def _as64(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AttnUpsampleParams:
    """Weights of one attention upsampling layer.

    ``w_q``/``w_k`` project the query/key source, ``w_v`` the value source;
    all are ``(C_out, C_in)`` matrices applied as 1x1 convolutions without
    bias.  ``pos_x``/``pos_y`` are relative positional tables of shape
    ``(K, C_out // 2)``: the encoding for offset ``(dx, dy)`` is the
    concatenation ``pos_x[dx + R] || pos_y[dy + R]`` with ``R = (K-1)//2``.

    ``kernel_size`` must be odd and at least ``2 * stride - 1`` so that every
    output pixel, including the ones at the borders, sees at least one
    unmasked low-resolution neighbour.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    pos_x: Tensor
    pos_y: Tensor
    kernel_size: int
    stride: int
    scale_logits: bool = True

    def __post_init__(self):
        k, s = self.kernel_size, self.stride
        if s < 1:
            raise ValueError(f"stride must be >= 1, got {s}")
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {k}")
        if k < 2 * s - 1:
            raise ValueError(
                f"kernel size {k} too small for stride {s}: need K >= 2S-1 so every "
                "output pixel keeps an unmasked neighbour"
            )
        c_out = self.w_q.shape[0]
        if c_out % 2 != 0:
            raise ValueError(f"output channels must be even to split the positional encoding, got {c_out}")
        if self.w_k.shape != self.w_q.shape:
            raise ValueError(f"w_k shape {self.w_k.shape} must match w_q shape {self.w_q.shape}")
        if self.w_v.ndim != 2 or self.w_v.shape[0] != c_out:
            raise ValueError(f"w_v must have {c_out} output channels, got shape {self.w_v.shape}")
        want = (k, c_out // 2)
        for name in ("pos_x", "pos_y"):
            t = getattr(self, name)
            if t.shape != want:
                raise ValueError(f"{name} must have shape {want}, got {t.shape}")

    @property
    def c_out(self) -> int:
        return self.w_q.shape[0]

    @property
    def c_in(self) -> int:
        return self.w_q.shape[1]

    @property
    def c_in_value(self) -> int:
        return self.w_v.shape[1]

    @property
    def scale(self) -> float:
        """Multiplier applied to every logit (1/sqrt of the key dimension)."""
        return 1.0 / math.sqrt(self.c_out) if self.scale_logits else 1.0


@dataclass
class DeconvParams:
    """Weights of one strided transposed convolution: ``w`` is (C_out, C_in, K, K)."""

    w: Tensor
    kernel_size: int
    stride: int

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {k}")
        if self.w.ndim != 4 or self.w.shape[2:] != (k, k):
            raise ValueError(f"w must have shape (C_out, C_in, {k}, {k}), got {self.w.shape}")

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    @property
    def c_in(self) -> int:
        return self.w.shape[1]


@dataclass
class Mask:
    """Additive attention mask over the upsampled grid.

    ``grid[i, j]`` is 0 where the zero-upsampled maps carry a real sample
    (both indices divisible by the stride) and ``-inf`` at the inserted
    zeros.  Adding it to the window logits removes the zeros from every
    softmax exactly.
    """

    grid: Tensor
    stride: int

    def __post_init__(self):
        if self.grid.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {self.grid.shape}")
        if not np.all((self.grid == 0) | np.isneginf(self.grid)):
            raise ValueError("mask grid entries must be 0 or -inf")


def init_attn_params(
    c_in: int,
    c_out: int,
    kernel_size: int,
    stride: int,
    rng: Rng,
    c_in_value: int | None = None,
    scale_logits: bool = True,
    dtype=np.float32,
) -> AttnUpsampleParams:
    """Seeded uniform init: projections +-1/sqrt(C_in), positions +-1/sqrt(C_out).

    Draw order (w_q, w_k, w_v, pos_x, pos_y) is fixed and part of the
    reproducibility contract.
    """
    civ = c_in if c_in_value is None else c_in_value
    lim = 1.0 / math.sqrt(c_in)
    limv = 1.0 / math.sqrt(civ)
    limp = 1.0 / math.sqrt(c_out)
    return AttnUpsampleParams(
        w_q=rng.uniform(-lim, lim, (c_out, c_in)).astype(dtype),
        w_k=rng.uniform(-lim, lim, (c_out, c_in)).astype(dtype),
        w_v=rng.uniform(-limv, limv, (c_out, civ)).astype(dtype),
        pos_x=rng.uniform(-limp, limp, (kernel_size, c_out // 2)).astype(dtype),
        pos_y=rng.uniform(-limp, limp, (kernel_size, c_out // 2)).astype(dtype),
        kernel_size=kernel_size,
        stride=stride,
        scale_logits=scale_logits,
    )


def init_deconv_params(
    c_in: int, c_out: int, kernel_size: int, stride: int, rng: Rng, dtype=np.float32
) -> DeconvParams:
    """Seeded uniform init with the fan-in rule +-1/sqrt(C_in * K * K)."""
    lim = 1.0 / math.sqrt(c_in * kernel_size * kernel_size)
    w = rng.uniform(-lim, lim, (c_out, c_in, kernel_size, kernel_size)).astype(dtype)
    return DeconvParams(w=w, kernel_size=kernel_size, stride=stride)


# ---------------------------------------------------------------------------
# operators


def zero_upsample(x: Tensor, stride: int) -> Tensor:
    """Insert S-1 zeros between samples along both spatial axes.

    ``out[c, i, j] = x[c, i//S, j//S]`` where both indices are divisible by
    S, and 0 elsewhere; output is (C, S*H, S*W).
    """
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {x.shape}")
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    x = _as64(x)
    c, h, w = x.shape
    out = np.zeros((c, h * s, w * s), dtype=np.float64)
    for i in range(h * s):
        for j in range(w * s):
            if i % s == 0 and j % s == 0:
                out[:, i, j] = x[:, i // s, j // s]
    return out


def _conv2d_pixelwise(x: Tensor, w: Tensor, padding: int, counter: FlopCounter | None = None) -> Tensor:
    """Same contract as core.conv2d, but one output pixel at a time."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.empty((c_out, h, wd), dtype=np.float64)
    per_pixel = c_out * c_in * k * k
    for i in range(h):
        for j in range(wd):
            win = xp[:, i : i + k, j : j + k]
            out[:, i, j] = np.tensordot(w, win, axes=([1, 2, 3], [0, 1, 2]))
            if counter is not None:
                counter.add(per_pixel)
    return out


def transposed_conv2d(x: Tensor, params: DeconvParams, counter: FlopCounter | None = None) -> Tensor:
    """Strided transposed convolution as zero-upsampling followed by conv2d.

    This composition is the definition: the dense convolution runs over the
    full K x K window at every upsampled pixel, multiplying the inserted
    zeros like any other sample (which is exactly the cost the attention
    variant avoids).
    """
    if x.shape[0] != params.c_in:
        raise ValueError(f"x has {x.shape[0]} channels, weights expect {params.c_in}")
    up = zero_upsample(x, params.stride)
    return _conv2d_pixelwise(up, _as64(params.w), (params.kernel_size - 1) // 2, counter)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Plain scaled dot-product attention: softmax(Q K^T / sqrt(F)) V, row-wise.

    ``q`` is (N, F), ``k`` is (M, F), ``v`` is (M, F_v); output is (N, F_v).
    """
    q, k, v = _as64(q), _as64(k), _as64(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("q, k, v must be 2-D (rows, features)")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"feature mismatch: q has {q.shape[1]}, k has {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"row mismatch: k has {k.shape[0]}, v has {v.shape[0]}")
    scale = 1.0 / math.sqrt(q.shape[1])
    out = np.empty((q.shape[0], v.shape[1]), dtype=np.float64)
    no_mask = np.zeros(k.shape[0])
    for i in range(q.shape[0]):
        logits = (k @ q[i]) * scale
        out[i] = softmax_masked(logits, no_mask) @ v
    return out


def relative_logit(q: Tensor, k: Tensor, dx: int, dy: int, params: AttnUpsampleParams) -> float:
    """One attention logit: q . (k + pos(dx, dy)), optionally scaled.

    ``(dx, dy)`` is the key position minus the query position; both must lie
    in [-R, R] for window radius R = (K-1)//2.  The positional vector is the
    concatenation of the x-table row for dx and the y-table row for dy.
    """
    r = (params.kernel_size - 1) // 2
    if not (-r <= dx <= r and -r <= dy <= r):
        raise ValueError(f"offset ({dx}, {dy}) outside window radius {r}")
    pos = np.concatenate([_as64(params.pos_x[dx + r]), _as64(params.pos_y[dy + r])])
    return float(np.dot(_as64(q), _as64(k) + pos)) * params.scale


def make_mask(height: int, width: int, stride: int) -> Mask:
    """Mask over an upsampled ``height x width`` grid: 0 on the S-lattice, -inf off it."""
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    grid = np.full((height, width), NEG_INF)
    grid[::s, ::s] = 0.0
    return Mask(grid=grid, stride=s)


def bilinear_upsample(x: Tensor, stride: int, counter: FlopCounter | None = None) -> Tensor:
    """Bilinear interpolation to S times the size, grid-aligned with clamping.

    ``out[i, j]`` samples the input at ``(i/S, j/S)``, so output position
    (S*i, S*j) copies input (i, j) exactly and the last S-1 rows/columns
    replicate the border sample.  S == 1 is an identity copy (and costs no
    multiplies); otherwise every output pixel blends 4 taps per channel.
    """
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {x.shape}")
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    x = _as64(x)
    if s == 1:
        return x.copy()
    c, h, w = x.shape
    out = np.empty((c, h * s, w * s), dtype=np.float64)
    for i in range(h * s):
        ib, ri = divmod(i, s)
        t = ri / s
        i1 = min(ib + 1, h - 1)
        for j in range(w * s):
            jb, rj = divmod(j, s)
            u = rj / s
            j1 = min(jb + 1, w - 1)
            out[:, i, j] = (
                (1 - t) * (1 - u) * x[:, ib, jb]
                + (1 - t) * u * x[:, ib, j1]
                + t * (1 - u) * x[:, i1, jb]
                + t * u * x[:, i1, j1]
            )
            if counter is not None:
                counter.add(4 * c)
    return out


def _masked_window_attention(
    q_up: Tensor,
    key_at,
    value_at,
    mask: Mask,
    params: AttnUpsampleParams,
    counter: FlopCounter | None,
    return_coeffs: bool,
):
    """Shared loop for the masked upsampling variants.

    ``key_at(a, b)`` / ``value_at(a, b)`` fetch key and value vectors for an
    unmasked upsampled-grid position.  Masked and out-of-image window
    positions are skipped outright: their softmax coefficient is exactly
    zero either way, and skipping keeps the multiply counter honest.
    """
    c_out = params.c_out
    c_val = params.w_v.shape[0]
    r = (params.kernel_size - 1) // 2
    sh, sw = mask.grid.shape
    out = np.zeros((c_val, sh, sw), dtype=np.float64)
    coeffs: dict[tuple[int, int], list[tuple[tuple[int, int], float]]] = {}
    for i in range(sh):
        for j in range(sw):
            q = q_up[:, i, j]
            cand = []
            logits = []
            for da in range(-r, r + 1):
                a = i + da
                if a < 0 or a >= sh:
                    continue
                for db in range(-r, r + 1):
                    b = j + db
                    if b < 0 or b >= sw:
                        continue
                    if mask.grid[a, b] != 0.0:
                        continue
                    logits.append(relative_logit(q, key_at(a, b), da, db, params))
                    cand.append((a, b))
                    if counter is not None:
                        counter.add(c_out)
            if not cand:
                raise EmptyWindowError(f"no unmasked neighbour for output pixel ({i}, {j})")
            coeff = softmax_masked(np.array(logits), np.zeros(len(logits)))
            for (a, b), w in zip(cand, coeff):
                out[:, i, j] += w * value_at(a, b)
                if counter is not None:
                    counter.add(c_val)
            if return_coeffs:
                coeffs[(i, j)] = list(zip(cand, (float(w) for w in coeff)))
    return (out, coeffs) if return_coeffs else out


def attention_conv(
    x: Tensor,
    params: AttnUpsampleParams,
    return_coeffs: bool = False,
):
    """Attention over a KxK window at a single resolution (no upsampling).

    Queries, keys and values are 1x1 projections of the same map; the window
    is clipped at the image borders.  ``params.stride`` is ignored.
    """
    x = _as64(x)
    if x.shape[0] != params.c_in:
        raise ValueError(f"x has {x.shape[0]} channels, w_q expects {params.c_in}")
    q = conv1x1(x, _as64(params.w_q))
    k = conv1x1(x, _as64(params.w_k))
    v = conv1x1(x, _as64(params.w_v))
    mask = Mask(grid=np.zeros(x.shape[1:]), stride=1)
    return _masked_window_attention(
        q,
        lambda a, b: k[:, a, b],
        lambda a, b: v[:, a, b],
        mask,
        params,
        None,
        return_coeffs,
    )


def attention_upsample(
    x: Tensor,
    params: AttnUpsampleParams,
    counter: FlopCounter | None = None,
    return_coeffs: bool = False,
):
    """Upsample by attention: bilinear queries attend to masked low-res keys.

    Keys and values are zero-upsampled to the output grid and everything off
    the stride lattice is masked, so each output pixel is a convex
    combination of genuine low-resolution values only.  Queries are
    bilinearly upsampled so that every output pixel asks its own question.
    """
    x = _as64(x)
    if x.shape[0] != params.c_in:
        raise ValueError(f"x has {x.shape[0]} channels, w_q expects {params.c_in}")
    if params.c_in_value != params.c_in:
        raise ValueError("self-upsampling needs matching query and value input channels")
    s = params.stride
    h, w = x.shape[1:]
    q = conv1x1(x, _as64(params.w_q))
    k = conv1x1(x, _as64(params.w_k))
    v = conv1x1(x, _as64(params.w_v))
    if counter is not None:
        counter.add(3 * params.c_out * params.c_in * h * w)
    q_up = bilinear_upsample(q, s, counter)
    k_up = zero_upsample(k, s)
    v_up = zero_upsample(v, s)
    mask = make_mask(s * h, s * w, s)
    return _masked_window_attention(
        q_up,
        lambda a, b: k_up[:, a, b],
        lambda a, b: v_up[:, a, b],
        mask,
        params,
        counter,
        return_coeffs,
    )


def attention_joint_upsample(
    x_lr: Tensor,
    x_hr: Tensor,
    params: AttnUpsampleParams,
    counter: FlopCounter | None = None,
    return_coeffs: bool = False,
):
    """Guided upsampling: queries and keys from a high-res map, values from low-res.

    ``x_hr`` must cover exactly ``stride`` times the spatial extent of
    ``x_lr``.  Queries and keys are dense 1x1 projections of the guide;
    values are projected from the low-resolution map and zero-upsampled, and
    the same lattice mask restricts attention to genuine samples.
    """
    x_lr, x_hr = _as64(x_lr), _as64(x_hr)
    s = params.stride
    h, w = x_lr.shape[1:]
    if x_hr.shape[1:] != (s * h, s * w):
        raise ValueError(
            f"guide shape {x_hr.shape[1:]} must be stride {s} times the target shape {(h, w)}"
        )
    if x_hr.shape[0] != params.c_in:
        raise ValueError(f"guide has {x_hr.shape[0]} channels, w_q expects {params.c_in}")
    if x_lr.shape[0] != params.c_in_value:
        raise ValueError(f"target has {x_lr.shape[0]} channels, w_v expects {params.c_in_value}")
    q_up = conv1x1(x_hr, _as64(params.w_q))
    k_up = conv1x1(x_hr, _as64(params.w_k))
    v = conv1x1(x_lr, _as64(params.w_v))
    if counter is not None:
        counter.add(2 * params.c_out * params.c_in * (s * h) * (s * w))
        counter.add(params.c_out * params.c_in_value * h * w)
    v_up = zero_upsample(v, s)
    mask = make_mask(s * h, s * w, s)
    return _masked_window_attention(
        q_up,
        lambda a, b: k_up[:, a, b],
        lambda a, b: v_up[:, a, b],
        mask,
        params,
        counter,
        return_coeffs,
    )


# ---------------------------------------------------------------------------
# parameter counts


def count_params_deconv(c_in: int, c_out: int, kernel_size: int) -> int:
    """Weights in a transposed convolution: C_in * C_out * K^2."""
    if min(c_in, c_out, kernel_size) < 1:
        raise ValueError("channel counts and kernel size must be positive")
    return c_in * c_out * kernel_size * kernel_size


def count_params_attention(c_in: int, c_out: int, kernel_size: int) -> int:
    """Weights in an attention upsampling layer: 3 projections plus both positional tables."""
    if min(c_in, c_out, kernel_size) < 1:
        raise ValueError("channel counts and kernel size must be positive")
    if c_out % 2 != 0:
        raise ValueError(f"output channels must be even, got {c_out}")
    return 3 * c_in * c_out + kernel_size * c_out
