"""Reverse-mode differentiation over the package's operators.

A :class:`OpTape` records a straight-line program: every operator appends a
closure that propagates gradients from its output to its inputs, and
:func:`backward` runs the closures in exact reverse order.  Values live in
:class:`Var` nodes (transient) or :class:`ParamSlot` nodes (named, with a
persistent gradient buffer that accumulates across calls until
:func:`zero_grads`).  Passing ``tape=None`` runs any operator in inference
mode with no recording, so the same composition code serves forward-only
evaluation and training.

The masked attention forward here is the vectorised per-phase counterpart
of the reference loops (same neighbour sets via the fast module's phase
plans); its backward applies the softmax Jacobian per window, so masked and
out-of-image neighbours receive exactly zero gradient by construction.

Gradient checking (:func:`finite_diff_check`) runs central differences in
float64 with configurable step and tolerance and reports the worst
coordinate per parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .fast import bilinear_forward, build_phase_plan

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# nodes and tape


class Var:
    """A transient value with a gradient buffer of the same shape."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class ParamSlot:
    """A named trainable value; ``grad`` accumulates until explicitly zeroed."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape


Node = Var  # ParamSlot quacks the same


def _node(x):
    return x if isinstance(x, (Var, ParamSlot)) else Var(x)


def zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0


class OpTape:
    """Straight-line record of backward closures."""

    def __init__(self):
        self._backs = []

    def record(self, fn) -> None:
        self._backs.append(fn)

    def __len__(self):
        return len(self._backs)

    def run_backward(self) -> None:
        for fn in reversed(self._backs):
            fn()


def backward(tape: OpTape, loss: Var, seed: float = 1.0) -> None:
    """Seed d(loss)/d(loss) and propagate through every recorded op."""
    loss.grad[...] = seed
    tape.run_backward()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b, tape: OpTape | None = None) -> Var:
    a, b = _node(a), _node(b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    out = Var(a.value + b.value)
    if tape is not None:
        def back():
            a.grad += out.grad
            b.grad += out.grad
        tape.record(back)
    return out


def relu(x, tape: OpTape | None = None) -> Var:
    x = _node(x)
    out = Var(np.maximum(x.value, 0))
    if tape is not None:
        keep = x.value > 0
        def back():
            x.grad += np.where(keep, out.grad, 0)
        tape.record(back)
    return out


def prelu(x, slope, tape: OpTape | None = None) -> Var:
    """Channelwise parametric ReLU; ``slope`` has shape (C,)."""
    x, slope = _node(x), _node(slope)
    if slope.value.shape != (x.value.shape[0],):
        raise ValueError(f"slope must have shape ({x.value.shape[0]},), got {slope.value.shape}")
    s = slope.value[:, None, None]
    neg = np.minimum(x.value, 0)
    out = Var(np.maximum(x.value, 0) + s * neg)
    if tape is not None:
        pos = x.value > 0
        def back():
            x.grad += np.where(pos, out.grad, s * out.grad)
            slope.grad += (out.grad * neg).sum(axis=(1, 2))
        tape.record(back)
    return out


def concat(parts, tape: OpTape | None = None) -> Var:
    """Concatenate feature maps along the channel axis."""
    parts = [_node(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=0))
    if tape is not None:
        def back():
            c0 = 0
            for p in parts:
                c1 = c0 + p.value.shape[0]
                p.grad += out.grad[c0:c1]
                c0 = c1
        tape.record(back)
    return out


def narrow(x, c0: int, c1: int, tape: OpTape | None = None) -> Var:
    """Channel slice [c0:c1) as a copy."""
    x = _node(x)
    if not 0 <= c0 < c1 <= x.value.shape[0]:
        raise ValueError(f"bad channel range [{c0}, {c1}) for {x.value.shape[0]} channels")
    out = Var(x.value[c0:c1].copy())
    if tape is not None:
        def back():
            x.grad[c0:c1] += out.grad
        tape.record(back)
    return out


def mse(pred, target, tape: OpTape | None = None) -> Var:
    """Mean squared error against a constant target; returns a 0-d Var."""
    pred = _node(pred)
    target = np.asarray(target)
    if target.shape != pred.value.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {pred.value.shape}")
    diff = pred.value - target
    out = Var(np.asarray((diff * diff).mean()))
    if tape is not None:
        scale = 2.0 / diff.size
        def back():
            pred.grad += (scale * out.grad) * diff
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# convolutions


def _im2col(x: np.ndarray, k: int, padding: int):
    c_in, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, h * w)


def conv2d(x, w, padding: int, tape: OpTape | None = None) -> Var:
    """Same-size stride-1 convolution, differentiable in x and w."""
    x, w = _node(x), _node(w)
    c_out, c_in, k, k2 = w.value.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be square and odd, got {k}x{k2}")
    if padding != (k - 1) // 2:
        raise ValueError(f"padding must be (K-1)//2 = {(k - 1) // 2}, got {padding}")
    if x.value.shape[0] != c_in:
        raise ValueError(f"x has {x.value.shape[0]} channels, w expects {c_in}")
    _, h, wd = x.value.shape
    cols = _im2col(x.value, k, padding)
    out = Var(np.ascontiguousarray((w.value.reshape(c_out, -1) @ cols).reshape(c_out, h, wd)))
    if tape is not None:
        def back():
            g = out.grad.reshape(c_out, -1)
            w.grad += (g @ cols.T).reshape(w.value.shape)
            # dX: correlate the output grad with the flipped, transposed kernel
            wb = np.ascontiguousarray(w.value.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            x.grad += core.conv2d(out.grad, wb, padding)
        tape.record(back)
    return out


def conv1x1(x, w, tape: OpTape | None = None) -> Var:
    x, w = _node(x), _node(w)
    if w.value.ndim != 2 or x.value.shape[0] != w.value.shape[1]:
        raise ValueError(f"w {w.value.shape} incompatible with x {x.value.shape}")
    c, h, wd = x.value.shape
    xf = x.value.reshape(c, h * wd)
    out = Var(np.ascontiguousarray((w.value @ xf).reshape(-1, h, wd)))
    if tape is not None:
        def back():
            g = out.grad.reshape(out.value.shape[0], -1)
            w.grad += g @ xf.T
            x.grad += (w.value.T @ g).reshape(x.value.shape)
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# resampling ops


def zero_upsample(x, stride: int, tape: OpTape | None = None) -> Var:
    x = _node(x)
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    c, h, w = x.value.shape
    up = np.zeros((c, h * s, w * s), dtype=x.value.dtype)
    up[:, ::s, ::s] = x.value
    out = Var(up)
    if tape is not None:
        def back():
            x.grad += out.grad[:, ::s, ::s]
        tape.record(back)
    return out


def subsample(x, stride: int, tape: OpTape | None = None) -> Var:
    """Keep every stride-th pixel (the lattice the zero-upsampling mask retains)."""
    x = _node(x)
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = Var(x.value[:, ::s, ::s].copy())
    if tape is not None:
        def back():
            x.grad[:, ::s, ::s] += out.grad
        tape.record(back)
    return out


def avg_pool(x, factor: int, tape: OpTape | None = None) -> Var:
    """Non-overlapping mean pooling by an exact integer factor."""
    x = _node(x)
    f = int(factor)
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    c, h, w = x.value.shape
    if h % f or w % f:
        raise ValueError(f"spatial size {(h, w)} not divisible by pooling factor {f}")
    v = x.value.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    out = Var(v)
    if tape is not None:
        inv = 1.0 / (f * f)
        def back():
            x.grad += np.repeat(np.repeat(out.grad, f, axis=1), f, axis=2) * inv
        tape.record(back)
    return out


def _scatter_shifted(dx, gp, weight, up_row: bool, up_col: bool):
    # transpose of clamped "+1" indexing: last row/col folds onto itself
    if weight == 0.0:
        return
    if up_row and up_col:
        dx[:, 1:, 1:] += weight * gp[:, :-1, :-1]
        dx[:, -1:, 1:] += weight * gp[:, -1:, :-1]
        dx[:, 1:, -1:] += weight * gp[:, :-1, -1:]
        dx[:, -1:, -1:] += weight * gp[:, -1:, -1:]
    elif up_row:
        dx[:, 1:, :] += weight * gp[:, :-1, :]
        dx[:, -1:, :] += weight * gp[:, -1:, :]
    elif up_col:
        dx[:, :, 1:] += weight * gp[:, :, :-1]
        dx[:, :, -1:] += weight * gp[:, :, -1:]
    else:
        dx += weight * gp


def bilinear_upsample(x, stride: int, tape: OpTape | None = None) -> Var:
    """Differentiable counterpart of the reference bilinear upsampling."""
    x = _node(x)
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = Var(bilinear_forward(x.value, s))
    if tape is not None:
        if s == 1:
            def back():
                x.grad += out.grad
        else:
            def back():
                for pi in range(s):
                    t = pi / s
                    for pj in range(s):
                        u = pj / s
                        gp = out.grad[:, pi::s, pj::s]
                        _scatter_shifted(x.grad, gp, (1 - t) * (1 - u), False, False)
                        _scatter_shifted(x.grad, gp, (1 - t) * u, False, True)
                        _scatter_shifted(x.grad, gp, t * (1 - u), True, False)
                        _scatter_shifted(x.grad, gp, t * u, True, True)
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# masked window attention


def masked_attention(
    q,
    k,
    v,
    pos_x,
    pos_y,
    kernel_size: int,
    stride: int,
    scale_logits: bool = True,
    tape: OpTape | None = None,
) -> Var:
    """Attention of dense queries over lattice keys/values.

    ``q`` lives on the output grid (C_q, S*H, S*W); ``k`` and ``v`` live on
    the low-resolution grid (C_q, H, W) and (C_v, H, W).  Each output pixel
    attends to the low-res pixels whose upsampled position falls in its
    K x K window, exactly like the masked reference loops.  With S == 1
    this is plain windowed attention.
    """
    q, k, v = _node(q), _node(k), _node(v)
    pos_x, pos_y = _node(pos_x), _node(pos_y)
    s = int(stride)
    plan = build_phase_plan(s, kernel_size)
    cq, sh, sw = q.value.shape
    if cq % 2:
        raise ValueError(f"query channels must be even, got {cq}")
    if k.value.shape[0] != cq:
        raise ValueError(f"key channels {k.value.shape[0]} must match query channels {cq}")
    h, w = k.value.shape[1:]
    if (sh, sw) != (s * h, s * w):
        raise ValueError(f"query grid {(sh, sw)} must be stride {s} times the key grid {(h, w)}")
    if v.value.shape[1:] != (h, w):
        raise ValueError(f"value grid {v.value.shape[1:]} must match key grid {(h, w)}")
    half = cq // 2
    for name, p in (("pos_x", pos_x), ("pos_y", pos_y)):
        if p.value.shape != (kernel_size, half):
            raise ValueError(f"{name} must have shape ({kernel_size}, {half}), got {p.value.shape}")
    scale = 1.0 / math.sqrt(cq) if scale_logits else 1.0
    cv = v.value.shape[0]
    dtype = np.result_type(q.value.dtype, k.value.dtype, v.value.dtype, np.float32)
    out = Var(np.zeros((cv, sh, sw), dtype=dtype))
    saved = []
    for pi in range(s):
        for pj in range(s):
            ph = pi * s + pj
            n = int(plan.counts[ph])
            qp = q.value[:, pi::s, pj::s]
            regions = []
            logit = np.full((n, h, w), NEG_INF, dtype=dtype)
            for t in range(n):
                da, db = int(plan.offs_da[ph, t]), int(plan.offs_db[ph, t])
                rx, ry = int(plan.row_x[ph, t]), int(plan.row_y[ph, t])
                r0, r1 = max(0, -da), h - max(0, da)
                c0, c1 = max(0, -db), w - max(0, db)
                regions.append((da, db, rx, ry, r0, r1, c0, c1))
                if r0 >= r1 or c0 >= c1:
                    continue
                qr = qp[:, r0:r1, c0:c1]
                kr = k.value[:, r0 + da : r1 + da, c0 + db : c1 + db]
                pvec = np.concatenate([pos_x.value[rx], pos_y.value[ry]]).astype(dtype)
                logit[t, r0:r1, c0:c1] = np.einsum("cij,cij->ij", qr, kr) + np.tensordot(pvec, qr, axes=([0], [0]))
            logit *= dtype.type(scale)
            coeff = np.exp(logit - logit.max(axis=0))
            coeff /= coeff.sum(axis=0)
            z = np.zeros((cv, h, w), dtype=dtype)
            for t, (da, db, rx, ry, r0, r1, c0, c1) in enumerate(regions):
                if r0 >= r1 or c0 >= c1:
                    continue
                z[:, r0:r1, c0:c1] += coeff[t, r0:r1, c0:c1] * v.value[:, r0 + da : r1 + da, c0 + db : c1 + db]
            out.value[:, pi::s, pj::s] = z
            if tape is not None:
                saved.append((pi, pj, coeff, regions))
    if tape is not None:
        def back():
            for pi, pj, coeff, regions in saved:
                qp = q.value[:, pi::s, pj::s]
                gp = out.grad[:, pi::s, pj::s]
                dcoeff = np.zeros_like(coeff)
                for t, (da, db, rx, ry, r0, r1, c0, c1) in enumerate(regions):
                    if r0 >= r1 or c0 >= c1:
                        continue
                    gr = gp[:, r0:r1, c0:c1]
                    vr = v.value[:, r0 + da : r1 + da, c0 + db : c1 + db]
                    dcoeff[t, r0:r1, c0:c1] = np.einsum("cij,cij->ij", gr, vr)
                    v.grad[:, r0 + da : r1 + da, c0 + db : c1 + db] += coeff[t, r0:r1, c0:c1] * gr
                # softmax jacobian: dL = A * (dA - sum_t A_t dA_t); exact zeros stay zero
                dlogit = coeff * (dcoeff - (coeff * dcoeff).sum(axis=0))
                dlogit *= scale
                dqp = np.zeros_like(qp)
                for t, (da, db, rx, ry, r0, r1, c0, c1) in enumerate(regions):
                    if r0 >= r1 or c0 >= c1:
                        continue
                    dl = dlogit[t, r0:r1, c0:c1]
                    qr = qp[:, r0:r1, c0:c1]
                    kr = k.value[:, r0 + da : r1 + da, c0 + db : c1 + db]
                    pvec = np.concatenate([pos_x.value[rx], pos_y.value[ry]])
                    dqp[:, r0:r1, c0:c1] += dl * (kr + pvec[:, None, None])
                    k.grad[:, r0 + da : r1 + da, c0 + db : c1 + db] += dl * qr
                    dpos = np.einsum("ij,cij->c", dl, qr)
                    pos_x.grad[rx] += dpos[:half]
                    pos_y.grad[ry] += dpos[half:]
                q.grad[:, pi::s, pj::s] += dqp
        tape.record(back)
    return out


# ---------------------------------------------------------------------------
# operator compositions (shared by models and gradient checks)


def attention_upsample(x, w_q, w_k, w_v, pos_x, pos_y, kernel_size, stride, scale_logits=True, tape=None) -> Var:
    q = conv1x1(x, w_q, tape)
    k = conv1x1(x, w_k, tape)
    v = conv1x1(x, w_v, tape)
    q_up = bilinear_upsample(q, stride, tape)
    return masked_attention(q_up, k, v, pos_x, pos_y, kernel_size, stride, scale_logits, tape)


def attention_joint_upsample(
    x_lr, x_hr, w_q, w_k, w_v, pos_x, pos_y, kernel_size, stride, scale_logits=True, tape=None
) -> Var:
    q = conv1x1(x_hr, w_q, tape)
    k = subsample(conv1x1(x_hr, w_k, tape), stride, tape)
    v = conv1x1(x_lr, w_v, tape)
    return masked_attention(q, k, v, pos_x, pos_y, kernel_size, stride, scale_logits, tape)


def transposed_conv2d(x, w, stride: int, tape: OpTape | None = None) -> Var:
    k = w.value.shape[2] if isinstance(w, (Var, ParamSlot)) else np.asarray(w).shape[2]
    return conv2d(zero_upsample(x, stride, tape), w, (k - 1) // 2, tape)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckResult:
    """Worst-coordinate comparison of analytic vs numeric gradient for one parameter."""

    name: str
    checked: int
    max_rel_err: float
    worst_index: tuple
    ok: bool


def finite_diff_check(
    make_loss,
    params,
    eps: float = 1e-4,
    rel_tol: float = 1e-4,
    max_coords: int = 200,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare tape gradients against central differences, parameter by parameter.

    ``make_loss(tape)`` must rebuild the loss from the current values in
    ``params``; it is called once with a tape for the analytic gradient and
    twice per sampled coordinate with ``tape=None`` for the numeric one.
    Everything must be float64; the error measure is
    ``|analytic - numeric| / max(1, |analytic|)``, reported for the worst of
    up to ``max_coords`` randomly sampled coordinates per parameter.
    """
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError(f"finite differences need float64 parameters; {p.name} is {p.value.dtype}")
    zero_grads(params)
    tape = OpTape()
    loss = make_loss(tape)
    backward(tape, loss)
    rng = core.make_rng(seed)
    results = []
    for p in params:
        n = p.value.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = -1.0
        worst_idx = (0,)
        for c in coords:
            orig = p.value.flat[c]
            p.value.flat[c] = orig + eps
            lp = float(make_loss(None).value)
            p.value.flat[c] = orig - eps
            lm = float(make_loss(None).value)
            p.value.flat[c] = orig
            numeric = (lp - lm) / (2 * eps)
            analytic = float(p.grad.flat[c])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic))
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(int(c), p.value.shape)
        results.append(
            GradCheckResult(
                name=p.name,
                checked=len(coords),
                max_rel_err=worst,
                worst_index=tuple(int(i) for i in worst_idx),
                ok=worst <= rel_tol,
            )
        )
    return results
