"""Vectorised and JIT-compiled implementations of the upsampling operators.

The masked attention of :func:`attnup.reference.attention_upsample` never
reads the inserted zeros, so instead of materialising zero-upsampled maps
the fast path precomputes, per output *phase* ``(i % S, j % S)``, the short
list of low-resolution neighbours whose upsampled position lands inside the
K x K window.  A numba kernel then walks output rows in parallel; within
one output pixel all reductions run in a fixed serial order, which makes
results bit-identical across thread counts.

NUMBA_NUM_THREADS is pinned (before numba is imported) to at least 4 so a
multi-thread pool exists even on small machines; ``threads=`` arguments are
clamped to that pool size.

The ``flops_*`` functions are the closed-form cost model in
multiply-accumulates.  They are required to agree exactly with the
instrumented counters of the reference implementations: the attention count
is separable, ``2 * C_out * Nx * Ny`` window work (one multiply for the
logit dot and one for the value sum per channel and unmasked neighbour,
where ``Nx = sum_i #{a : |S*a - i| <= R, 0 <= a < H}``), plus the three 1x1
projections and, for S > 1, four bilinear taps per query channel.  The
transposed convolution multiplies the full dense window everywhere:
``C_in * C_out * K^2`` per upsampled pixel, zeros included.
"""

from __future__ import annotations

import csv
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

os.environ.setdefault("NUMBA_NUM_THREADS", str(max(4, os.cpu_count() or 1)))

# numba probes optional threading layers (TBB) lazily and warns when the
# installed version is too old; the fallback layers work fine
warnings.filterwarnings("ignore", message=".*TBB.*", module="numba.*")

import numba
import numpy as np
from numba import njit, prange

from . import core, reference
from .reference import AttnUpsampleParams, DeconvParams


class ChecksumError(RuntimeError):
    """A benchmarked kernel disagreed with the reference checksum."""


# ---------------------------------------------------------------------------
# phase plans


@dataclass(frozen=True, eq=False)
class PhasePlan:
    """Per-phase neighbour tables for masked window attention at stride S.

    Phase ``p = (i % S) * S + (j % S)`` of an output pixel determines which
    low-resolution offsets ``(da, db)`` fall inside its window: row ``t`` of
    phase ``p`` says that low-res pixel ``(i//S + offs_da[p,t],
    j//S + offs_db[p,t])`` participates (subject to image bounds), and that
    its positional-table rows are ``row_x[p,t]`` / ``row_y[p,t]``.
    ``counts[p] >= 1`` always, because offset 0 is in reach for every phase
    whenever K >= 2S-1.
    """

    stride: int
    kernel_size: int
    counts: np.ndarray
    offs_da: np.ndarray
    offs_db: np.ndarray
    row_x: np.ndarray
    row_y: np.ndarray


def _axis_offsets(phase: int, stride: int, radius: int) -> list[tuple[int, int]]:
    # low-res offsets da with |S*da - phase| <= radius, and the positional row
    # index (S*da - phase) + radius for each
    lo = -((radius - phase) // stride)
    hi = (phase + radius) // stride
    return [(da, stride * da - phase + radius) for da in range(lo, hi + 1)]


@lru_cache(maxsize=None)
def build_phase_plan(stride: int, kernel_size: int) -> PhasePlan:
    s, k = int(stride), int(kernel_size)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
    if k < 2 * s - 1:
        raise ValueError(f"kernel size {k} too small for stride {s}: need K >= 2S-1")
    r = (k - 1) // 2
    axis = [_axis_offsets(p, s, r) for p in range(s)]
    pairs = []
    for pi in range(s):
        for pj in range(s):
            pairs.append([(da, db, rx, ry) for da, rx in axis[pi] for db, ry in axis[pj]])
    maxn = max(len(p) for p in pairs)
    counts = np.array([len(p) for p in pairs], dtype=np.int64)
    offs_da = np.zeros((s * s, maxn), dtype=np.int64)
    offs_db = np.zeros_like(offs_da)
    row_x = np.zeros_like(offs_da)
    row_y = np.zeros_like(offs_da)
    for p, lst in enumerate(pairs):
        for t, (da, db, rx, ry) in enumerate(lst):
            offs_da[p, t] = da
            offs_db[p, t] = db
            row_x[p, t] = rx
            row_y[p, t] = ry
    return PhasePlan(s, k, counts, offs_da, offs_db, row_x, row_y)


# ---------------------------------------------------------------------------
# kernels


@contextmanager
def _thread_pool(threads: int | None):
    if threads is None:
        yield numba.get_num_threads()
        return
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    want = min(int(threads), numba.config.NUMBA_NUM_THREADS)
    old = numba.get_num_threads()
    numba.set_num_threads(want)
    try:
        yield want
    finally:
        numba.set_num_threads(old)


@njit(parallel=True, cache=True)
def _masked_attention_kernel(
    q_up, k_low, v_low, pos_x, pos_y, counts, offs_da, offs_db, row_x, row_y, stride, scale, out
):  # pragma: no cover - compiled
    cq, sh, sw = q_up.shape
    h = k_low.shape[1]
    w = k_low.shape[2]
    cv = v_low.shape[0]
    half = pos_x.shape[1]
    maxn = offs_da.shape[1]
    for i in prange(sh):
        logits = np.empty(maxn, np.float32)
        wa = np.empty(maxn, np.int64)
        wb = np.empty(maxn, np.int64)
        ib = i // stride
        pi = i % stride
        for j in range(sw):
            jb = j // stride
            ph = pi * stride + (j % stride)
            n = 0
            for t in range(counts[ph]):
                ia = ib + offs_da[ph, t]
                if ia < 0 or ia >= h:
                    continue
                ja = jb + offs_db[ph, t]
                if ja < 0 or ja >= w:
                    continue
                rx = row_x[ph, t]
                ry = row_y[ph, t]
                acc = np.float32(0.0)
                for c in range(half):
                    acc += q_up[c, i, j] * (k_low[c, ia, ja] + pos_x[rx, c])
                for c in range(half, cq):
                    acc += q_up[c, i, j] * (k_low[c, ia, ja] + pos_y[ry, c - half])
                logits[n] = acc * scale
                wa[n] = ia
                wb[n] = ja
                n += 1
            if n == 0:
                continue
            m = logits[0]
            for t in range(1, n):
                if logits[t] > m:
                    m = logits[t]
            norm = np.float32(0.0)
            for t in range(n):
                e = np.exp(logits[t] - m)
                logits[t] = e
                norm += e
            inv = np.float32(1.0) / norm
            for o in range(cv):
                acc = np.float32(0.0)
                for t in range(n):
                    acc += logits[t] * v_low[o, wa[t], wb[t]]
                out[o, i, j] = acc * inv


def bilinear_forward(x: np.ndarray, stride: int) -> np.ndarray:
    """Vectorised counterpart of reference.bilinear_upsample, dtype preserving."""
    s = int(stride)
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if s == 1:
        return x.copy()
    c, h, w = x.shape
    ii = np.arange(h * s)
    jj = np.arange(w * s)
    i0, t = ii // s, ((ii % s) / s).astype(x.dtype)
    j0, u = jj // s, ((jj % s) / s).astype(x.dtype)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    rows0 = x[:, i0, :]
    rows1 = x[:, i1, :]
    top = rows0[:, :, j0] * (1 - u) + rows0[:, :, j1] * u
    bot = rows1[:, :, j0] * (1 - u) + rows1[:, :, j1] * u
    return top * (1 - t)[None, :, None] + bot * t[None, :, None]


def _f32_map(x, name):
    if x.ndim != 3:
        raise ValueError(f"{name} must have shape (C, H, W), got {x.shape}")
    return np.ascontiguousarray(x, dtype=np.float32)


def _run_masked_attention(q_up, k_low, v_low, params: AttnUpsampleParams, threads):
    plan = build_phase_plan(params.stride, params.kernel_size)
    out = np.zeros((params.w_v.shape[0], q_up.shape[1], q_up.shape[2]), dtype=np.float32)
    with _thread_pool(threads):
        _masked_attention_kernel(
            q_up,
            k_low,
            v_low,
            np.ascontiguousarray(params.pos_x, dtype=np.float32),
            np.ascontiguousarray(params.pos_y, dtype=np.float32),
            plan.counts,
            plan.offs_da,
            plan.offs_db,
            plan.row_x,
            plan.row_y,
            params.stride,
            np.float32(params.scale),
            out,
        )
    return out


def attention_upsample_fast(x: np.ndarray, params: AttnUpsampleParams, threads: int | None = None) -> np.ndarray:
    """float32 attention upsampling; matches the reference to ~1e-4 relative."""
    x = _f32_map(x, "x")
    if x.shape[0] != params.c_in:
        raise ValueError(f"x has {x.shape[0]} channels, w_q expects {params.c_in}")
    if params.c_in_value != params.c_in:
        raise ValueError("self-upsampling needs matching query and value input channels")
    q = core.conv1x1(x, np.ascontiguousarray(params.w_q, dtype=np.float32))
    k = core.conv1x1(x, np.ascontiguousarray(params.w_k, dtype=np.float32))
    v = core.conv1x1(x, np.ascontiguousarray(params.w_v, dtype=np.float32))
    q_up = np.ascontiguousarray(bilinear_forward(q, params.stride))
    return _run_masked_attention(q_up, np.ascontiguousarray(k), np.ascontiguousarray(v), params, threads)


def attention_joint_upsample_fast(
    x_lr: np.ndarray, x_hr: np.ndarray, params: AttnUpsampleParams, threads: int | None = None
) -> np.ndarray:
    """float32 guided upsampling; queries/keys from the guide, values from the target."""
    x_lr = _f32_map(x_lr, "x_lr")
    x_hr = _f32_map(x_hr, "x_hr")
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
    q_up = core.conv1x1(x_hr, np.ascontiguousarray(params.w_q, dtype=np.float32))
    k_dense = core.conv1x1(x_hr, np.ascontiguousarray(params.w_k, dtype=np.float32))
    # only the lattice keys can ever be attended to; keep them compact
    k_low = np.ascontiguousarray(k_dense[:, ::s, ::s])
    v_low = np.ascontiguousarray(core.conv1x1(x_lr, np.ascontiguousarray(params.w_v, dtype=np.float32)))
    return _run_masked_attention(np.ascontiguousarray(q_up), k_low, v_low, params, threads)


# ---------------------------------------------------------------------------
# cost model


def _valid_pairs_axis(size_low: int, stride: int, kernel_size: int) -> int:
    """Nx: over all output rows, how many in-image low-res rows are in reach."""
    r = (kernel_size - 1) // 2
    total = 0
    for i in range(size_low * stride):
        lo = max(0, -((r - i) // stride))
        hi = min(size_low - 1, (i + r) // stride)
        total += max(0, hi - lo + 1)
    return total


def flops_attention_upsample(c_in: int, c_out: int, h: int, w: int, stride: int, kernel_size: int) -> int:
    """Multiply-accumulates of attention_upsample on an (c_in, h, w) input."""
    if kernel_size % 2 == 0 or kernel_size < 2 * stride - 1:
        raise ValueError("kernel size must be odd and >= 2S-1")
    nx = _valid_pairs_axis(h, stride, kernel_size)
    ny = _valid_pairs_axis(w, stride, kernel_size)
    proj = 3 * c_in * c_out * h * w
    bil = 0 if stride == 1 else 4 * c_out * (stride * h) * (stride * w)
    return proj + bil + 2 * c_out * nx * ny


def flops_deconv(c_in: int, c_out: int, h: int, w: int, stride: int, kernel_size: int) -> int:
    """Multiply-accumulates of transposed_conv2d: dense K x K window at every output pixel."""
    if kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd")
    return c_in * c_out * kernel_size * kernel_size * (stride * h) * (stride * w)


# ---------------------------------------------------------------------------
# benchmarking


@dataclass
class BenchRecord:
    """One timed configuration; median_ns is the median of >= 20 timed runs."""

    op: str
    c_in: int
    c_out: int
    h: int
    w: int
    stride: int
    kernel_size: int
    threads: int
    median_ns: int
    flops: int
    gflops: float
    check: float


CSV_HEADER = ["op", "Cin", "Cout", "H", "W", "S", "K", "threads", "median_ns", "flops", "gflops", "check"]

DEFAULT_BENCH_OPS = ("attention_upsample_ref", "attention_upsample_fast", "transposed_conv2d_ref")
DEFAULT_BENCH_SHAPES = ((32, 32, 128, 128, 2, 3),)

CHECKSUM_RTOL = 1e-4


def checksum(x: np.ndarray) -> float:
    """Order-independent digest: float64 sum of absolute values."""
    return float(np.abs(np.asarray(x, dtype=np.float64)).sum())


def _time_median_ns(fn, reps: int) -> int:
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    times.sort()
    mid = len(times) // 2
    return times[mid] if len(times) % 2 else (times[mid - 1] + times[mid]) // 2


def bench(
    ops=DEFAULT_BENCH_OPS,
    shapes=DEFAULT_BENCH_SHAPES,
    reps: int = 20,
    threads: int | None = None,
    seed: int = 0,
) -> list[BenchRecord]:
    """Time the named ops over (Cin, Cout, H, W, S, K) shapes.

    Every fast record is validated against the reference checksum before it
    is accepted; a mismatch raises :class:`ChecksumError` instead of
    producing a record.
    """
    if reps < 20:
        raise ValueError(f"median needs >= 20 timed runs, got reps={reps}")
    known = set(DEFAULT_BENCH_OPS)
    for op in ops:
        if op not in known:
            raise ValueError(f"unknown bench op {op!r}; known: {sorted(known)}")
    records = []
    for shape in shapes:
        c_in, c_out, h, w, s, k = shape
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *shape])))
        x = rng.standard_normal((c_in, h, w)).astype(np.float32)
        attn_p = reference.init_attn_params(c_in, c_out, k, s, rng)
        dec_p = reference.init_deconv_params(c_in, c_out, k, s, rng)
        ref_attn_check = None
        if {"attention_upsample_ref", "attention_upsample_fast"} & set(ops):
            ref_attn_check = checksum(reference.attention_upsample(x, attn_p))
        for op in ops:
            if op == "attention_upsample_ref":
                fn = lambda: reference.attention_upsample(x, attn_p)
                flops = flops_attention_upsample(c_in, c_out, h, w, s, k)
                chk, used = ref_attn_check, 1
            elif op == "attention_upsample_fast":
                with _thread_pool(threads) as used:
                    pass
                fn = lambda: attention_upsample_fast(x, attn_p, threads=threads)
                flops = flops_attention_upsample(c_in, c_out, h, w, s, k)
                chk = checksum(attention_upsample_fast(x, attn_p, threads=threads))
                rel = abs(chk - ref_attn_check) / max(abs(ref_attn_check), 1.0)
                if rel > CHECKSUM_RTOL:
                    raise ChecksumError(
                        f"{op} checksum {chk!r} vs reference {ref_attn_check!r} (rel {rel:.3g}) at shape {shape}"
                    )
            else:  # transposed_conv2d_ref
                fn = lambda: reference.transposed_conv2d(x, dec_p)
                flops = flops_deconv(c_in, c_out, h, w, s, k)
                chk, used = checksum(reference.transposed_conv2d(x, dec_p)), 1
            median = _time_median_ns(fn, reps)
            records.append(
                BenchRecord(
                    op=op,
                    c_in=c_in,
                    c_out=c_out,
                    h=h,
                    w=w,
                    stride=s,
                    kernel_size=k,
                    threads=used,
                    median_ns=median,
                    flops=flops,
                    gflops=flops / median,
                    check=chk,
                )
            )
    return records


def write_bench_csv(records: list[BenchRecord], path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CSV_HEADER)
        for r in records:
            wr.writerow(
                [
                    r.op,
                    r.c_in,
                    r.c_out,
                    r.h,
                    r.w,
                    r.stride,
                    r.kernel_size,
                    r.threads,
                    r.median_ns,
                    r.flops,
                    repr(r.gflops),
                    repr(r.check),
                ]
            )
