"""The two trainable networks, built on the autodiff ops.

Super-resolution network: a stem conv with PReLU, then one block per
factor-of-two of upscaling (residual pair + a x2 upsampling layer, either
attention-based or a strided transposed convolution), and a final conv
back to the image channel count.  No activation after the upsampling
layers or the head.

Guided joint upsampling network: CNN_T lifts the low-res target map to F
feature channels and CNN_G does the same for the high-res guide; the
value map is then pulled up one factor of two per step.  Each step
zero-upsamples the current value map, concatenates it with the guide
features average-pooled to the matching resolution, runs the mixer stack
(CNN_M) over the concatenation, splits the mixer output into query and
key halves (first half queries), and attends from the dense query grid
into the value lattice.  CNN_F maps the final feature map to one output
channel.  Every conv and every attention output is followed by ReLU
except the last CNN_F conv.

Parameters live in an ordered dict of named slots; the order is the
manifest order used by the checkpoint format and by init (all random
draws happen in manifest order, so a seed pins every weight).

Checkpoint layout, little-endian throughout: magic b"ATUP1", uint32
parameter count, then per parameter a uint16 name length, the utf-8
name, a uint8 rank and that many uint32 dims; after the manifest the raw
float32 buffers follow in the same order.
"""

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSlot

CHECKPOINT_MAGIC = b"ATUP1"


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or does not fit the model."""


class PReLUParam(ParamSlot):
    """Learnable per-channel negative slope; exactly one entry per channel."""

    def __post_init__(self):
        super().__post_init__()
        if self.value.ndim != 1:
            raise ValueError(f"prelu slope must be 1-D (one slope per channel), got shape {self.value.shape}")


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _check_odd(k, what):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"{what} must be odd and positive, got {k}")


@dataclass(frozen=True)
class SisrSpec:
    """Shape of the super-resolution network.

    ``upsample_factor`` must be a power of two; the network uses one
    upsampling block per factor of two.  ``block_kind`` picks the
    upsampling layer: "attention" or "deconv".
    """

    upsample_factor: int = 2
    features: int = 32
    block_kind: str = "attention"
    stem_kernel: int = 5
    res_kernel: int = 3
    up_kernel: int = 3
    in_channels: int = 1
    out_channels: int = 1
    scale_logits: bool = True

    def __post_init__(self):
        if self.upsample_factor < 2 or not _is_pow2(self.upsample_factor):
            raise ValueError(f"upsample_factor must be a power of two >= 2, got {self.upsample_factor}")
        if self.block_kind not in ("attention", "deconv"):
            raise ValueError(f"unknown block_kind {self.block_kind!r}")
        if self.features < 2:
            raise ValueError(f"features must be >= 2, got {self.features}")
        if self.block_kind == "attention" and self.features % 2:
            raise ValueError(f"features must be even for attention blocks, got {self.features}")
        _check_odd(self.stem_kernel, "stem_kernel")
        _check_odd(self.res_kernel, "res_kernel")
        _check_odd(self.up_kernel, "up_kernel")
        if self.block_kind == "attention" and self.up_kernel < 3:
            # stride-2 window needs kernel >= 2*2-1 to cover a lattice point
            raise ValueError(f"up_kernel must be >= 3 for attention blocks, got {self.up_kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def n_blocks(self):
        return self.upsample_factor.bit_length() - 1


@dataclass(frozen=True)
class JointSpec:
    """Shape of the guided joint upsampling network.

    Channel lists follow the model table: ``cnn_t``/``cnn_g`` end at the
    feature width F / G, ``cnn_m`` ends at twice the query width (split
    into query and key halves), ``cnn_f`` lists the hidden widths before
    the final one-channel conv.
    """

    upsample_factor: int = 4
    cnn_t: tuple = (96, 48, 8)
    cnn_g: tuple = (96, 48, 8)
    cnn_m: tuple = (16,)
    cnn_f: tuple = (16, 16)
    conv_kernel: int = 3
    attn_kernel: int = 3
    share_mixer: bool = False
    scale_logits: bool = True
    target_in: int = 1
    guide_in: int = 3

    def __post_init__(self):
        if self.upsample_factor < 2 or not _is_pow2(self.upsample_factor):
            raise ValueError(f"upsample_factor must be a power of two >= 2, got {self.upsample_factor}")
        for name in ("cnn_t", "cnn_g", "cnn_m", "cnn_f"):
            chans = getattr(self, name)
            if not chans or any(c < 1 for c in chans):
                raise ValueError(f"{name} must be a non-empty list of positive widths, got {chans}")
        # mixer output splits into Q and K, and each half splits again for
        # the two positional tables
        if self.cnn_m[-1] % 4:
            raise ValueError(f"cnn_m must end in a multiple of 4 channels, got {self.cnn_m[-1]}")
        _check_odd(self.conv_kernel, "conv_kernel")
        _check_odd(self.attn_kernel, "attn_kernel")
        if self.attn_kernel < 3:
            raise ValueError(f"attn_kernel must be >= 3 for stride-2 windows, got {self.attn_kernel}")
        if self.target_in < 1 or self.guide_in < 1:
            raise ValueError("channel counts must be positive")

    @property
    def n_steps(self):
        return self.upsample_factor.bit_length() - 1

    @property
    def qk_channels(self):
        return self.cnn_m[-1] // 2


# channel widths from the model table; upsample_factor is chosen per run
JOINT_PRESETS = {
    "SA_M1_F8": dict(cnn_t=(96, 48, 8), cnn_g=(96, 48, 8), cnn_m=(16,), cnn_f=(16, 16)),
    "SA_M1_F16": dict(cnn_t=(96, 48, 16), cnn_g=(96, 48, 16), cnn_m=(32,), cnn_f=(32, 32)),
    "SA_M1_F32": dict(cnn_t=(96, 48, 32), cnn_g=(96, 48, 32), cnn_m=(64,), cnn_f=(64, 64)),
    "SA_M2_F32": dict(cnn_t=(96, 48, 32), cnn_g=(96, 48, 32), cnn_m=(64, 64), cnn_f=(64, 64)),
}


def joint_preset(name, upsample_factor=4, **overrides):
    if name not in JOINT_PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(JOINT_PRESETS)}")
    kw = dict(JOINT_PRESETS[name])
    kw.update(overrides)
    return JointSpec(upsample_factor=upsample_factor, **kw)


# ---------------------------------------------------------------------------
# parameter manifests


def sisr_param_shapes(spec):
    """Yield (name, shape) in manifest order."""
    f, k = spec.features, spec.res_kernel
    yield "stem.w", (f, spec.in_channels, spec.stem_kernel, spec.stem_kernel)
    yield "stem.prelu", (f,)
    for i in range(1, spec.n_blocks + 1):
        yield f"block{i}.res1.w", (f, f, k, k)
        yield f"block{i}.res2.w", (f, f, k, k)
        if spec.block_kind == "attention":
            yield f"block{i}.up.w_q", (f, f)
            yield f"block{i}.up.w_k", (f, f)
            yield f"block{i}.up.w_v", (f, f)
            yield f"block{i}.up.pos_x", (spec.up_kernel, f // 2)
            yield f"block{i}.up.pos_y", (spec.up_kernel, f // 2)
        else:
            yield f"block{i}.up.w", (f, f, spec.up_kernel, spec.up_kernel)
    yield "head.w", (spec.out_channels, f, k, k)


def joint_param_shapes(spec):
    """Yield (name, shape) in manifest order."""
    k = spec.conv_kernel

    def conv_stack(prefix, c_in, widths):
        for j, c in enumerate(widths):
            yield f"{prefix}.{j}.w", (c, c_in, k, k)
            c_in = c

    yield from conv_stack("cnn_t", spec.target_in, spec.cnn_t)
    yield from conv_stack("cnn_g", spec.guide_in, spec.cnn_g)
    mix_in = spec.cnn_t[-1] + spec.cnn_g[-1]
    if spec.share_mixer:
        yield from conv_stack("mixer", mix_in, spec.cnn_m)
    half = spec.qk_channels // 2
    for i in range(1, spec.n_steps + 1):
        if not spec.share_mixer:
            yield from conv_stack(f"step{i}.mixer", mix_in, spec.cnn_m)
        yield f"step{i}.pos_x", (spec.attn_kernel, half)
        yield f"step{i}.pos_y", (spec.attn_kernel, half)
    yield from conv_stack("cnn_f", spec.cnn_t[-1], spec.cnn_f)
    yield "cnn_f.out.w", (1, spec.cnn_f[-1], k, k)


def count_sisr_params(spec):
    return sum(int(np.prod(s)) for _, s in sisr_param_shapes(spec))


def count_joint_params(spec):
    return sum(int(np.prod(s)) for _, s in joint_param_shapes(spec))


def _init_value(name, shape, rng, dtype):
    # projections and convs: uniform with fan-in limit; positional tables
    # scale with the query/key width they pair with; prelu starts at 0.25
    if name.endswith(".prelu"):
        return np.full(shape, 0.25, dtype=dtype)
    if name.endswith((".pos_x", ".pos_y")):
        limit = 1.0 / math.sqrt(2 * shape[1])
    else:
        limit = 1.0 / math.sqrt(int(np.prod(shape[1:])))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _build(shapes, rng, dtype):
    params = {}
    for name, shape in shapes:
        cls = PReLUParam if name.endswith(".prelu") else ParamSlot
        params[name] = cls(name, _init_value(name, shape, rng, dtype))
    return params


def build_sisr_params(spec, rng, dtype=np.float32):
    """Freshly initialised parameter dict, keyed and ordered by manifest name."""
    return _build(sisr_param_shapes(spec), rng, dtype)


def build_joint_params(spec, rng, dtype=np.float32):
    return _build(joint_param_shapes(spec), rng, dtype)


# ---------------------------------------------------------------------------
# forward passes


def sisr_forward(x, spec, params, tape=None):
    """Run the super-resolution network; returns a Var.

    ``x`` is (in_channels, H, W) with H, W at least the stem kernel size.
    Output is (out_channels, factor*H, factor*W).
    """
    val = x.value if hasattr(x, "value") else np.asarray(x)
    if val.ndim != 3 or val.shape[0] != spec.in_channels:
        raise ValueError(f"expected ({spec.in_channels}, H, W) input, got {val.shape}")
    if min(val.shape[1:]) < spec.stem_kernel:
        raise ValueError(f"input {val.shape[1:]} smaller than stem kernel {spec.stem_kernel}")
    pad = (spec.res_kernel - 1) // 2
    h = ad.conv2d(x, params["stem.w"], (spec.stem_kernel - 1) // 2, tape)
    h = ad.prelu(h, params["stem.prelu"], tape)
    for i in range(1, spec.n_blocks + 1):
        r = ad.conv2d(h, params[f"block{i}.res1.w"], pad, tape)
        r = ad.relu(r, tape)
        r = ad.conv2d(r, params[f"block{i}.res2.w"], pad, tape)
        h = ad.add(h, r, tape)
        if spec.block_kind == "attention":
            h = ad.attention_upsample(
                h,
                params[f"block{i}.up.w_q"],
                params[f"block{i}.up.w_k"],
                params[f"block{i}.up.w_v"],
                params[f"block{i}.up.pos_x"],
                params[f"block{i}.up.pos_y"],
                spec.up_kernel,
                2,
                spec.scale_logits,
                tape,
            )
        else:
            h = ad.transposed_conv2d(h, params[f"block{i}.up.w"], 2, tape)
    return ad.conv2d(h, params["head.w"], pad, tape)


def joint_forward(target_lr, guide_hr, spec, params, tape=None, trace=None):
    """Run the guided upsampler; returns a Var of shape (1, M*h, M*w).

    ``target_lr`` is (target_in, h, w), ``guide_hr`` is (guide_in, M*h, M*w)
    for upsample factor M.  Pass a list as ``trace`` to record the guide
    and value-map shapes seen at each step.
    """
    t_val = target_lr.value if hasattr(target_lr, "value") else np.asarray(target_lr)
    g_val = guide_hr.value if hasattr(guide_hr, "value") else np.asarray(guide_hr)
    m = spec.upsample_factor
    if t_val.ndim != 3 or t_val.shape[0] != spec.target_in:
        raise ValueError(f"expected ({spec.target_in}, h, w) target, got {t_val.shape}")
    if g_val.ndim != 3 or g_val.shape[0] != spec.guide_in:
        raise ValueError(f"expected ({spec.guide_in}, H, W) guide, got {g_val.shape}")
    want = (g_val.shape[0], m * t_val.shape[1], m * t_val.shape[2])
    if g_val.shape != want:
        raise ValueError(f"guide shape {g_val.shape} does not match target upsampled {m}x: want {want}")

    pad = (spec.conv_kernel - 1) // 2

    def conv_stack(h, prefix, n):
        for j in range(n):
            h = ad.conv2d(h, params[f"{prefix}.{j}.w"], pad, tape)
            h = ad.relu(h, tape)
        return h

    v = conv_stack(target_lr, "cnn_t", len(spec.cnn_t))
    y_hr = conv_stack(guide_hr, "cnn_g", len(spec.cnn_g))

    fqk = spec.qk_channels
    for i in range(1, spec.n_steps + 1):
        y_ds = ad.avg_pool(y_hr, m >> i, tape)
        v_zu = ad.zero_upsample(v, 2, tape)
        mixed = ad.concat([v_zu, y_ds], tape)
        prefix = "mixer" if spec.share_mixer else f"step{i}.mixer"
        mixed = conv_stack(mixed, prefix, len(spec.cnn_m))
        q = ad.narrow(mixed, 0, fqk, tape)
        keys = ad.subsample(ad.narrow(mixed, fqk, 2 * fqk, tape), 2, tape)
        a = ad.masked_attention(
            q, keys, v,
            params[f"step{i}.pos_x"], params[f"step{i}.pos_y"],
            spec.attn_kernel, 2, spec.scale_logits, tape,
        )
        v = ad.relu(a, tape)
        if trace is not None:
            trace.append({"step": i, "guide_shape": y_ds.value.shape, "value_shape": v.value.shape})

    out = conv_stack(v, "cnn_f", len(spec.cnn_f))
    return ad.conv2d(out, params["cnn_f.out.w"], pad, tape)


def downsample(x, factor):
    """Non-overlapping average pooling of a (C, H, W) array; factor 1 is identity."""
    return ad.avg_pool(x, factor).value


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params):
    """Write the parameter dict to ``path`` in the binary checkpoint format."""
    buffers = []
    manifest = [CHECKPOINT_MAGIC, struct.pack("<I", len(params))]
    for name, slot in params.items():
        data = np.ascontiguousarray(slot.value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        manifest.append(struct.pack("<H", len(raw)))
        manifest.append(raw)
        manifest.append(struct.pack("<B", data.ndim))
        manifest.append(struct.pack(f"<{data.ndim}I", *data.shape))
        buffers.append(data)
    with open(path, "wb") as f:
        for chunk in manifest:
            f.write(chunk)
        for data in buffers:
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered dict of float32 arrays."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes reading {what} at offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic: {path} is not a checkpoint file")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        entries.append((name, shape))
    out = {}
    for name, shape in entries:
        if name in out:
            raise CheckpointError(f"duplicate parameter {name!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(shape).copy()
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after parameter data")
    return out


def load_into(params, path):
    """Restore a saved checkpoint into an existing parameter dict, in place."""
    loaded = load_checkpoint(path)
    if set(loaded) != set(params):
        missing = sorted(set(params) - set(loaded))
        extra = sorted(set(loaded) - set(params))
        raise CheckpointError(f"parameter names do not match model: missing {missing}, unexpected {extra}")
    for name, slot in params.items():
        if loaded[name].shape != slot.value.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: file has {loaded[name].shape}, model has {slot.value.shape}")
        slot.value[...] = loaded[name]
