"""Image files, color conversion, resampling, and dataset manifests.

The package reads and writes its own PNG subset (8-bit grayscale and RGB,
non-interlaced; zlib does the compression, everything else is decoded here,
with CRC validation and byte-offset error reporting) and 16-bit binary PGM
(``P5``, maxval 65535, big-endian) for depth maps.

Feature maps follow the package-wide (C, H, W) convention; 8-bit images are
uint8 with 1 or 3 channels, depth maps are (H, W) uint16.

A dataset manifest is a text file of ``role<TAB>target[<TAB>guide]`` lines
(``#`` comments and blank lines allowed); paths are resolved relative to
the manifest's directory and must exist at load time.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ImageU8 = np.ndarray  # (C, H, W) uint8, 1 or 3 channels
DepthMap = np.ndarray  # (H, W) uint16

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    """A file could not be parsed; the message names the byte offset."""


# ---------------------------------------------------------------------------
# PNG


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def save_png(path, img: ImageU8) -> None:
    """Write (C, H, W) uint8 with 1 (grayscale) or 3 (RGB) channels."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) uint8, got {img.dtype} {img.shape}")
    c, h, w = img.shape
    color_type = 0 if c == 1 else 2
    interleaved = np.ascontiguousarray(img.transpose(1, 2, 0))
    raw = b"".join(b"\x00" + interleaved[y].tobytes() for y in range(h))
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    with open(path, "wb") as f:
        f.write(PNG_SIGNATURE)
        f.write(_chunk(b"IHDR", ihdr))
        f.write(_chunk(b"IDAT", zlib.compress(raw, 6)))
        f.write(_chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, w: int, ch: int) -> np.ndarray:
    stride = w * ch
    if len(raw) != h * (stride + 1):
        raise DecodeError(
            f"decompressed image data is {len(raw)} bytes, expected {h * (stride + 1)}"
        )
    out = np.empty((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        row = np.frombuffer(raw, np.uint8, stride, pos + 1).copy()
        pos += stride + 1
        if ftype == 0:
            pass
        elif ftype == 1:  # sub
            for i in range(ch, stride):
                row[i] = (int(row[i]) + int(row[i - ch])) & 0xFF
        elif ftype == 2:  # up; uint8 addition wraps mod 256, which is the spec
            row += prev
        elif ftype == 3:  # average
            for i in range(stride):
                left = int(row[i - ch]) if i >= ch else 0
                row[i] = (int(row[i]) + ((left + int(prev[i])) >> 1)) & 0xFF
        elif ftype == 4:  # paeth
            for i in range(stride):
                a = int(row[i - ch]) if i >= ch else 0
                c = int(prev[i - ch]) if i >= ch else 0
                row[i] = (int(row[i]) + _paeth(a, int(prev[i]), c)) & 0xFF
        else:
            raise DecodeError(f"unknown filter type {ftype} in row {y}")
        out[y] = row
        prev = row
    return out


def load_png(path) -> ImageU8:
    """Read 8-bit grayscale or RGB, non-interlaced; returns (C, H, W) uint8."""
    data = Path(path).read_bytes()
    if data[:8] != PNG_SIGNATURE:
        raise DecodeError(f"{path}: bad PNG signature at offset 0")
    off = 8
    header = None
    idat = []
    ended = False
    while off < len(data):
        if off + 8 > len(data):
            raise DecodeError(f"{path}: truncated chunk header at offset {off}")
        length, tag = struct.unpack(">I4s", data[off : off + 8])
        end = off + 8 + length
        if end + 4 > len(data):
            raise DecodeError(f"{path}: truncated {tag.decode('latin1')} chunk at offset {off}")
        payload = data[off + 8 : end]
        (crc,) = struct.unpack(">I", data[end : end + 4])
        if zlib.crc32(tag + payload) & 0xFFFFFFFF != crc:
            raise DecodeError(f"{path}: CRC mismatch in {tag.decode('latin1')} chunk at offset {off}")
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.append(payload)
        elif tag == b"IEND":
            ended = True
            break
        off = end + 4
    if header is None:
        raise DecodeError(f"{path}: no IHDR chunk")
    if not ended:
        raise DecodeError(f"{path}: missing IEND chunk")
    w, h, depth, color_type, comp, filt, interlace = header
    if depth != 8:
        raise DecodeError(f"{path}: unsupported bit depth {depth} (only 8)")
    if color_type not in (0, 2):
        raise DecodeError(f"{path}: unsupported color type {color_type} (only grayscale/RGB)")
    if comp != 0 or filt != 0:
        raise DecodeError(f"{path}: unsupported compression/filter method")
    if interlace != 0:
        raise DecodeError(f"{path}: interlaced images are not supported")
    if not idat:
        raise DecodeError(f"{path}: no IDAT chunks")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as e:
        raise DecodeError(f"{path}: corrupt IDAT stream ({e})") from None
    ch = 1 if color_type == 0 else 3
    rows = _unfilter(raw, h, w, ch)
    return np.ascontiguousarray(rows.reshape(h, w, ch).transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# PGM (16-bit)


def save_pgm16(path, depth: DepthMap) -> None:
    """Write (H, W) uint16 as binary PGM, maxval 65535, big-endian samples."""
    depth = np.asarray(depth)
    if depth.dtype != np.uint16 or depth.ndim != 2:
        raise ValueError(f"expected (H, W) uint16, got {depth.dtype} {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(depth.astype(">u2").tobytes())


def load_pgm16(path) -> DepthMap:
    data = Path(path).read_bytes()
    toks = []
    i = 0
    while len(toks) < 4:
        if i >= len(data):
            raise DecodeError(f"{path}: truncated header at offset {i}")
        b = data[i]
        if b == 0x23:  # '#': comment to end of line
            while i < len(data) and data[i] not in (0x0A, 0x0D):
                i += 1
        elif chr(b).isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not chr(data[j]).isspace() and data[j] != 0x23:
                j += 1
            toks.append(data[i:j])
            i = j
    if toks[0] != b"P5":
        raise DecodeError(f"{path}: not a binary PGM (magic {toks[0]!r} at offset 0)")
    if i >= len(data) or not chr(data[i]).isspace():
        raise DecodeError(f"{path}: missing whitespace after header at offset {i}")
    i += 1
    try:
        w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    except ValueError:
        raise DecodeError(f"{path}: non-numeric header fields {toks[1:]}") from None
    if maxval != 65535:
        raise DecodeError(f"{path}: maxval must be 65535 for 16-bit depth, got {maxval}")
    need = h * w * 2
    if len(data) - i < need:
        raise DecodeError(f"{path}: expected {need} sample bytes at offset {i}, found {len(data) - i}")
    return np.frombuffer(data, dtype=">u2", count=h * w, offset=i).reshape(h, w).astype(np.uint16)


# ---------------------------------------------------------------------------
# color and resampling


def rgb_to_y(img: ImageU8) -> np.ndarray:
    """BT.601 luminance in [0, 1]: (1, H, W) float32; 16/255 black, 235/255 white.

    Single-channel input is just rescaled to [0, 1].
    """
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) uint8, got {img.dtype} {img.shape}")
    if img.shape[0] == 1:
        return (img.astype(np.float32) / np.float32(255.0)).reshape(1, *img.shape[1:])
    r, g, b = (img[i].astype(np.float64) for i in range(3))
    y = (65.481 * r + 128.553 * g + 24.966 * b) / 255.0 + 16.0
    return (y / 255.0).astype(np.float32)[None]


def rgb_to_ycbcr(img: ImageU8) -> np.ndarray:
    """BT.601 studio-swing YCbCr, all three planes scaled to [0, 1].

    The Y plane equals :func:`rgb_to_y` of the same image; Cb/Cr are the
    usual chroma offsets with 128/255 as the neutral point.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) uint8, got {img.dtype} {img.shape}")
    r, g, b = (img[i].astype(np.float64) for i in range(3))
    y = (65.481 * r + 128.553 * g + 24.966 * b) / 255.0 + 16.0
    cb = (-37.797 * r - 74.203 * g + 112.0 * b) / 255.0 + 128.0
    cr = (112.0 * r - 93.786 * g - 18.214 * b) / 255.0 + 128.0
    return (np.stack([y, cb, cr]) / 255.0).astype(np.float32)


def ycbcr_to_rgb(ycc: np.ndarray) -> ImageU8:
    """Inverse of :func:`rgb_to_ycbcr`; clips out-of-gamut values to uint8."""
    ycc = np.asarray(ycc, dtype=np.float64)
    if ycc.ndim != 3 or ycc.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {ycc.shape}")
    y = ycc[0] * 255.0 - 16.0
    cb = ycc[1] * 255.0 - 128.0
    cr = ycc[2] * 255.0 - 128.0
    r = 1.164383 * y + 1.596027 * cr
    g = 1.164383 * y - 0.391762 * cb - 0.812968 * cr
    b = 1.164383 * y + 2.017232 * cb
    return np.clip(np.rint(np.stack([r, g, b])), 0, 255).astype(np.uint8)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom / Keys kernel, a = -0.5
    at = np.abs(t)
    return np.where(
        at <= 1,
        1.5 * at**3 - 2.5 * at**2 + 1.0,
        np.where(at < 2, -0.5 * at**3 + 2.5 * at**2 - 4.0 * at + 2.0, 0.0),
    )


def _axis_weights(n_in: int, n_out: int):
    # pixel-centre mapping: output i samples input at (i + 0.5) * n_in/n_out - 0.5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(pos).astype(int)
    offs = np.arange(-1, 3)
    weights = _cubic_kernel((pos - base)[:, None] - offs[None, :])
    weights /= weights.sum(axis=1, keepdims=True)
    idx = np.clip(base[:, None] + offs[None, :], 0, n_in - 1)
    return idx, weights


def bicubic_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resampling of a float (C, H, W) map, edges clamped.

    Same-size output reproduces the input exactly (the kernel interpolates).
    Computation and result are float64.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {(out_h, out_w)}")
    h, w = x.shape[1:]
    ri, rw = _axis_weights(h, out_h)
    tmp = (x[:, ri, :] * rw[None, :, :, None]).sum(axis=2)
    ci, cw = _axis_weights(w, out_w)
    return (tmp[:, :, ci] * cw[None, None, :, :]).sum(axis=3)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    """One dataset entry: a role label, a target image, optionally a guide image."""

    role: str
    target: Path
    guide: Path | None = None


def load_manifest(path) -> list[ManifestRecord]:
    """Parse role/target[/guide] lines; paths resolve against the manifest directory."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise DecodeError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(fields)}")
        role = fields[0].strip()
        if not role:
            raise DecodeError(f"{path}:{lineno}: empty role")
        target = (base / fields[1]).resolve()
        guide = (base / fields[2]).resolve() if len(fields) == 3 else None
        for p in (target, guide):
            if p is not None and not p.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: referenced file does not exist: {p}")
        records.append(ManifestRecord(role=role, target=target, guide=guide))
    return records


def save_manifest(path, records: list[ManifestRecord]) -> None:
    """Write records with paths relative to the manifest directory where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    lines = []
    for r in records:
        fields = [r.role, rel(r.target)]
        if r.guide is not None:
            fields.append(rel(r.guide))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n")
