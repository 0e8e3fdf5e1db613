"""Seeded synthetic corpora for training and demos.

Two generators: colorful edge-rich images (for super-resolution, where
sharp region boundaries are exactly what plain bicubic upsampling
blurs), and aligned RGB-D pairs (piecewise-constant depth whose region
edges coincide with color edges in the guide, while the guide carries
extra texture the depth map does not).

Everything is a pure function of the seed, so corpora regenerate
bit-identically.
"""

from pathlib import Path

import numpy as np

from . import core, dataio


def _grids(size):
    ii, jj = np.mgrid[0:size, 0:size]
    return ii.astype(np.float64), jj.astype(np.float64)


def _shape_mask(rng, size, ii, jj):
    kind = rng.integers(0, 3)
    if kind == 0:  # rectangle
        h = int(rng.integers(size // 10, size // 2))
        w = int(rng.integers(size // 10, size // 2))
        i0 = int(rng.integers(0, size - h))
        j0 = int(rng.integers(0, size - w))
        mask = np.zeros((size, size), bool)
        mask[i0:i0 + h, j0:j0 + w] = True
        return mask
    if kind == 1:  # disk
        r = rng.integers(size // 12, size // 3)
        ci = rng.integers(0, size)
        cj = rng.integers(0, size)
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= r * r
    # diagonal band
    theta = rng.uniform(0, np.pi)
    offset = rng.uniform(-0.5, 0.5) * size
    width = rng.uniform(size / 24, size / 8)
    d = (ii - size / 2) * np.cos(theta) + (jj - size / 2) * np.sin(theta) - offset
    return np.abs(d) < width


def sisr_image(rng, size=128):
    """One (3, size, size) uint8 image: gradient sky, shapes, texture bands."""
    ii, jj = _grids(size)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b = rng.uniform(-1, 1, 2)
        base = rng.uniform(60, 200)
        img[c] = base + 40 * (a * ii + b * jj) / size
    # smooth texture so downscaling always loses something
    for c in range(3):
        fx, fy = rng.uniform(0.05, 0.25, 2)
        phase = rng.uniform(0, 2 * np.pi)
        img[c] += 16 * np.sin(2 * np.pi * (fx * ii + fy * jj) / 4 + phase)
    for _ in range(int(rng.integers(10, 18))):
        mask = _shape_mask(rng, size, ii, jj)
        color = rng.uniform(10, 245, 3)
        shade = rng.uniform(-0.3, 0.3)
        for c in range(3):
            img[c][mask] = color[c] * (1 + shade * (ii[mask] - size / 2) / size)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def rgbd_pair(rng, size=64):
    """An aligned (depth uint16 (H, W), guide uint8 (3, H, W)) pair.

    Depth is piecewise constant over the drawn regions; the guide colors
    the same regions and adds texture that has no depth counterpart.
    """
    ii, jj = _grids(size)
    depth = np.full((size, size), float(rng.integers(24000, 36000)))
    guide = np.empty((3, size, size))
    for c in range(3):
        guide[c] = rng.uniform(60, 190)
    for _ in range(int(rng.integers(4, 8))):
        mask = _shape_mask(rng, size, ii, jj)
        depth[mask] = float(rng.integers(6000, 22000))
        color = rng.uniform(20, 235, 3)
        for c in range(3):
            guide[c][mask] = color[c]
    # guide-only texture: the model has to learn to ignore it
    fx, fy = rng.uniform(0.1, 0.4, 2)
    phase = rng.uniform(0, 2 * np.pi)
    guide += 10 * np.sin(2 * np.pi * (fx * ii + fy * jj) / 4 + phase)
    guide = np.clip(np.round(guide), 0, 255).astype(np.uint8)
    return depth.astype(np.uint16), guide


def write_sisr_corpus(out_dir, n_train=16, n_eval=4, size=128, seed=0):
    """Write PNGs plus a train/eval manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = core.make_rng(seed)
    records = []
    for split, count in (("train", n_train), ("eval", n_eval)):
        for i in range(count):
            path = out_dir / f"{split}_{i:03d}.png"
            dataio.save_png(path, sisr_image(rng, size))
            records.append(dataio.ManifestRecord(split, path))
    manifest = out_dir / "manifest.tsv"
    dataio.save_manifest(manifest, records)
    return manifest


def write_joint_corpus(out_dir, n_train=50, n_eval=10, size=64, seed=0):
    """Write depth/guide pairs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = core.make_rng(seed)
    records = []
    for split, count in (("train", n_train), ("eval", n_eval)):
        for i in range(count):
            depth, guide = rgbd_pair(rng, size)
            dpath = out_dir / f"{split}_{i:03d}_depth.pgm"
            gpath = out_dir / f"{split}_{i:03d}_guide.png"
            dataio.save_pgm16(dpath, depth)
            dataio.save_png(gpath, guide)
            records.append(dataio.ManifestRecord(split, dpath, gpath))
    manifest = out_dir / "manifest.tsv"
    dataio.save_manifest(manifest, records)
    return manifest
