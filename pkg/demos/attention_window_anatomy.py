"""Walk through what the masked attention window actually sees.

Upsampling by attention works on the zero-upsampled grid: only every
S-th row and column holds a real low-resolution sample, everything else
is masked out of the softmax.  This script prints, for a 2x upsampling
with a 3x3 window, which input positions each output pixel can attend
to, then checks two structural facts:

  * at stride 1 nothing is masked and the layer degenerates to plain
    windowed attention over the input map;
  * the layer needs roughly a third of the parameters of a transposed
    convolution with the same kernel.

Run:  python3 demos/attention_window_anatomy.py
"""

import numpy as np

from attnup import core, reference


def show_support_map():
    rng = core.make_rng(0)
    x = rng.standard_normal((2, 3, 3)).astype(np.float32)
    params = reference.init_attn_params(2, 2, 3, 2, rng)
    _, coeffs = reference.attention_upsample(x, params, return_coeffs=True)

    print("2x upsampling of a 3x3 map, 3x3 window")
    print("how many real samples each of the 36 output pixels can see:")
    counts = np.zeros((6, 6), dtype=int)
    for (i, j), cand in coeffs.items():
        counts[i, j] = len(cand)
    print(counts)

    print()
    print("output pixel (1, 2) in detail, weights with random keys:")
    for (a, b), w in coeffs[(1, 2)]:
        print(f"  attends to upsampled-grid ({a}, {b}) = low-res ({a // 2}, {b // 2}), weight {w:.3f}")
    total = sum(w for _, w in coeffs[(1, 2)])
    print(f"  weights sum to {total:.6f} (a convex combination, always)")


def stride_one_collapse():
    rng = core.make_rng(1)
    x = rng.standard_normal((4, 5, 5)).astype(np.float32)
    params = reference.init_attn_params(4, 4, 3, 1, rng)
    up = reference.attention_upsample(x, params)
    conv = reference.attention_conv(x, params)
    print()
    print("stride 1: upsampling path vs plain windowed attention")
    print(f"  max |difference| = {np.max(np.abs(up - conv)):.2e}")


def parameter_story():
    print()
    print("parameters per upsampling layer (K=3):")
    print(f"  {'channels':>10} {'attention':>10} {'deconv':>8} {'ratio':>6}")
    for c in (16, 32, 64, 128):
        att = reference.count_params_attention(c, c, 3)
        dec = reference.count_params_deconv(c, c, 3)
        print(f"  {c:>10} {att:>10} {dec:>8} {dec / att:>5.2f}x")


if __name__ == "__main__":
    show_support_map()
    stride_one_collapse()
    parameter_story()
