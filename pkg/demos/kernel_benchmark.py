"""Time the reference loops against the compiled kernels.

The fast path never materialises the zero-upsampled grid: a per-phase
plan lists, for each output pixel class (i % S, j % S), exactly which
low-resolution neighbours land in its window, and a compiled kernel
walks those short lists.  The reference implementation walks the full
window per pixel in Python.  Same numbers, very different speed.

Also prints the closed-form multiply-accumulate counts that the
benchmark CSV records; these match instrumented counters in the
reference implementation exactly, so the GFLOP/s column is honest.

Run:  python3 demos/kernel_benchmark.py
"""

from attnup import fast


def main():
    shapes = ((16, 16, 64, 64, 2, 3), (32, 32, 128, 128, 2, 3))
    print("timing (median of 20 runs each)...")
    records = fast.bench(shapes=shapes, reps=20, threads=4)

    print(f"{'op':<26} {'shape':<20} {'median':>10} {'mac':>12} {'gmac/s':>8}")
    for r in records:
        shape = f"{r.c_in}x{r.c_out}x{r.h}x{r.w} s{r.stride} k{r.kernel_size}"
        print(f"{r.op:<26} {shape:<20} {r.median_ns / 1e6:>8.2f}ms {r.flops:>12} {r.gflops:>8.2f}")

    print()
    for shape in shapes:
        ref = next(r for r in records if r.op == "attention_upsample_ref" and (r.c_in, r.h) == (shape[0], shape[2]))
        fst = next(r for r in records if r.op == "attention_upsample_fast" and (r.c_in, r.h) == (shape[0], shape[2]))
        print(f"{shape[0]}ch {shape[2]}px: fast path {ref.median_ns / fst.median_ns:.0f}x faster "
              f"({fst.threads} threads), checksums agree to {abs(ref.check - fst.check):.2e}")


if __name__ == "__main__":
    main()
