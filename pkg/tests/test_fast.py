"""Tests for the phase-planned numba kernels and the cost model.

Phase plans are checked against direct enumeration of the mask, the kernels
against the float64 reference loops, the FLOP formulas against instrumented
multiply counters, and the bench records against their own invariants.
"""

import numpy as np
import pytest

from attnup import core, fast, reference

# float32 kernels vs float64 loops; error floor of 1 makes sub-unit outputs
# an absolute comparison, same convention as the acceptance gate
FAST_RTOL = 1e-4


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0)))


def make_params(c_in, c_out, k, s, seed, c_in_value=None):
    return reference.init_attn_params(
        c_in, c_out, k, s, core.make_rng(seed), c_in_value=c_in_value
    )


class TestPhasePlan:
    @pytest.mark.parametrize("s,k", [(1, 1), (1, 3), (2, 3), (2, 5), (2, 7), (4, 7), (3, 5), (4, 9)])
    def test_matches_mask_enumeration(self, s, k):
        plan = fast.build_phase_plan(s, k)
        r = (k - 1) // 2
        h = w = 5  # low-res size; large enough for interior and border pixels
        mask = reference.make_mask(s * h, s * w, s)
        for i in range(s * h):
            for j in range(s * w):
                want = set()
                for a in range(max(0, i - r), min(s * h, i + r + 1)):
                    for b in range(max(0, j - r), min(s * w, j + r + 1)):
                        if mask.grid[a, b] == 0:
                            want.add((a // s, b // s))
                ph = (i % s) * s + (j % s)
                got = set()
                for t in range(plan.counts[ph]):
                    ia = i // s + plan.offs_da[ph, t]
                    ja = j // s + plan.offs_db[ph, t]
                    if 0 <= ia < h and 0 <= ja < w:
                        got.add((ia, ja))
                assert got == want, (i, j)

    @pytest.mark.parametrize("s,k", [(1, 3), (2, 3), (2, 7), (4, 7), (5, 9)])
    def test_every_phase_nonempty(self, s, k):
        plan = fast.build_phase_plan(s, k)
        assert plan.counts.min() >= 1

    def test_positional_rows_in_range(self):
        plan = fast.build_phase_plan(2, 5)
        assert plan.row_x.min() >= 0 and plan.row_x.max() < 5
        assert plan.row_y.min() >= 0 and plan.row_y.max() < 5

    def test_rejects_kernel_too_small(self):
        with pytest.raises(ValueError, match="2S-1"):
            fast.build_phase_plan(3, 3)


class TestBilinearForward:
    @pytest.mark.parametrize("s", [1, 2, 3, 4])
    def test_matches_reference(self, s):
        x = core.make_rng(200 + s).standard_normal((3, 4, 5))
        got = fast.bilinear_forward(x, s)
        want = reference.bilinear_upsample(x, s)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)

    def test_preserves_dtype(self):
        x = np.ones((1, 2, 2), dtype=np.float32)
        assert fast.bilinear_forward(x, 2).dtype == np.float32


class TestAttentionUpsampleFast:
    @pytest.mark.parametrize("c,k,s,h,w", [
        (2, 3, 2, 3, 4),
        (4, 5, 2, 5, 3),
        (2, 7, 4, 3, 3),
        (6, 3, 1, 4, 5),
        (8, 5, 3, 4, 4),
    ])
    def test_matches_reference(self, c, k, s, h, w):
        p = make_params(c, c + (c % 2), k, s, seed=300 + k + s)
        x = core.make_rng(310 + k + s).standard_normal((c, h, w)).astype(np.float32)
        got = fast.attention_upsample_fast(x, p)
        want = reference.attention_upsample(x, p)
        assert rel_err(got, want) < FAST_RTOL

    def test_bitwise_identical_across_thread_counts(self):
        p = make_params(4, 4, 3, 2, seed=320)
        x = core.make_rng(321).standard_normal((4, 9, 7)).astype(np.float32)
        outs = [fast.attention_upsample_fast(x, p, threads=t) for t in (1, 2, 4)]
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[0], outs[2])

    def test_rejects_channel_mismatch(self):
        p = make_params(3, 4, 3, 2, seed=322)
        with pytest.raises(ValueError, match="channels"):
            fast.attention_upsample_fast(np.zeros((2, 3, 3), dtype=np.float32), p)


class TestAttentionJointUpsampleFast:
    @pytest.mark.parametrize("c_lr,c_hr,k,s", [(1, 3, 3, 2), (2, 4, 5, 2), (1, 2, 7, 4)])
    def test_matches_reference(self, c_lr, c_hr, k, s):
        p = make_params(c_hr, 4, k, s, seed=330 + k, c_in_value=c_lr)
        rng = core.make_rng(340 + k)
        x_lr = rng.standard_normal((c_lr, 3, 4)).astype(np.float32)
        x_hr = rng.standard_normal((c_hr, 3 * s, 4 * s)).astype(np.float32)
        got = fast.attention_joint_upsample_fast(x_lr, x_hr, p)
        want = reference.attention_joint_upsample(x_lr, x_hr, p)
        assert rel_err(got, want) < FAST_RTOL

    def test_rejects_mismatched_guide(self):
        p = make_params(3, 4, 3, 2, seed=350, c_in_value=1)
        with pytest.raises(ValueError, match="guide shape"):
            fast.attention_joint_upsample_fast(
                np.zeros((1, 3, 3), dtype=np.float32), np.zeros((3, 7, 6), dtype=np.float32), p
            )


class TestFlopFormulas:
    @pytest.mark.parametrize("c_in,c_out,h,w,s,k", [
        (2, 4, 3, 4, 2, 3),
        (3, 6, 4, 4, 2, 5),
        (2, 2, 3, 3, 4, 7),
        (4, 4, 5, 3, 1, 3),
        (1, 2, 2, 6, 3, 5),
    ])
    def test_attention_formula_equals_instrumented_counter(self, c_in, c_out, h, w, s, k):
        p = make_params(c_in, c_out, k, s, seed=400 + k + s)
        x = core.make_rng(410).standard_normal((c_in, h, w))
        counter = reference.FlopCounter()
        reference.attention_upsample(x, p, counter=counter)
        assert counter.total == fast.flops_attention_upsample(c_in, c_out, h, w, s, k)

    @pytest.mark.parametrize("c_in,c_out,h,w,s,k", [
        (2, 3, 3, 4, 2, 3),
        (1, 2, 4, 3, 3, 5),
        (3, 2, 2, 2, 1, 3),
    ])
    def test_deconv_formula_equals_instrumented_counter(self, c_in, c_out, h, w, s, k):
        p = reference.init_deconv_params(c_in, c_out, k, s, core.make_rng(420))
        x = core.make_rng(421).standard_normal((c_in, h, w))
        counter = reference.FlopCounter()
        reference.transposed_conv2d(x, p, counter=counter)
        assert counter.total == fast.flops_deconv(c_in, c_out, h, w, s, k)

    def test_attention_much_cheaper_than_deconv_at_scale(self):
        a = fast.flops_attention_upsample(32, 32, 128, 128, 2, 3)
        d = fast.flops_deconv(32, 32, 128, 128, 2, 3)
        assert a < d / 5


class TestBench:
    def test_records_and_csv(self, tmp_path):
        recs = fast.bench(
            ops=("attention_upsample_ref", "attention_upsample_fast"),
            shapes=((2, 4, 6, 5, 2, 3),),
            reps=20,
            threads=2,
            seed=7,
        )
        assert [r.op for r in recs] == ["attention_upsample_ref", "attention_upsample_fast"]
        ref, fst = recs
        assert ref.flops == fst.flops == fast.flops_attention_upsample(2, 4, 6, 5, 2, 3)
        assert fst.check == pytest.approx(ref.check, rel=1e-4)
        assert fst.threads == 2
        for r in recs:
            assert r.median_ns > 0
            assert r.gflops == pytest.approx(r.flops / r.median_ns)
        path = tmp_path / "bench.csv"
        fast.write_bench_csv(recs, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "op,Cin,Cout,H,W,S,K,threads,median_ns,flops,gflops,check"
        assert len(lines) == 3
        assert lines[1].startswith("attention_upsample_ref,2,4,6,5,2,3,1,")

    def test_rejects_too_few_reps(self):
        with pytest.raises(ValueError, match="20"):
            fast.bench(shapes=((2, 2, 2, 2, 2, 3),), reps=5)

    def test_rejects_unknown_op(self):
        with pytest.raises(ValueError, match="unknown"):
            fast.bench(ops=("nope",), shapes=((2, 2, 2, 2, 2, 3),))

    def test_checksums_reproducible(self):
        kw = dict(ops=("attention_upsample_fast",), shapes=((2, 2, 4, 4, 2, 3),), reps=20, seed=3)
        a = fast.bench(**kw)
        b = fast.bench(**kw)
        assert a[0].check == b[0].check
        assert a[0].flops == b[0].flops
