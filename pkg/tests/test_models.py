"""Network-level tests.

The joint network is held against a straight-line numpy transcription of
its step recipe (dense brute-force attention included); the checkpoint
format is held against hand-built byte strings parsed and produced
independently of the implementation.
"""

import struct

import numpy as np
import pytest

import oracles
from attnup import autodiff, core, models


def relu_np(x):
    return np.maximum(x, 0)


def build64(build, spec, seed):
    return build(spec, core.make_rng(seed), dtype=np.float64)


TINY_JOINT = dict(cnn_t=(6, 4), cnn_g=(5, 4), cnn_m=(8,), cnn_f=(6,))


# ---------------------------------------------------------------------------
# specs and parameter manifests


class TestSisrSpec:
    def test_blocks_follow_factor(self):
        assert models.SisrSpec(upsample_factor=2).n_blocks == 1
        assert models.SisrSpec(upsample_factor=4).n_blocks == 2
        assert models.SisrSpec(upsample_factor=8).n_blocks == 3

    @pytest.mark.parametrize("factor", [0, 1, 3, 6, 12])
    def test_factor_must_be_power_of_two(self, factor):
        with pytest.raises(ValueError):
            models.SisrSpec(upsample_factor=factor)

    def test_attention_needs_even_features(self):
        with pytest.raises(ValueError):
            models.SisrSpec(features=5)
        models.SisrSpec(features=5, block_kind="deconv")  # fine without attention

    def test_attention_needs_wide_enough_kernel(self):
        with pytest.raises(ValueError):
            models.SisrSpec(up_kernel=1)
        models.SisrSpec(up_kernel=1, block_kind="deconv")

    def test_unknown_block_kind(self):
        with pytest.raises(ValueError):
            models.SisrSpec(block_kind="bilinear")

    def test_swapping_block_kind_changes_only_upsampling_layers(self):
        attn = dict(models.sisr_param_shapes(models.SisrSpec(upsample_factor=4)))
        dec = dict(models.sisr_param_shapes(models.SisrSpec(upsample_factor=4, block_kind="deconv")))
        common_a = {n: s for n, s in attn.items() if ".up." not in n}
        common_d = {n: s for n, s in dec.items() if ".up." not in n}
        assert common_a == common_d
        assert any(".up." in n for n in attn) and any(".up." in n for n in dec)

    @pytest.mark.parametrize("factor", [2, 4, 8])
    def test_attention_variant_has_fewer_params(self, factor):
        attn = models.count_sisr_params(models.SisrSpec(upsample_factor=factor, features=32))
        dec = models.count_sisr_params(
            models.SisrSpec(upsample_factor=factor, features=32, block_kind="deconv")
        )
        assert attn < dec

    def test_count_matches_built_buffers(self):
        spec = models.SisrSpec(upsample_factor=4, features=6)
        params = models.build_sisr_params(spec, core.make_rng(0))
        assert models.count_sisr_params(spec) == sum(p.value.size for p in params.values())

    def test_prelu_slot_type_and_init(self):
        params = models.build_sisr_params(models.SisrSpec(features=4), core.make_rng(0))
        slot = params["stem.prelu"]
        assert isinstance(slot, models.PReLUParam)
        np.testing.assert_array_equal(slot.value, np.full(4, 0.25, np.float32))

    def test_prelu_param_rejects_matrix(self):
        with pytest.raises(ValueError):
            models.PReLUParam("p", np.zeros((2, 2)))

    def test_init_is_seed_deterministic(self):
        spec = models.SisrSpec(features=4)
        a = models.build_sisr_params(spec, core.make_rng(7))
        b = models.build_sisr_params(spec, core.make_rng(7))
        for name in a:
            np.testing.assert_array_equal(a[name].value, b[name].value)


class TestJointSpec:
    def test_steps_follow_factor(self):
        assert models.JointSpec(upsample_factor=2, **TINY_JOINT).n_steps == 1
        assert models.JointSpec(upsample_factor=8, **TINY_JOINT).n_steps == 3

    def test_mixer_output_must_split_into_four(self):
        with pytest.raises(ValueError):
            models.JointSpec(cnn_m=(10,))

    def test_presets_match_published_widths(self):
        spec = models.joint_preset("SA_M1_F8")
        assert spec.cnn_t == (96, 48, 8) and spec.cnn_m == (16,) and spec.cnn_f == (16, 16)
        assert spec.qk_channels == 8
        assert models.joint_preset("SA_M2_F32").cnn_m == (64, 64)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            models.joint_preset("SA_M9_F1")

    def test_shared_mixer_draws_one_stack(self):
        base = dict(TINY_JOINT)
        unshared = dict(models.joint_param_shapes(models.JointSpec(upsample_factor=4, **base)))
        shared = dict(models.joint_param_shapes(models.JointSpec(upsample_factor=4, share_mixer=True, **base)))
        assert "step1.mixer.0.w" in unshared and "step2.mixer.0.w" in unshared
        assert "mixer.0.w" in shared and "step1.mixer.0.w" not in shared
        # positional tables stay per step either way
        assert "step2.pos_x" in shared
        assert sum(np.prod(s) for s in shared.values()) < sum(np.prod(s) for s in unshared.values())

    def test_count_matches_built_buffers(self):
        spec = models.JointSpec(upsample_factor=4, **TINY_JOINT)
        params = models.build_joint_params(spec, core.make_rng(0))
        assert models.count_joint_params(spec) == sum(p.value.size for p in params.values())


# ---------------------------------------------------------------------------
# super-resolution forward


class TestSisrForward:
    @pytest.mark.parametrize("factor", [2, 4, 8])
    @pytest.mark.parametrize("kind", ["attention", "deconv"])
    def test_output_shape(self, factor, kind):
        spec = models.SisrSpec(upsample_factor=factor, features=4, block_kind=kind)
        params = models.build_sisr_params(spec, core.make_rng(0))
        x = core.make_rng(1).standard_normal((1, 6, 7)).astype(np.float32)
        out = models.sisr_forward(x, spec, params)
        assert out.value.shape == (1, factor * 6, factor * 7)

    @pytest.mark.parametrize("kind", ["attention", "deconv"])
    def test_zero_weights_give_zero_output(self, kind):
        spec = models.SisrSpec(features=4, block_kind=kind)
        params = models.build_sisr_params(spec, core.make_rng(0))
        for p in params.values():
            p.value[...] = 0
        out = models.sisr_forward(np.ones((1, 6, 6), np.float32), spec, params)
        assert out.value.shape == (1, 12, 12)
        np.testing.assert_array_equal(out.value, 0)

    def test_zeroed_residual_block_is_identity_around_upsampling(self):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(3), dtype=np.float64)
        params["block1.res1.w"].value[...] = 0
        params["block1.res2.w"].value[...] = 0
        x = core.make_rng(4).standard_normal((1, 6, 6))
        got = models.sisr_forward(x, spec, params).value
        # same params, block skipped by hand
        h = autodiff.conv2d(x, params["stem.w"], 2)
        h = autodiff.prelu(h, params["stem.prelu"])
        h = autodiff.attention_upsample(
            h,
            params["block1.up.w_q"], params["block1.up.w_k"], params["block1.up.w_v"],
            params["block1.up.pos_x"], params["block1.up.pos_y"],
            spec.up_kernel, 2,
        )
        want = autodiff.conv2d(h, params["head.w"], 1).value
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_rejects_wrong_channel_count(self):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(0))
        with pytest.raises(ValueError):
            models.sisr_forward(np.zeros((3, 8, 8), np.float32), spec, params)

    def test_rejects_input_smaller_than_stem(self):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(0))
        with pytest.raises(ValueError):
            models.sisr_forward(np.zeros((1, 4, 8), np.float32), spec, params)

    @pytest.mark.parametrize("kind", ["attention", "deconv"])
    def test_single_block_micro_gradients(self, kind):
        spec = models.SisrSpec(features=4, block_kind=kind)
        params = build64(models.build_sisr_params, spec, 5)
        rng = core.make_rng(6)
        x = rng.standard_normal((1, 8, 8))
        target = rng.standard_normal((1, 16, 16))

        def make_loss(tape):
            out = models.sisr_forward(x, spec, params, tape)
            return autodiff.mse(out, target, tape)

        results = autodiff.finite_diff_check(make_loss, list(params.values()))
        for r in results:
            assert r.ok, f"{r.name}: max rel err {r.max_rel_err:.3e} at {r.worst_index}"


# ---------------------------------------------------------------------------
# joint forward


def joint_transcription(target, guide, spec, params):
    """Straight-line numpy rendition of the stepwise upsampling recipe."""
    pad = (spec.conv_kernel - 1) // 2

    def stack(x, prefix, n):
        for j in range(n):
            x = relu_np(core.conv2d(x, params[f"{prefix}.{j}.w"].value, pad))
        return x

    v = stack(target, "cnn_t", len(spec.cnn_t))
    y_hr = stack(guide, "cnn_g", len(spec.cnn_g))
    fqk = spec.qk_channels
    scale = 1.0 / np.sqrt(fqk) if spec.scale_logits else 1.0
    for i in range(1, spec.n_steps + 1):
        f = spec.upsample_factor >> i
        c, gh, gw = y_hr.shape
        y_ds = y_hr.reshape(c, gh // f, f, gw // f, f).mean(axis=(2, 4))
        v_zu = oracles.zero_up(v, 2)
        mixed = stack(np.concatenate([v_zu, y_ds], axis=0), "mixer" if spec.share_mixer else f"step{i}.mixer", len(spec.cnn_m))
        q = mixed[:fqk]
        k_up = np.zeros_like(mixed[fqk:2 * fqk])
        k_up[:, ::2, ::2] = mixed[fqk:2 * fqk, ::2, ::2]
        v_up = oracles.zero_up(v, 2)
        valid = np.zeros(v_zu.shape[1:], bool)
        valid[::2, ::2] = True
        a = oracles.masked_attention_brute(
            q, k_up, v_up, valid,
            params[f"step{i}.pos_x"].value, params[f"step{i}.pos_y"].value,
            spec.attn_kernel, scale,
        )
        v = relu_np(a)
    out = stack(v, "cnn_f", len(spec.cnn_f))
    return core.conv2d(out, params["cnn_f.out.w"].value, pad)


class TestJointForward:
    def test_matches_straight_line_transcription(self):
        spec = models.JointSpec(upsample_factor=4, **TINY_JOINT)
        params = build64(models.build_joint_params, spec, 11)
        rng = core.make_rng(12)
        target = rng.standard_normal((1, 4, 4))
        guide = rng.standard_normal((3, 16, 16))
        got = models.joint_forward(target, guide, spec, params).value
        want = joint_transcription(target, guide, spec, params)
        assert got.shape == (1, 16, 16)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_shared_mixer_matches_transcription(self):
        spec = models.JointSpec(upsample_factor=4, share_mixer=True, **TINY_JOINT)
        params = build64(models.build_joint_params, spec, 13)
        rng = core.make_rng(14)
        target = rng.standard_normal((1, 3, 5))
        guide = rng.standard_normal((3, 12, 20))
        got = models.joint_forward(target, guide, spec, params).value
        np.testing.assert_allclose(got, joint_transcription(target, guide, spec, params), rtol=1e-10, atol=1e-12)

    def test_single_step_runs_at_output_resolution(self):
        spec = models.JointSpec(upsample_factor=2, **TINY_JOINT)
        params = models.build_joint_params(spec, core.make_rng(0))
        trace = []
        out = models.joint_forward(
            np.zeros((1, 5, 6), np.float32), np.zeros((3, 10, 12), np.float32),
            spec, params, trace=trace,
        )
        assert out.value.shape == (1, 10, 12)
        assert len(trace) == 1
        assert trace[0]["guide_shape"][1:] == (10, 12)
        assert trace[0]["value_shape"][1:] == (10, 12)

    def test_guide_seen_at_each_step_resolution(self):
        spec = models.JointSpec(upsample_factor=8, **TINY_JOINT)
        params = models.build_joint_params(spec, core.make_rng(0))
        trace = []
        models.joint_forward(
            np.zeros((1, 3, 3), np.float32), np.zeros((3, 24, 24), np.float32),
            spec, params, trace=trace,
        )
        guide_sizes = [t["guide_shape"][1:] for t in trace]
        assert guide_sizes == [(6, 6), (12, 12), (24, 24)]
        for t in trace:
            assert t["guide_shape"][1:] == t["value_shape"][1:]

    def test_flat_queries_average_the_valid_window(self):
        # zeroed mixer and positional tables make every unmasked logit
        # equal, so each output pixel averages the lattice values in reach
        spec = models.JointSpec(upsample_factor=2, **TINY_JOINT)
        params = build64(models.build_joint_params, spec, 21)
        for name, p in params.items():
            if "mixer" in name or "pos_" in name:
                p.value[...] = 0
        rng = core.make_rng(22)
        target = rng.standard_normal((1, 4, 4))
        guide = rng.standard_normal((3, 8, 8))
        got = models.joint_forward(target, guide, spec, params).value

        pad = (spec.conv_kernel - 1) // 2
        v = target
        for j in range(len(spec.cnn_t)):
            v = relu_np(core.conv2d(v, params[f"cnn_t.{j}.w"].value, pad))
        r = (spec.attn_kernel - 1) // 2
        mean_map = np.zeros((v.shape[0], 8, 8))
        for i in range(8):
            for j in range(8):
                cols = []
                for a in range(i - r, i + r + 1):
                    for b in range(j - r, j + r + 1):
                        if 0 <= a < 8 and 0 <= b < 8 and a % 2 == 0 and b % 2 == 0:
                            cols.append(v[:, a // 2, b // 2])
                mean_map[:, i, j] = np.mean(cols, axis=0)
        out = relu_np(mean_map)
        for j in range(len(spec.cnn_f)):
            out = relu_np(core.conv2d(out, params[f"cnn_f.{j}.w"].value, pad))
        want = core.conv2d(out, params["cnn_f.out.w"].value, pad)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_rejects_mismatched_guide(self):
        spec = models.JointSpec(upsample_factor=4, **TINY_JOINT)
        params = models.build_joint_params(spec, core.make_rng(0))
        with pytest.raises(ValueError):
            models.joint_forward(np.zeros((1, 4, 4), np.float32), np.zeros((3, 8, 8), np.float32), spec, params)
        with pytest.raises(ValueError):
            models.joint_forward(np.zeros((2, 4, 4), np.float32), np.zeros((3, 16, 16), np.float32), spec, params)


class TestDownsample:
    def test_factor_one_is_identity(self):
        x = core.make_rng(0).standard_normal((2, 4, 4))
        np.testing.assert_array_equal(models.downsample(x, 1), x)

    def test_constant_stays_constant(self):
        np.testing.assert_allclose(models.downsample(np.full((1, 8, 8), 3.5), 4), np.full((1, 2, 2), 3.5))

    def test_four_pixel_mean(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_allclose(models.downsample(x, 2), [[[2.5]]])

    def test_rejects_non_divisible(self):
        with pytest.raises(ValueError):
            models.downsample(np.zeros((1, 5, 4)), 2)


# ---------------------------------------------------------------------------
# checkpoints


class TestCheckpoints:
    def test_roundtrip_is_exact(self, tmp_path):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(9))
        path = tmp_path / "model.atup"
        models.save_checkpoint(path, params)
        loaded = models.load_checkpoint(path)
        assert list(loaded) == list(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name].value)
            assert loaded[name].dtype == np.float32

    def test_file_layout_parses_by_hand(self, tmp_path):
        params = {
            "a.w": autodiff.ParamSlot("a.w", np.arange(6, dtype=np.float32).reshape(2, 3)),
            "b": autodiff.ParamSlot("b", np.array([7.0], np.float32)),
        }
        path = tmp_path / "two.atup"
        models.save_checkpoint(path, params)
        raw = path.read_bytes()
        assert raw[:5] == b"ATUP1"
        assert struct.unpack("<I", raw[5:9]) == (2,)
        pos = 9
        seen = []
        for _ in range(2):
            (n,) = struct.unpack("<H", raw[pos:pos + 2]); pos += 2
            name = raw[pos:pos + n].decode(); pos += n
            (rank,) = struct.unpack("<B", raw[pos:pos + 1]); pos += 1
            shape = struct.unpack(f"<{rank}I", raw[pos:pos + 4 * rank]); pos += 4 * rank
            seen.append((name, shape))
        assert seen == [("a.w", (2, 3)), ("b", (1,))]
        data = np.frombuffer(raw[pos:], dtype="<f4")
        np.testing.assert_array_equal(data, np.r_[np.arange(6.0), 7.0].astype(np.float32))

    def test_load_hand_built_bytes(self, tmp_path):
        vals = np.arange(6, dtype="<f4")
        blob = (
            b"ATUP1" + struct.pack("<I", 1)
            + struct.pack("<H", 3) + b"a.w" + struct.pack("<B", 2) + struct.pack("<II", 2, 3)
            + vals.tobytes()
        )
        path = tmp_path / "hand.atup"
        path.write_bytes(blob)
        got = models.load_checkpoint(path)
        np.testing.assert_array_equal(got["a.w"], vals.reshape(2, 3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.atup"
        path.write_bytes(b"BTUP1" + b"\x00" * 16)
        with pytest.raises(models.CheckpointError, match="magic"):
            models.load_checkpoint(path)

    def test_truncations_are_reported(self, tmp_path):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(1))
        path = tmp_path / "model.atup"
        models.save_checkpoint(path, params)
        raw = path.read_bytes()
        for cut in (3, 20, len(raw) - 5):
            clipped = tmp_path / f"cut{cut}.atup"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(models.CheckpointError, match="truncated"):
                models.load_checkpoint(clipped)

    def test_trailing_bytes_are_rejected(self, tmp_path):
        params = {"w": autodiff.ParamSlot("w", np.zeros(2, np.float32))}
        path = tmp_path / "pad.atup"
        models.save_checkpoint(path, params)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(models.CheckpointError, match="trailing"):
            models.load_checkpoint(path)

    def test_duplicate_names_are_rejected(self, tmp_path):
        one = struct.pack("<H", 1) + b"w" + struct.pack("<B", 1) + struct.pack("<I", 1)
        blob = b"ATUP1" + struct.pack("<I", 2) + one + one + np.zeros(2, "<f4").tobytes()
        path = tmp_path / "dup.atup"
        path.write_bytes(blob)
        with pytest.raises(models.CheckpointError, match="duplicate"):
            models.load_checkpoint(path)

    def test_load_into_restores_values(self, tmp_path):
        spec = models.SisrSpec(features=4)
        params = models.build_sisr_params(spec, core.make_rng(2))
        saved = {n: p.value.copy() for n, p in params.items()}
        path = tmp_path / "model.atup"
        models.save_checkpoint(path, params)
        for p in params.values():
            p.value[...] += 1
        models.load_into(params, path)
        for name in params:
            np.testing.assert_array_equal(params[name].value, saved[name])

    def test_load_into_rejects_other_model(self, tmp_path):
        small = models.build_sisr_params(models.SisrSpec(features=4), core.make_rng(0))
        wide = models.build_sisr_params(models.SisrSpec(features=6), core.make_rng(0))
        deep = models.build_sisr_params(models.SisrSpec(features=4, upsample_factor=4), core.make_rng(0))
        path = tmp_path / "small.atup"
        models.save_checkpoint(path, small)
        with pytest.raises(models.CheckpointError, match="shape"):
            models.load_into(wide, path)
        with pytest.raises(models.CheckpointError, match="names"):
            models.load_into(deep, path)
