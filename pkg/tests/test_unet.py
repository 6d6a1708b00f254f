"""Convolutional backbone: block identities, compositional oracle, gradients."""

import numpy as np
import pytest

from refcomp.attention import StreamTag, mixture_attention, self_attention
from refcomp.engine import (ShapeError, Tensor, avg_pool2x, check_gradients,
                            conv2d, gelu, group_norm, mean_all, mul, sum_all,
                            upsample_nearest2x)
from refcomp.streams import ReferenceInput, reference_stream_input, stack_stream_input
from refcomp.unet import (UNetBackbone, UNetBlockParams, UNetConfig,
                          attention_input, block_finish, build_unet, to_map,
                          to_tokens, unet_block_forward, unet_forward)


def tiny_cfg(**kw):
    defaults = dict(image_size=8, widths=(8, 16), depth=2, heads=2,
                    temb_dim=16, t_max=100)
    defaults.update(kw)
    return UNetConfig(**defaults)


def rand_block(channels=4, temb_dim=8, heads=2, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    p = UNetBlockParams("blk", channels, temb_dim, heads, rng)
    for w in p.parameters():
        w.data = w.data.astype(dtype)
    return p


def rand_inputs(channels=4, hw=3, temb_dim=8, seed=1, dtype=np.float64):
    rng = np.random.default_rng(seed)
    x_bg = Tensor(rng.normal(size=(channels, hw, hw)).astype(dtype))
    x_ref = Tensor(rng.normal(size=(channels, hw, hw)).astype(dtype))
    temb = Tensor(rng.normal(size=(1, temb_dim)).astype(dtype))
    return x_bg, x_ref, temb


class TestBlock:
    def test_zero_value_and_ff_projections_make_identity(self):
        p = rand_block()
        x_bg, x_ref, temb = rand_inputs()
        # These start at zero by construction; assert rather than assume.
        np.testing.assert_array_equal(p.attn.w_v.data, 0)
        np.testing.assert_array_equal(p.w2.data, 0)
        y_bg, y_ref, _ = unet_block_forward(x_bg, x_ref, temb, p)
        np.testing.assert_array_equal(y_bg.data, x_bg.data)
        np.testing.assert_array_equal(y_ref.data, x_ref.data)

    def test_output_shapes_match_inputs(self):
        p = rand_block(channels=8, seed=3)
        for hw in (2, 4, 5):
            x_bg, x_ref, temb = rand_inputs(channels=8, hw=hw, seed=hw)
            y_bg, y_ref, trace = unet_block_forward(x_bg, x_ref, temb, p)
            assert y_bg.shape == x_bg.shape
            assert y_ref.shape == x_ref.shape
            assert trace["background"].shape == x_bg.shape

    def test_stream_shape_mismatch_rejected(self):
        p = rand_block()
        x_bg, _, temb = rand_inputs()
        with pytest.raises(ShapeError):
            unet_block_forward(x_bg, Tensor(np.zeros((4, 2, 2))), temb, p)

    def test_block_gradients(self):
        p = rand_block(seed=4)
        rng = np.random.default_rng(5)
        for w in p.parameters():  # zero-init tensors would hide wiring bugs
            w.data = rng.normal(0, 0.3, w.data.shape)
        x_bg, x_ref, temb = rand_inputs(seed=6)

        def loss(b, r, t):
            y_bg, y_ref, _ = unet_block_forward(b, r, t, p)
            return sum_all(mul(y_bg, y_bg)) + sum_all(mul(y_ref, y_ref))

        report = check_gradients(loss, [x_bg, x_ref, temb])
        assert report.ok, report


class TestBackbonePlan:
    def test_depth_eight_layout(self):
        bb = build_unet(UNetConfig(), seed=0)
        assert bb.levels == [1, 2, 2, 2, 2, 2, 2, 1]
        assert bb.layer_ids == ["d0", "d1", "d2", "m0", "m1", "u0", "u1", "u2"]
        assert bb.skip_pairs == {7: 0, 6: 1, 5: 2}
        assert set(bb.downs) == {1} and set(bb.ups) == {7}

    def test_odd_depth_rejected(self):
        with pytest.raises(ShapeError):
            UNetConfig(depth=3)

    def test_single_block_plan(self):
        bb = build_unet(tiny_cfg(depth=1), seed=0)
        assert bb.levels == [1]
        assert bb.layer_ids == ["m0"]


class TestForward:
    def sample_inputs(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        size = cfg.image_size
        noisy = rng.normal(size=(3, size, size)).astype(np.float32)
        mask = (rng.random((size, size)) > 0.3).astype(np.float32)
        masked = (mask * rng.random((3, size, size))).astype(np.float32)
        ref_img = rng.normal(size=(3, size, size)).astype(np.float32)
        ref_mask = (rng.random((size, size)) > 0.5).astype(np.float32)
        return noisy, mask, masked, ReferenceInput(ref_img * ref_mask, ref_mask)

    def test_output_shape_and_determinism(self):
        cfg = tiny_cfg()
        bb = build_unet(cfg, seed=1)
        noisy, mask, masked, ref = self.sample_inputs(cfg)
        eps1, trace = unet_forward(noisy, mask, masked, ref, 5, bb)
        eps2, _ = unet_forward(noisy, mask, masked, ref, 5, bb)
        assert eps1.shape == noisy.shape
        np.testing.assert_array_equal(eps1.data, eps2.data)
        assert len(trace) == cfg.depth

    def test_timestep_out_of_range(self):
        cfg = tiny_cfg()
        bb = build_unet(cfg, seed=1)
        noisy, mask, masked, ref = self.sample_inputs(cfg)
        with pytest.raises(ValueError):
            unet_forward(noisy, mask, masked, ref, cfg.t_max + 1, bb)

    def test_empty_reference_matches_reference_free(self):
        cfg = tiny_cfg()
        bb = build_unet(cfg, seed=2)
        rng = np.random.default_rng(17)
        for w in bb.parameters():  # break zero inits so attention matters
            w.data = rng.normal(0, 0.2, w.data.shape).astype(np.float32)
        noisy, mask, masked, _ = self.sample_inputs(cfg)
        temb = bb.embed_timesteps([3])
        from refcomp.streams import stack_stream_input
        stacked = stack_stream_input(noisy, mask, masked)
        free = bb.run_stream(stacked, temb, injected=None)
        # Zero reference tokens per block: mixture attention must reduce to
        # plain self-attention inpainting with identical outputs.
        empty_tokens = [Tensor(np.zeros((1, 0, w), np.float32))
                        for w in bb.widths_per_block]
        emptied = bb.run_stream(stacked, temb, injected=empty_tokens)
        np.testing.assert_array_equal(emptied.output.data, free.output.data)

    def test_reference_free_trace_has_no_reference_stream(self):
        cfg = tiny_cfg()
        bb = build_unet(cfg, seed=2)
        noisy, mask, masked, _ = self.sample_inputs(cfg)
        eps_free, trace_free = unet_forward(noisy, mask, masked, None, 3, bb)
        assert StreamTag.REFERENCE not in trace_free.blocks[0].features
        assert eps_free.shape == noisy.shape

    def test_one_block_forward_matches_hand_composed_pipeline(self):
        cfg = tiny_cfg(depth=1)
        bb = build_unet(cfg, seed=3)
        rng = np.random.default_rng(4)
        for w in bb.parameters():  # break the zero-init so attention matters
            w.data = rng.normal(0, 0.2, w.data.shape).astype(np.float32)
        noisy, mask, masked, ref = self.sample_inputs(cfg, seed=5)

        got, _ = unet_forward(noisy, mask, masked, ref, 7, bb)

        temb = bb.embed_timestep(7)
        p = bb.blocks[0]
        x_ref = avg_pool2x(conv2d(reference_stream_input(ref), bb.conv_in))
        x_bg = avg_pool2x(conv2d(stack_stream_input(noisy, mask, masked), bb.conv_in))
        ref_tokens = attention_input(x_ref, temb, p)
        bg_tokens = attention_input(x_bg, temb, p)
        f_bg = mixture_attention(bg_tokens, ref_tokens, p.attn)
        y_bg = block_finish(x_bg, f_bg, p)
        import math
        expect = conv2d(gelu(group_norm(upsample_nearest2x(y_bg), *bb.gn_out,
                                        math.gcd(8, cfg.widths[0]))), bb.conv_out)
        assert np.abs(got.data - expect.data).max() < 1e-6

    def test_trace_entries_carry_both_streams(self):
        cfg = tiny_cfg()
        bb = build_unet(cfg, seed=6)
        noisy, mask, masked, ref = self.sample_inputs(cfg)
        _, trace = unet_forward(noisy, mask, masked, ref, 2, bb)
        for block in trace.blocks:
            assert StreamTag.BACKGROUND in block.features
            assert StreamTag.REFERENCE in block.features
            assert StreamTag.BACKGROUND in block.outputs

    def test_parameter_count_matches_single_stream_backbone(self):
        bb = build_unet(UNetConfig(), seed=7)
        names = bb.named_parameters()
        assert len(names) == len(bb.parameters())
        assert not any(n.startswith("ref.") for n in names)

    def test_tokens_round_trip(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        back = to_map(to_tokens(x), 4, 5)
        np.testing.assert_array_equal(back.data, x.data)
