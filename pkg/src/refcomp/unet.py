"""Convolutional dual-stream denoiser.

Each block refines its input with a small ResNet stage, normalizes, runs
the stream-appropriate attention (self for the reference stream, mixture
for the background stream), adds the attention output residually, and
finishes with a ReLU feed-forward over tokens.  One parameter set serves
both streams; the reference stream is processed first and its per-block
normalized features are injected into the background stream's mixture
attention.

The stem downsamples to half resolution before the first block and the
head upsamples back, so block token counts stay desk-sized; blocks run at
half and quarter resolution with the configured channel widths.  All
internals are batched over samples; the public per-sample operations
promote to a singleton batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionParams, init_attention_params,
                        mixture_attention, self_attention)
from .engine import (Parameter, ShapeError, Tensor, add, avg_pool2x, concat,
                     conv2d, gelu, group_norm, layer_norm, matmul, relu,
                     upsample_nearest2x)
from .streams import (ReferenceInput, StreamRun, assemble_trace,
                      reference_stream_input, stack_stream_input,
                      timestep_embedding)


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 7
    out_channels: int = 3
    widths: tuple = (32, 64)
    depth: int = 8
    heads: int = 2
    temb_dim: int = 128
    t_max: int = 1000

    def __post_init__(self):
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        if self.depth > 1 and self.depth % 2:
            raise ShapeError("depth must be 1 or even so the decoder mirrors the encoder")
        if self.image_size % 4:
            raise ShapeError("image size must be divisible by 4")


def _conv_param(name: str, out_c: int, in_c: int, rng, zero: bool = False) -> Parameter:
    if zero:
        data = np.zeros((out_c, in_c, 3, 3))
    else:
        data = rng.normal(0.0, math.sqrt(2.0 / (in_c * 9)), (out_c, in_c, 3, 3))
    return Parameter(name, data.astype(np.float32))


def _linear_param(name: str, in_d: int, out_d: int, rng, zero: bool = False) -> Parameter:
    data = np.zeros((in_d, out_d)) if zero else rng.normal(0.0, 1.0 / math.sqrt(in_d), (in_d, out_d))
    return Parameter(name, data.astype(np.float32))


def _affine(name: str, c: int) -> tuple[Parameter, Parameter]:
    return (Parameter(f"{name}.g", np.ones(c, dtype=np.float32)),
            Parameter(f"{name}.b", np.zeros(c, dtype=np.float32)))


def to_tokens(x: Tensor) -> Tensor:
    if x.ndim == 4:
        n, c, h, w = x.shape
        return x.transpose((0, 2, 3, 1)).reshape(n, h * w, c)
    c, h, w = x.shape
    return x.transpose((1, 2, 0)).reshape(h * w, c)


def to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    if tokens.ndim == 3:
        n, _, c = tokens.shape
        return tokens.reshape(n, h, w, c).transpose((0, 3, 1, 2))
    c = tokens.shape[1]
    return tokens.reshape(h, w, c).transpose((2, 0, 1))


def _promote_map(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    return x, False


def _promote_temb(t_emb: Tensor) -> Tensor:
    return t_emb.reshape(1, *t_emb.shape) if t_emb.ndim == 2 else t_emb


class UNetBlockParams:
    """One dual-stream block: ResNet refinement, two layer norms, attention,
    and the token feed-forward.  The value projection and the second
    feed-forward matrix start at zero so a fresh block is the identity."""

    def __init__(self, name: str, channels: int, temb_dim: int, heads: int, rng):
        self.name = name
        self.channels = channels
        self.groups = math.gcd(8, channels)
        self.gn1 = _affine(f"{name}.gn1", channels)
        self.conv1 = _conv_param(f"{name}.conv1", channels, channels, rng)
        self.temb_proj = _linear_param(f"{name}.temb", temb_dim, channels, rng)
        self.gn2 = _affine(f"{name}.gn2", channels)
        self.conv2 = _conv_param(f"{name}.conv2", channels, channels, rng)
        self.ln1 = _affine(f"{name}.ln1", channels)
        self.attn = init_attention_params(channels, heads, rng, f"{name}.attn", zero_value=True)
        self.ln2 = _affine(f"{name}.ln2", channels)
        self.w1 = _linear_param(f"{name}.ff.w1", channels, 4 * channels, rng)
        self.w2 = _linear_param(f"{name}.ff.w2", 4 * channels, channels, rng, zero=True)

    def parameters(self):
        return [*self.gn1, self.conv1, self.temb_proj, *self.gn2, self.conv2,
                *self.ln1, *self.attn.parameters(), *self.ln2, self.w1, self.w2]


def resnet_refine(x: Tensor, t_emb: Tensor, p: UNetBlockParams) -> Tensor:
    x4, single = _promote_map(x)
    t3 = _promote_temb(t_emb)
    h = conv2d(gelu(group_norm(x4, *p.gn1, p.groups)), p.conv1)
    shift = matmul(t3, p.temb_proj).reshape(t3.shape[0], p.channels, 1, 1)
    h = add(h, shift)
    h = conv2d(gelu(group_norm(h, *p.gn2, p.groups)), p.conv2)
    out = add(x4, h)
    return out.reshape(*out.shape[1:]) if single else out


def attention_input(x: Tensor, t_emb: Tensor, p: UNetBlockParams) -> Tensor:
    """Post-refinement, post-norm tokens that feed the attention operator."""
    refined = resnet_refine(x, t_emb, p)
    return layer_norm(to_tokens(refined), *p.ln1)


def block_finish(x: Tensor, attn_tokens: Tensor, p: UNetBlockParams) -> Tensor:
    h, w = x.shape[-2:]
    hat = add(x, to_map(attn_tokens, h, w))
    tokens = to_tokens(hat)
    ff = matmul(relu(matmul(layer_norm(tokens, *p.ln2), p.w1)), p.w2)
    return to_map(add(tokens, ff), h, w)


def unet_block_forward(x_bg: Tensor, x_ref: Tensor, t_emb: Tensor,
                       p: UNetBlockParams):
    """Run one dual-stream block; returns both outputs and the attention features."""
    if x_bg.shape != x_ref.shape:
        raise ShapeError(f"stream shapes differ: {x_bg.shape} vs {x_ref.shape}")
    h, w = x_bg.shape[-2:]
    ref_tokens = attention_input(x_ref, t_emb, p)
    bg_tokens = attention_input(x_bg, t_emb, p)
    f_ref = self_attention(ref_tokens, p.attn)
    f_bg = mixture_attention(bg_tokens, ref_tokens, p.attn)
    y_ref = block_finish(x_ref, f_ref, p)
    y_bg = block_finish(x_bg, f_bg, p)
    trace = {"background": to_map(f_bg, h, w).data, "reference": to_map(f_ref, h, w).data}
    return y_bg, y_ref, trace


class UNetBackbone:
    """Depth-N dual-stream convolutional denoiser with mirrored skip wiring."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        w0, w1 = cfg.widths
        n = cfg.depth
        half = n // 2
        # Per-block resolution level: 1 = half res (width w0), 2 = quarter (w1).
        enc = [1 if i == 0 else 2 for i in range(half)] if n > 1 else [1]
        self.levels = enc + enc[::-1] if n > 1 else enc
        self.widths_per_block = [w0 if lv == 1 else w1 for lv in self.levels]
        # Mirrored skip pairs; the innermost encoder/decoder pair is skipless.
        self.skip_pairs = {n - 1 - i: i for i in range(max(0, half - 1))}
        self.layer_ids = self._layer_ids()

        self.temb_w1 = _linear_param("temb.w1", cfg.temb_dim, cfg.temb_dim, rng)
        self.temb_w2 = _linear_param("temb.w2", cfg.temb_dim, cfg.temb_dim, rng)
        self.conv_in = _conv_param("conv_in", w0, cfg.in_channels, rng)
        self.blocks = [UNetBlockParams(f"block{i}", self.widths_per_block[i],
                                       cfg.temb_dim, cfg.heads, rng)
                       for i in range(n)]
        self.downs: dict[int, Parameter] = {}
        self.ups: dict[int, Parameter] = {}
        self.fuses: dict[int, Parameter] = {}
        for i in range(1, n):
            prev, cur = self.levels[i - 1], self.levels[i]
            if cur > prev:
                self.downs[i] = _conv_param(f"down{i}", w1, w0, rng)
            elif cur < prev:
                self.ups[i] = _conv_param(f"up{i}", w0, w1, rng)
        for j in self.skip_pairs:
            wj = self.widths_per_block[j]
            self.fuses[j] = _conv_param(f"fuse{j}", wj, 2 * wj, rng)
        self.gn_out = _affine("gn_out", w0)
        self.conv_out = _conv_param("conv_out", cfg.out_channels, w0, rng, zero=True)

    def _layer_ids(self):
        n = len(self.levels)
        if n == 1:
            return ["m0"]
        half = n // 2
        ids = [f"d{i}" for i in range(half - 1)] + ["m0", "m1"]
        ids += [f"u{i}" for i in range(half - 1)]
        return ids

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def parameters(self):
        out = [self.temb_w1, self.temb_w2, self.conv_in]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend(self.downs.values())
        out.extend(self.ups.values())
        out.extend(self.fuses.values())
        out.extend([*self.gn_out, self.conv_out])
        return out

    def embed_timesteps(self, ts) -> Tensor:
        rows = np.stack([timestep_embedding(t, self.cfg.temb_dim) for t in np.atleast_1d(ts)])
        base = Tensor(rows[:, None, :])
        return matmul(gelu(matmul(base, self.temb_w1)), self.temb_w2)

    def embed_timestep(self, t: float) -> Tensor:
        return self.embed_timesteps([t]).reshape(1, self.cfg.temb_dim)

    def validate_timestep(self, t) -> None:
        if not 0 <= t <= self.cfg.t_max:
            raise ValueError(f"timestep {t} outside schedule domain [0, {self.cfg.t_max}]")

    def run_stream(self, inp: Tensor, t_emb: Tensor,
                   injected: list | None = None) -> StreamRun:
        """Push one batched stream (N, in_channels, H, W) through the stack.

        ``injected`` carries the reference stream's per-block normalized
        tokens; when absent every block falls back to self-attention.
        """
        if inp.ndim != 4 or inp.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) input, got {inp.shape}")
        t_emb = _promote_temb(t_emb)
        x = avg_pool2x(conv2d(inp, self.conv_in))
        skips: dict[int, Tensor] = {}
        attn_inputs, attn_feats, block_outs = [], [], []
        for i, p in enumerate(self.blocks):
            if i in self.downs:
                x = conv2d(avg_pool2x(x), self.downs[i])
            elif i in self.ups:
                x = conv2d(upsample_nearest2x(x), self.ups[i])
            if i in self.skip_pairs:
                x = conv2d(concat([x, skips.pop(self.skip_pairs[i])], axis=1), self.fuses[i])
            h, w = x.shape[-2:]
            tokens = attention_input(x, t_emb, p)
            if injected is None:
                f = self_attention(tokens, p.attn)
            else:
                f = mixture_attention(tokens, injected[i], p.attn)
            x = block_finish(x, f, p)
            if i in self.skip_pairs.values():
                skips[i] = x
            attn_inputs.append(tokens)
            attn_feats.append(to_map(f, h, w))
            block_outs.append(x)
        out = conv2d(gelu(group_norm(upsample_nearest2x(x), *self.gn_out,
                                     math.gcd(8, self.cfg.widths[0]))), self.conv_out)
        return StreamRun(out, attn_inputs, attn_feats, block_outs)

    def block_grids(self):
        full = self.cfg.image_size
        return [(full // 2, full // 2) if lv == 1 else (full // 4, full // 4)
                for lv in self.levels]


def build_unet(cfg: UNetConfig, seed: int) -> UNetBackbone:
    return UNetBackbone(cfg, np.random.default_rng(seed))


def unet_forward(noisy: np.ndarray, mask: np.ndarray, masked_bg: np.ndarray,
                 ref_input: ReferenceInput | None, t, bb: UNetBackbone):
    """Denoise one sample with the shared backbone; returns the noise
    prediction tensor and the per-block dual-stream trace."""
    bb.validate_timestep(t)
    if noisy.shape[1] != bb.cfg.image_size or noisy.shape[2] != bb.cfg.image_size:
        raise ShapeError(f"expected {bb.cfg.image_size}px input, got {noisy.shape}")
    t_emb = bb.embed_timesteps([t])
    ref_run = None
    if ref_input is not None:
        ref_run = bb.run_stream(reference_stream_input(ref_input), t_emb, None)
    bg_run = bb.run_stream(stack_stream_input(noisy, mask, masked_bg), t_emb,
                           ref_run.attn_inputs if ref_run is not None else None)
    trace = assemble_trace("unet", bb.layer_ids, bb.block_grids(), bg_run, ref_run)
    eps = bg_run.output
    return eps.reshape(*eps.shape[1:]), trace
