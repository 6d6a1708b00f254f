"""Token-sequence dual-stream denoiser with AdaLN-Zero modulation.

Blocks run attention and an MLP in parallel on the same modulated input,
fuse the two branches through a shared output projection, and add the
result through a gated residual.  The gate comes from a zero-initialized
modulation head, so a fresh backbone is the identity on its token trunk.
Internals are batched over samples; the public per-sample operations
promote to a singleton batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionParams, init_attention_params,
                        mixture_attention, self_attention)
from .engine import (Parameter, ShapeError, Tensor, add, concat, gelu,
                     layer_norm, matmul, mul)
from .streams import (ReferenceInput, StreamRun, assemble_trace,
                      reference_stream_input, stack_stream_input,
                      timestep_embedding)


@dataclass(frozen=True)
class DiTConfig:
    image_size: int = 32
    patch: int = 4
    in_channels: int = 7
    out_channels: int = 3
    width: int = 64
    depth: int = 8
    heads: int = 2
    temb_dim: int = 128
    t_max: int = 1000

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch}")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2


def patchify(img: Tensor, patch: int) -> Tensor:
    """Flatten non-overlapping patches in raster order.

    (C,H,W) -> (T, C*patch^2); a batched (N,C,H,W) input keeps its batch dim.
    """
    h, w = img.shape[-2:]
    if h % patch or w % patch:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    if img.ndim == 4:
        n, c = img.shape[:2]
        x = img.reshape(n, c, gh, patch, gw, patch)
        return x.transpose((0, 2, 4, 1, 3, 5)).reshape(n, gh * gw, c * patch * patch)
    c = img.shape[0]
    x = img.reshape(c, gh, patch, gw, patch)
    return x.transpose((1, 3, 0, 2, 4)).reshape(gh * gw, c * patch * patch)


def unpatchify(tokens: Tensor, patch: int, c: int, h: int, w: int) -> Tensor:
    gh, gw = h // patch, w // patch
    if tokens.shape[-2:] != (gh * gw, c * patch * patch):
        raise ShapeError(
            f"token block {tokens.shape} inconsistent with {c}x{h}x{w} at patch {patch}")
    if tokens.ndim == 3:
        n = tokens.shape[0]
        x = tokens.reshape(n, gh, gw, c, patch, patch)
        return x.transpose((0, 3, 1, 4, 2, 5)).reshape(n, c, h, w)
    x = tokens.reshape(gh, gw, c, patch, patch)
    return x.transpose((2, 0, 3, 1, 4)).reshape(c, h, w)


def sincos_position_table(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos positional table for a square token grid."""
    if dim % 4:
        raise ShapeError("positional width must be divisible by 4")
    half = dim // 2
    quarter = half // 2
    freqs = 10000.0 ** (-np.arange(quarter, dtype=np.float64) / quarter)
    coords = np.arange(grid, dtype=np.float64)
    angles = coords[:, None] * freqs[None, :]
    axis = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)  # (grid, half)
    rows = np.repeat(axis, grid, axis=0)            # token (i, j) -> row i
    cols = np.tile(axis, (grid, 1))                 # token (i, j) -> col j
    return np.concatenate([rows, cols], axis=1).astype(np.float32)


def _promote_tokens(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _promote_temb(t_emb: Tensor) -> Tensor:
    return t_emb.reshape(1, *t_emb.shape) if t_emb.ndim == 2 else t_emb


class DiTBlockParams:
    """AdaLN-Zero modulation, attention, parallel MLP, shared output projection."""

    def __init__(self, name: str, width: int, temb_dim: int, heads: int, rng):
        self.name = name
        self.width = width
        def lin(suffix, in_d, out_d, zero=False):
            data = np.zeros((in_d, out_d)) if zero else rng.normal(
                0.0, 1.0 / math.sqrt(in_d), (in_d, out_d))
            return Parameter(f"{name}.{suffix}", data.astype(np.float32))
        # Zero-initialized modulation: scale = shift = gate = 0 at start.
        self.mod_scale = lin("mod.scale", temb_dim, width, zero=True)
        self.mod_shift = lin("mod.shift", temb_dim, width, zero=True)
        self.mod_gate = lin("mod.gate", temb_dim, width, zero=True)
        self.attn = init_attention_params(width, heads, rng, f"{name}.attn")
        self.w_m = lin("wm", width, 4 * width)
        self.w_o = lin("wo", 5 * width, width)
        self.ln_g = Parameter(f"{name}.ln.g", np.ones(width, dtype=np.float32))
        self.ln_b = Parameter(f"{name}.ln.b", np.zeros(width, dtype=np.float32))

    def parameters(self):
        return [self.mod_scale, self.mod_shift, self.mod_gate,
                *self.attn.parameters(), self.w_m, self.w_o, self.ln_g, self.ln_b]


def adaln_zero(h: Tensor, t_emb: Tensor, p: DiTBlockParams):
    """Modulated normalization: returns (normalize(h)*(1+scale)+shift, gate)."""
    h3, single = _promote_tokens(h)
    cond = gelu(_promote_temb(t_emb))
    scale = matmul(cond, p.mod_scale)
    shift = matmul(cond, p.mod_shift)
    gate = matmul(cond, p.mod_gate)
    normed = layer_norm(h3, p.ln_g, p.ln_b)
    tilde = add(mul(normed, add(scale, 1.0)), shift)
    if single:
        return tilde.reshape(*tilde.shape[1:]), gate.reshape(1, p.width)
    return tilde, gate


def _fuse(tilde: Tensor, f: Tensor, h: Tensor, gate: Tensor, p: DiTBlockParams) -> Tensor:
    m = gelu(matmul(tilde, p.w_m))
    u = matmul(concat([f, m], axis=-1), p.w_o)
    return add(h, mul(u, gate))


def dit_block_forward(h_bg: Tensor, h_ref: Tensor, t_emb: Tensor, p: DiTBlockParams):
    """One dual-stream token block; returns both outputs and attention features."""
    if h_bg.shape[-1] != p.width or h_ref.shape[-1] != p.width:
        raise ShapeError(f"token width mismatch: {h_bg.shape} / {h_ref.shape} vs {p.width}")
    tilde_ref, gate_ref = adaln_zero(h_ref, t_emb, p)
    tilde_bg, gate_bg = adaln_zero(h_bg, t_emb, p)
    f_ref = self_attention(tilde_ref, p.attn)
    f_bg = mixture_attention(tilde_bg, tilde_ref, p.attn)
    out_ref = _fuse(tilde_ref, f_ref, h_ref, gate_ref, p)
    out_bg = _fuse(tilde_bg, f_bg, h_bg, gate_bg, p)
    return out_bg, out_ref, {"background": f_bg, "reference": f_ref}


class DiTBackbone:
    """Depth-N dual-stream token denoiser over non-overlapping patches."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.width
        patch_dim = cfg.in_channels * cfg.patch * cfg.patch
        self.embed = Parameter("embed", rng.normal(
            0.0, 1.0 / math.sqrt(patch_dim), (patch_dim, d)).astype(np.float32))
        self.pos = Tensor(sincos_position_table(cfg.image_size // cfg.patch, d))
        self.temb_w1 = Parameter("temb.w1", rng.normal(
            0.0, 1.0 / math.sqrt(cfg.temb_dim), (cfg.temb_dim, cfg.temb_dim)).astype(np.float32))
        self.temb_w2 = Parameter("temb.w2", rng.normal(
            0.0, 1.0 / math.sqrt(cfg.temb_dim), (cfg.temb_dim, cfg.temb_dim)).astype(np.float32))
        self.blocks = [DiTBlockParams(f"block{i}", d, cfg.temb_dim, cfg.heads, rng)
                       for i in range(cfg.depth)]
        self.ln_out_g = Parameter("ln_out.g", np.ones(d, dtype=np.float32))
        self.ln_out_b = Parameter("ln_out.b", np.zeros(d, dtype=np.float32))
        out_dim = cfg.out_channels * cfg.patch * cfg.patch
        self.head = Parameter("head", np.zeros((d, out_dim), dtype=np.float32))
        self.layer_ids = [f"b{i}" for i in range(cfg.depth)]

    def parameters(self):
        out = [self.embed, self.temb_w1, self.temb_w2]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.ln_out_g, self.ln_out_b, self.head])
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def embed_timesteps(self, ts) -> Tensor:
        rows = np.stack([timestep_embedding(t, self.cfg.temb_dim) for t in np.atleast_1d(ts)])
        base = Tensor(rows[:, None, :])
        return matmul(gelu(matmul(base, self.temb_w1)), self.temb_w2)

    def embed_timestep(self, t: float) -> Tensor:
        return self.embed_timesteps([t]).reshape(1, self.cfg.temb_dim)

    def validate_timestep(self, t) -> None:
        if not 0 <= t <= self.cfg.t_max:
            raise ValueError(f"timestep {t} outside schedule domain [0, {self.cfg.t_max}]")

    def embed_stream(self, stacked: Tensor) -> Tensor:
        tokens = patchify(stacked, self.cfg.patch)
        return add(matmul(tokens, self.embed), self.pos)

    def run_stream(self, stacked: Tensor, t_emb: Tensor,
                   injected: list | None = None) -> StreamRun:
        if stacked.ndim != 4:
            raise ShapeError(f"expected a batched (N, C, H, W) stream, got {stacked.shape}")
        t_emb = _promote_temb(t_emb)
        h = self.embed_stream(stacked)
        attn_inputs, attn_feats, block_outs = [], [], []
        for i, p in enumerate(self.blocks):
            tilde, gate = adaln_zero(h, t_emb, p)
            if injected is None:
                f = self_attention(tilde, p.attn)
            else:
                f = mixture_attention(tilde, injected[i], p.attn)
            h = _fuse(tilde, f, h, gate, p)
            attn_inputs.append(tilde)
            attn_feats.append(f)
            block_outs.append(h)
        tokens = matmul(layer_norm(h, self.ln_out_g, self.ln_out_b), self.head)
        size = self.cfg.image_size
        eps = unpatchify(tokens, self.cfg.patch, self.cfg.out_channels, size, size)
        return StreamRun(eps, attn_inputs, attn_feats, block_outs)

    def block_grids(self):
        g = self.cfg.image_size // self.cfg.patch
        return [(g, g)] * self.cfg.depth


def build_dit(cfg: DiTConfig, seed: int) -> DiTBackbone:
    return DiTBackbone(cfg, np.random.default_rng(seed))


def dit_forward(noisy: np.ndarray, mask: np.ndarray, masked_bg: np.ndarray,
                ref_input: ReferenceInput | None, t, bb: DiTBackbone):
    """Denoise one sample with the shared token backbone."""
    bb.validate_timestep(t)
    if noisy.shape[1] != bb.cfg.image_size or noisy.shape[2] != bb.cfg.image_size:
        raise ShapeError(f"expected {bb.cfg.image_size}px input, got {noisy.shape}")
    t_emb = bb.embed_timesteps([t])
    ref_run = None
    if ref_input is not None:
        ref_run = bb.run_stream(reference_stream_input(ref_input), t_emb, None)
    bg_run = bb.run_stream(stack_stream_input(noisy, mask, masked_bg), t_emb,
                           ref_run.attn_inputs if ref_run is not None else None)
    trace = assemble_trace("dit", bb.layer_ids, bb.block_grids(), bg_run, ref_run)
    eps = bg_run.output
    return eps.reshape(*eps.shape[1:]), trace
