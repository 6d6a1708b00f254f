"""Shared plumbing for the two backbone families: stream inputs, traces,
and the sinusoidal timestep embedding.  Stream stacks are always batched
(N, channels, H, W); per-sample callers get a singleton batch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import StreamTag
from .engine import ShapeError, Tensor


@dataclass
class ReferenceInput:
    """Masked reference image plus its object mask, fed to the reference stream."""

    image: np.ndarray  # (3, H, W), already masked to the object support
    mask: np.ndarray   # (H, W) binary


@dataclass
class StreamRun:
    """Everything one stream pass produces, kept for injection and tracing."""

    output: Tensor | None
    attn_inputs: list  # per-block post-refinement, post-norm tokens
    attn_feats: list   # per-block attention outputs (f_l)
    block_outs: list   # per-block outputs (post feed-forward)


@dataclass
class BlockTrace:
    index: int
    layer_id: str
    grid: tuple[int, int]
    features: dict = field(default_factory=dict)  # StreamTag -> np.ndarray (f_l)
    outputs: dict = field(default_factory=dict)   # StreamTag -> np.ndarray (block output)


@dataclass
class ForwardTrace:
    kind: str
    blocks: list

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def layer_ids(self) -> list:
        return [b.layer_id for b in self.blocks]


def _squeeze_batch(arr: np.ndarray) -> np.ndarray:
    if arr.shape[0] != 1:
        raise ShapeError("trace assembly expects a singleton batch")
    return arr[0]


def assemble_trace(kind: str, layer_ids, grids, bg_run: StreamRun,
                   ref_run: StreamRun | None) -> ForwardTrace:
    blocks = []
    for i, (lid, grid) in enumerate(zip(layer_ids, grids)):
        tr = BlockTrace(index=i, layer_id=lid, grid=grid)
        tr.features[StreamTag.BACKGROUND] = _squeeze_batch(bg_run.attn_feats[i].data)
        tr.outputs[StreamTag.BACKGROUND] = _squeeze_batch(bg_run.block_outs[i].data)
        if ref_run is not None:
            tr.features[StreamTag.REFERENCE] = _squeeze_batch(ref_run.attn_feats[i].data)
            tr.outputs[StreamTag.REFERENCE] = _squeeze_batch(ref_run.block_outs[i].data)
        blocks.append(tr)
    return ForwardTrace(kind=kind, blocks=blocks)


def _as_float(arr: np.ndarray) -> np.ndarray:
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return arr.astype(dtype, copy=False)


def stack_stream_input(image: np.ndarray, mask: np.ndarray, masked: np.ndarray) -> Tensor:
    """Stack (image, mask, masked image) into the batched stream input.

    Accepts one sample ((3,H,W) + (H,W)) or a batch ((N,3,H,W) + (N,H,W));
    the result is always (N, 7, H, W).
    """
    image, mask, masked = _as_float(image), _as_float(mask), _as_float(masked)
    if image.ndim == 3:
        image, mask, masked = image[None], mask[None], masked[None]
    if (image.ndim != 4 or masked.shape != image.shape
            or mask.shape != image.shape[:1] + image.shape[2:]):
        raise ShapeError(
            f"stream input shapes inconsistent: image {image.shape}, "
            f"mask {mask.shape}, masked {masked.shape}")
    stacked = np.concatenate([image, mask[:, None], masked], axis=1)
    return Tensor(stacked)


def reference_stream_input(ref: ReferenceInput) -> Tensor:
    # The clean masked reference rides in both image slots; no noise is added.
    return stack_stream_input(ref.image, ref.mask, ref.image)


def timestep_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos embedding at geometric frequencies; frequency 0 is 1."""
    if dim % 2:
        raise ShapeError(f"timestep embedding width must be even, got {dim}")
    half = dim // 2
    freqs = max_period ** (-np.arange(half, dtype=np.float64) / half)
    angles = float(t) * freqs
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out.astype(np.float32)
