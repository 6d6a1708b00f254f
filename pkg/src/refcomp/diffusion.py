"""Forward noising, the denoising objective, backbone variants, and the
inpainting sampler.

Images live in [0, 1] pixel space.  The training target is the sampled
noise; masks enter the model only through its input channels.  Three
variants cover the sharing ablation: one shared backbone for both
streams, a dual backbone with a frozen reference copy, and a dual
backbone with a trainable reference copy.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import dit as dit_mod
from . import unet as unet_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import Parameter, Tensor, mean_all, mul, no_grad
from .streams import (ReferenceInput, assemble_trace, reference_stream_input,
                      stack_stream_input, timestep_embedding)

__all__ = [
    "NoiseSchedule", "make_schedule", "add_noise", "timestep_embedding",
    "CompositionSample", "BackboneKind", "ModelVariant", "Model",
    "build_variant", "Adam", "training_step", "train", "inpaint_sample",
    "NumericalError", "TrainRecord",
]


class NumericalError(RuntimeError):
    """Raised when training hits a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta forward process; alpha_bar[0] = 1 by convention."""

    betas: np.ndarray        # (T,), beta_t for t = 1..T
    alphas: np.ndarray       # (T,)
    alpha_bar: np.ndarray    # (T+1,), index by t directly

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ValueError(f"schedule needs at least one step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"beta range ({beta_start}, {beta_end}) outside (0, 1)")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image {x.shape}")
    if not 0 <= t <= s.steps:
        raise ValueError(f"timestep {t} outside schedule domain [0, {s.steps}]")
    ab = s.alpha_bar[t]
    return (np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps).astype(x.dtype)


@dataclass
class CompositionSample:
    """One composition item: scene, reference, masks, and the pose descriptor.

    Masks are binary float arrays; mask_bg is 1 where the scene is kept and
    0 inside the placement hole.  The complement and the masked images are
    always derived, never stored.
    """

    gt: np.ndarray        # (3, H, W)
    bg: np.ndarray        # (3, H, W)
    ref: np.ndarray       # (3, H, W)
    mask_bg: np.ndarray   # (H, W)
    mask_ref: np.ndarray  # (H, W)
    pose: dict = field(default_factory=dict)
    sample_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        for name in ("mask_bg", "mask_ref"):
            m = getattr(self, name)
            values = np.unique(m)
            if not np.isin(values, (0.0, 1.0)).all():
                raise ValueError(f"{name} is not binary (values {values[:6]})")

    @property
    def mask_bg_c(self) -> np.ndarray:
        return (1.0 - self.mask_bg).astype(self.mask_bg.dtype)

    @property
    def masked_bg(self) -> np.ndarray:
        return self.mask_bg * self.gt

    @property
    def masked_ref(self) -> np.ndarray:
        return self.mask_ref * self.ref

    def reference_input(self) -> ReferenceInput:
        return ReferenceInput(image=self.masked_ref, mask=self.mask_ref)


class BackboneKind(Enum):
    UNET = "unet"
    DIT = "dit"


class ModelVariant(Enum):
    SHARED = "shared"
    DUAL_FROZEN = "dual_frozen"
    DUAL_TRAINABLE = "dual_trainable"


def _make_backbone(kind: BackboneKind, seed: int, config=None):
    if kind is BackboneKind.UNET:
        return unet_mod.build_unet(config or unet_mod.UNetConfig(), seed)
    return dit_mod.build_dit(config or dit_mod.DiTConfig(), seed)


class Model:
    """A denoiser plus the backbone that extracts reference features.

    In the shared variant both attributes are the same object, so the two
    streams resolve to the same parameter records.
    """

    def __init__(self, kind: BackboneKind, variant: ModelVariant,
                 backbone, ref_backbone):
        self.kind = kind
        self.variant = variant
        self.backbone = backbone
        self.ref_backbone = ref_backbone

    @property
    def image_size(self) -> int:
        return self.backbone.cfg.image_size

    def named_parameters(self) -> dict[str, Parameter]:
        params = dict(self.backbone.named_parameters())
        if self.ref_backbone is not self.backbone:
            for name, p in self.ref_backbone.named_parameters().items():
                params[f"ref.{name}"] = p
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.trainable]

    def denoise_batch(self, noisy: np.ndarray, mask: np.ndarray,
                      masked_bg: np.ndarray, ref_image: np.ndarray | None,
                      ref_mask: np.ndarray | None, ts: np.ndarray):
        """Batched noise prediction: (B,3,H,W) inputs, per-item timesteps.

        Returns the (B,3,H,W) prediction tensor plus both stream runs.
        """
        for t in np.atleast_1d(ts):
            self.backbone.validate_timestep(int(t))
        ref_run = None
        if ref_image is not None:
            temb_ref = self.ref_backbone.embed_timesteps(ts)
            ref_run = self.ref_backbone.run_stream(
                stack_stream_input(ref_image, ref_mask, ref_image), temb_ref, None)
        t_emb = self.backbone.embed_timesteps(ts)
        bg_run = self.backbone.run_stream(
            stack_stream_input(noisy, mask, masked_bg), t_emb,
            ref_run.attn_inputs if ref_run is not None else None)
        return bg_run.output, bg_run, ref_run

    def denoise(self, noisy: np.ndarray, mask: np.ndarray, masked_bg: np.ndarray,
                ref: ReferenceInput | None, t: int):
        """Predict the noise for one sample; always returns the layer trace."""
        ref_image = ref.image if ref is not None else None
        ref_mask = ref.mask if ref is not None else None
        pred, bg_run, ref_run = self.denoise_batch(
            noisy, mask, masked_bg, ref_image, ref_mask, np.array([t]))
        trace = assemble_trace(self.kind.value, self.backbone.layer_ids,
                               self.backbone.block_grids(), bg_run, ref_run)
        return pred.reshape(*pred.shape[1:]), trace

    def save(self, path, meta: dict | None = None) -> None:
        tensors = {name: p.data for name, p in self.named_parameters().items()}
        info = {"kind": self.kind.value, "variant": self.variant.value}
        info.update(meta or {})
        save_checkpoint(tensors, path, meta=info)

    def load(self, path) -> dict:
        tensors, meta = load_checkpoint(path)
        params = self.named_parameters()
        missing = set(params) - set(tensors)
        if missing:
            raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:4]}")
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        return meta


def build_variant(kind: BackboneKind, variant: ModelVariant, init_seed: int,
                  config=None) -> Model:
    backbone = _make_backbone(kind, init_seed, config)
    if variant is ModelVariant.SHARED:
        return Model(kind, variant, backbone, backbone)
    ref = copy.deepcopy(backbone)
    if variant is ModelVariant.DUAL_FROZEN:
        for p in ref.named_parameters().values():
            p.freeze()
    return Model(kind, variant, backbone, ref)


class Adam:
    """Adaptive-moment gradient descent over a fixed parameter list."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def training_step(batch: Sequence[CompositionSample], model: Model,
                  s: NoiseSchedule, rng: np.random.Generator) -> float:
    """One denoising objective evaluation: squared error between the noise
    prediction and the sampled noise, averaged per element and per item.
    Gradients accumulate into trainable parameters; the caller owns the
    optimizer step and zero-grad."""
    if not batch:
        raise ValueError("training step needs a non-empty batch")
    ts = rng.integers(1, s.steps + 1, size=len(batch))
    gts = np.stack([item.gt for item in batch]).astype(np.float32)
    eps = rng.standard_normal(gts.shape).astype(np.float32)
    ab = s.alpha_bar[ts].astype(np.float32)[:, None, None, None]
    noisy = np.sqrt(ab) * gts + np.sqrt(1.0 - ab) * eps
    masks = np.stack([item.mask_bg for item in batch]).astype(np.float32)
    maskeds = np.stack([item.masked_bg for item in batch]).astype(np.float32)
    ref_imgs = np.stack([item.masked_ref for item in batch]).astype(np.float32)
    ref_masks = np.stack([item.mask_ref for item in batch]).astype(np.float32)
    pred, _, _ = model.denoise_batch(noisy, masks, maskeds, ref_imgs, ref_masks, ts)
    diff = pred - Tensor(eps)
    loss = mean_all(mul(diff, diff))
    value = float(loss.data)
    if not np.isfinite(value):
        snapshot = {
            "loss": value,
            "batch_ids": [item.sample_id for item in batch],
            "timesteps": [int(t) for t in ts],
            "param_absmax": {
                name: float(np.abs(p.data).max())
                for name, p in list(model.named_parameters().items())[:8]
            },
        }
        raise NumericalError(f"non-finite training loss {value}", snapshot)
    loss.backward()
    return value


@dataclass
class TrainRecord:
    step: int
    loss: float
    wall_time: float


def train(model: Model, dataset: Sequence[CompositionSample], s: NoiseSchedule,
          steps: int, batch_size: int, lr: float, seed: int,
          on_step: Callable[[TrainRecord], None] | None = None,
          augment: Callable[[CompositionSample, np.random.Generator], CompositionSample] | None = None,
          ) -> list[TrainRecord]:
    rng = np.random.default_rng(seed)
    opt = Adam(model.trainable_parameters(), lr=lr)
    history: list[TrainRecord] = []
    start = time.perf_counter()
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(dataset), size=batch_size)
        batch = [dataset[i] for i in idx]
        if augment is not None:
            batch = [augment(item, rng) for item in batch]
        opt.zero_grad()
        loss = training_step(batch, model, s, rng)
        opt.step()
        rec = TrainRecord(step=step, loss=loss, wall_time=time.perf_counter() - start)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    return history


def _sample_timesteps(total: int, steps: int) -> list[int]:
    if steps < 1 or steps > total:
        raise ValueError(f"sampler steps {steps} outside [1, {total}]")
    ts = np.unique(np.linspace(total, 1, steps).round().astype(int))[::-1]
    return [int(t) for t in ts]


def predict_clean(x_t: np.ndarray, eps_hat: np.ndarray, t: int,
                  s: NoiseSchedule) -> np.ndarray:
    """Invert the closed-form noising at timestep t."""
    ab = s.alpha_bar[t]
    return ((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)).astype(x_t.dtype)


def inpaint_sample(masked_bg: np.ndarray, mask_bg: np.ndarray,
                   ref: ReferenceInput | None, model: Model, s: NoiseSchedule,
                   steps: int, rng: np.random.Generator,
                   clip: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Deterministic-variance ancestral sampling with known-region re-compositing.

    After every denoising step the known region is replaced by the noised
    background, so the final image preserves the background bitwise.
    """
    ts = _sample_timesteps(s.steps, steps)
    mask3 = np.broadcast_to(mask_bg, masked_bg.shape).astype(np.float32)
    masked_bg = masked_bg.astype(np.float32)
    x = rng.standard_normal(masked_bg.shape).astype(np.float32)
    with no_grad():
        for i, t in enumerate(ts):
            pred, _ = model.denoise(x, mask_bg, masked_bg, ref, t)
            eps_hat = pred.data
            x0 = predict_clean(x, eps_hat, t, s)
            if clip is not None:
                x0 = np.clip(x0, clip[0], clip[1])
            t_next = ts[i + 1] if i + 1 < len(ts) else 0
            ab_next = s.alpha_bar[t_next]
            x = (np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat).astype(np.float32)
            known_noise = rng.standard_normal(masked_bg.shape).astype(np.float32)
            known = add_noise(masked_bg, t_next, known_noise, s)
            x = mask3 * known + (1.0 - mask3) * x
    return x
