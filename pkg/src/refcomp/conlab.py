"""Feature-consistency validation lab.

Probes a trained denoiser with mask-separated inputs: the same noised
scene conditioned on the full image, on the background only, and on the
object only.  Reports how well mask-composited predictions and per-layer
features reconstruct the full-input ones, plus reference-free image
metrics (PSNR, SSIM) and the per-layer l2 profile that separates the
sharing variants.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import StreamTag
from .diffusion import CompositionSample, Model, NoiseSchedule, add_noise
from .engine import no_grad

PSNR_INF = "inf"


# -- image metrics ------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


@dataclass
class SsimResult:
    value: float
    fallback: bool  # True when the image was smaller than the window


def _ssim_single(a: np.ndarray, b: np.ndarray, data_range: float,
                 window: np.ndarray) -> SsimResult:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    size = window.shape[0]
    if a.shape[0] < size or a.shape[1] < size:
        mu_a, mu_b = a.mean(), b.mean()
        var_a, var_b = a.var(), b.var()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        value = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                 / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        return SsimResult(float(value), fallback=True)
    wa = np.lib.stride_tricks.sliding_window_view(a, (size, size))
    wb = np.lib.stride_tricks.sliding_window_view(b, (size, size))
    mu_a = (wa * window).sum(axis=(-1, -2))
    mu_b = (wb * window).sum(axis=(-1, -2))
    ea2 = (wa * wa * window).sum(axis=(-1, -2))
    eb2 = (wb * wb * window).sum(axis=(-1, -2))
    eab = (wa * wb * window).sum(axis=(-1, -2))
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    ssim_map = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return SsimResult(float(ssim_map.mean()), fallback=False)


def ssim_full(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> SsimResult:
    """Gaussian-window SSIM (11x11, sigma 1.5) over valid windows; channels
    averaged; falls back to global statistics for tiny images."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    window = _gaussian_window()
    if a.ndim == 2:
        return _ssim_single(a, b, data_range, window)
    if a.ndim == 3:
        parts = [_ssim_single(a[c], b[c], data_range, window) for c in range(a.shape[0])]
        return SsimResult(float(np.mean([p.value for p in parts])),
                          fallback=any(p.fallback for p in parts))
    raise ValueError(f"expected (H, W) or (C, H, W), got {a.shape}")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    return ssim_full(a, b, data_range).value


# -- mask handling ------------------------------------------------------------

def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Area voting: a cell is foreground when at least half its pixels are."""
    h, w = mask.shape
    gh, gw = grid
    if h % gh or w % gw:
        raise ValueError(f"mask {mask.shape} not divisible onto grid {grid}")
    blocks = mask.reshape(gh, h // gh, gw, w // gw).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.float64)


def _mask_for_feature(mask: np.ndarray, feature: np.ndarray,
                      grid: tuple[int, int]) -> np.ndarray:
    voted = downsample_mask(mask, grid)
    if feature.ndim == 3:          # (C, h, w) spatial map
        if feature.shape[1:] != voted.shape:
            raise RuntimeError(f"mask plan bug: feature {feature.shape} vs grid {grid}")
        return voted[None]
    if feature.ndim == 2:          # (T, d) tokens on a grid
        if feature.shape[0] != voted.size:
            raise RuntimeError(f"mask plan bug: {feature.shape[0]} tokens vs grid {grid}")
        return voted.reshape(-1, 1)
    raise RuntimeError(f"unsupported feature rank {feature.ndim}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    fa = np.asarray(a, np.float64).reshape(-1)
    fb = np.asarray(b, np.float64).reshape(-1)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(fa, fb) / (na * nb))


# -- separated-input probes ---------------------------------------------------

def _conditioned_forward(model: Model, sample: CompositionSample, t: int,
                         eps: np.ndarray, s: NoiseSchedule, mode: str):
    """Noise the full scene, then condition on full / background / object."""
    gt = sample.gt.astype(np.float32)
    noisy = add_noise(gt, t, eps, s)
    if mode == "full":
        mask = np.ones_like(sample.mask_bg)
        masked = gt
    elif mode == "background":
        mask = sample.mask_bg
        masked = sample.masked_bg.astype(np.float32)
    elif mode == "object":
        mask = sample.mask_bg_c
        masked = (sample.mask_bg_c * gt).astype(np.float32)
    else:
        raise ValueError(f"unknown probe mode {mode!r}")
    return model.denoise(noisy, mask, masked.astype(np.float32), None, t)


def region_merging_loss(model: Model, sample: CompositionSample, t: int,
                        eps: np.ndarray, s: NoiseSchedule) -> float:
    """Per-element squared gap between the full-input prediction and the
    mask-composited predictions of the two separated inputs."""
    with no_grad():
        full, _ = _conditioned_forward(model, sample, t, eps, s, "full")
        bg, _ = _conditioned_forward(model, sample, t, eps, s, "background")
        obj, _ = _conditioned_forward(model, sample, t, eps, s, "object")
    m = sample.mask_bg[None]
    composed = m * bg.data + (1.0 - m) * obj.data
    return float(np.mean((full.data.astype(np.float64) - composed) ** 2))


def feature_composition_cosine(model: Model, sample: CompositionSample, t: int,
                               eps: np.ndarray, s: NoiseSchedule) -> dict[str, float]:
    """Per attention layer: cosine between full-input features and the
    mask-composited features of the separated inputs, masks voted down to
    the layer's grid."""
    with no_grad():
        _, tr_full = _conditioned_forward(model, sample, t, eps, s, "full")
        _, tr_bg = _conditioned_forward(model, sample, t, eps, s, "background")
        _, tr_obj = _conditioned_forward(model, sample, t, eps, s, "object")
    out = {}
    for bf, bb, bo in zip(tr_full.blocks, tr_bg.blocks, tr_obj.blocks):
        f_full = bf.features[StreamTag.BACKGROUND]
        f_bg = bb.features[StreamTag.BACKGROUND]
        f_obj = bo.features[StreamTag.BACKGROUND]
        m = _mask_for_feature(sample.mask_bg, f_bg, bf.grid)
        composed = m * f_bg + (1.0 - m) * f_obj
        out[bf.layer_id] = cosine(f_full, composed)
    return out


def feature_l2_per_layer(trace_a, trace_b) -> list[float]:
    """Per-layer RMS gap between two runs' background-stream features."""
    out = []
    for ba, bb in zip(trace_a.blocks, trace_b.blocks):
        fa = ba.features[StreamTag.BACKGROUND].astype(np.float64)
        fb = bb.features[StreamTag.BACKGROUND].astype(np.float64)
        out.append(float(np.sqrt(np.mean((fa - fb) ** 2))))
    return out


def layer_l2_profile(models: dict[str, Model], samples: Sequence[CompositionSample],
                     s: NoiseSchedule, draws: int, seed: int,
                     ) -> tuple[list[str], dict[str, list[float]]]:
    """For each variant: mean per-layer RMS between the background-stream
    features of the separated (background + reference) forward and those of
    the ground-truth composite fed reference-free."""
    rng = np.random.default_rng(seed)
    probes = []
    for _ in range(draws):
        sample = samples[int(rng.integers(0, len(samples)))]
        t = int(rng.integers(1, s.steps + 1))
        eps = rng.standard_normal(sample.gt.shape).astype(np.float32)
        probes.append((sample, t, eps))
    layer_ids: list[str] = []
    curves: dict[str, list[float]] = {}
    for name, model in models.items():
        if model is None:
            continue
        total = None
        for sample, t, eps in probes:
            gt = sample.gt.astype(np.float32)
            noisy = add_noise(gt, t, eps, s)
            with no_grad():
                _, tr_sep = model.denoise(noisy, sample.mask_bg,
                                          sample.masked_bg.astype(np.float32),
                                          sample.reference_input(), t)
                _, tr_comp = model.denoise(noisy, np.ones_like(sample.mask_bg),
                                           gt, None, t)
            gaps = feature_l2_per_layer(tr_sep, tr_comp)
            total = gaps if total is None else [a + b for a, b in zip(total, gaps)]
            layer_ids = tr_sep.layer_ids
        curves[name] = [v / len(probes) for v in total]
    return layer_ids, curves


# -- reports ------------------------------------------------------------------

@dataclass
class ConsistencyReport:
    layer_ids: list
    cosine_per_layer: dict = field(default_factory=dict)
    l2_curves: dict = field(default_factory=dict)
    merging_losses: list = field(default_factory=list)
    training_loss_reference: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def merging_mean(self) -> float | None:
        return float(np.mean(self.merging_losses)) if self.merging_losses else None

    def validate(self) -> None:
        values = list(self.cosine_per_layer.values())
        for curve in self.l2_curves.values():
            values.extend(curve)
        values.extend(self.merging_losses)
        if not np.isfinite(values).all():
            raise ValueError("report contains non-finite values")
        if list(self.cosine_per_layer) and list(self.cosine_per_layer) != list(self.layer_ids):
            raise ValueError("cosine keys out of order with the layer ids")


def evaluate_checkpoint(model: Model, samples: Sequence[CompositionSample],
                        s: NoiseSchedule, draws: int, seed: int,
                        training_loss_reference: float | None = None,
                        metadata: dict | None = None) -> ConsistencyReport:
    """Merging losses plus averaged per-layer composition cosines."""
    rng = np.random.default_rng(seed)
    merging = []
    cos_acc: dict[str, float] = {}
    layer_ids: list = []
    for _ in range(draws):
        sample = samples[int(rng.integers(0, len(samples)))]
        t = int(rng.integers(1, s.steps + 1))
        eps = rng.standard_normal(sample.gt.shape).astype(np.float32)
        merging.append(region_merging_loss(model, sample, t, eps, s))
        cos = feature_composition_cosine(model, sample, t, eps, s)
        layer_ids = list(cos)
        for k, v in cos.items():
            cos_acc[k] = cos_acc.get(k, 0.0) + v
    report = ConsistencyReport(
        layer_ids=layer_ids,
        cosine_per_layer={k: v / draws for k, v in cos_acc.items()},
        merging_losses=merging,
        training_loss_reference=training_loss_reference,
        metadata={"draws": draws, "seed": seed, "samples": len(samples),
                  **(metadata or {})})
    report.validate()
    return report


def mean_training_loss(history_losses: Sequence[float], window: int = 200) -> float:
    """Mean loss over the final window of a training run."""
    tail = list(history_losses)[-window:]
    if not tail:
        raise ValueError("empty loss history")
    return float(np.mean(tail))


def _fmt(value: float) -> str:
    if value == math.inf:
        return PSNR_INF
    return f"{value:.10g}"


def write_report(report: ConsistencyReport, directory) -> None:
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "consistency.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "variant", "metric", "value"])
        for layer, value in report.cosine_per_layer.items():
            writer.writerow([layer, "", "cosine", _fmt(value)])
        for variant, curve in report.l2_curves.items():
            for layer, value in zip(report.layer_ids, curve):
                writer.writerow([layer, variant, "l2", _fmt(value)])
        for i, value in enumerate(report.merging_losses):
            writer.writerow([str(i), "", "merging_loss", _fmt(value)])
    summary = {
        "layer_ids": list(report.layer_ids),
        "cosine_per_layer": report.cosine_per_layer,
        "l2_curves": report.l2_curves,
        "merging_loss_mean": report.merging_mean,
        "training_loss_reference": report.training_loss_reference,
        "merging_to_training_ratio": (
            report.merging_mean / report.training_loss_reference
            if report.merging_mean is not None and report.training_loss_reference
            else None),
        "metadata": report.metadata,
    }
    with open(directory / "consistency.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
