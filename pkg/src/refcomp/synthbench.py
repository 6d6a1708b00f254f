"""Procedural composition benchmark.

Scenes are textured backgrounds with one glyph-like object pasted under a
sampled pose transform.  The ground truth is assembled, by construction,
as masked-background plus warped-object, so the copy-paste decomposition
holds bitwise.  The augmentation scheme mirrors the default training
recipe: flips, bounded rotations, mild scaling, cropping, and four
equally likely mask perturbation branches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import CompositionSample
from .imageio import quantize, read_mask, read_ppm, write_pgm, write_ppm


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 32
    background_families: tuple = ("gradient", "stripes", "blobs")
    object_families: tuple = ("polygon", "ring", "cross")
    max_rotation_deg: float = 45.0
    scale_range: tuple = (0.6, 1.4)
    min_area_frac: float = 0.04
    max_area_frac: float = 0.40
    max_retries: int = 50


@dataclass(frozen=True)
class AugmentationConfig:
    flip_p: float = 0.5
    rotation_p: float = 0.5
    rotation_max_deg: float = 30.0
    scale_p: float = 0.3
    scale_delta: float = 0.2
    crop_p: float = 1.0
    crop_min_ratio: float = 0.75
    mask_branch_p: tuple = (0.25, 0.25, 0.25, 0.25)  # perturb, blur, bbox, none
    dilation_radius: tuple = (1, 3)
    blur_sigma: float = 1.5
    blur_threshold: float = 0.5


# -- resampling ---------------------------------------------------------------

def _grid(h: int, w: int):
    return np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Zero-padded bilinear gather; img is (C, H, W)."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros((c,) + ys.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            weight = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            yc = np.clip(yy, 0, h - 1)
            xc = np.clip(xx, 0, w - 1)
            out += weight * valid * img[:, yc, xc]
    return out


def _sample_nearest(mask: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    yy = np.rint(ys).astype(int)
    xx = np.rint(xs).astype(int)
    valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    return np.where(valid, mask[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)


def _affine_sources(h: int, w: int, angle_deg: float, scale: float,
                    src_center, dst_center):
    """Destination grid -> source coordinates for rotate+scale about a center."""
    ys, xs = _grid(h, w)
    theta = math.radians(angle_deg)
    cy, cx = dst_center
    sy, sx = src_center
    dy = ys - cy
    dx = xs - cx
    cos_t, sin_t = math.cos(-theta), math.sin(-theta)
    ry = (cos_t * dy - sin_t * dx) / scale
    rx = (sin_t * dy + cos_t * dx) / scale
    return ry + sy, rx + sx


def warp_object(masked_ref: np.ndarray, mask_ref: np.ndarray, pose: dict,
                out_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Place the masked reference object into an out_size frame under ``pose``.

    Returns the quantized warped object (zero off its support) and its
    binary support mask.  Pure in its inputs, so the copy-paste identity
    can be re-derived exactly.
    """
    ys, xs = _affine_sources(out_size, out_size, pose["angle_deg"], pose["scale"],
                             (pose["src_cy"], pose["src_cx"]),
                             (pose["dst_cy"], pose["dst_cx"]))
    warped_mask = _sample_nearest(mask_ref, ys, xs)
    warped = _sample_bilinear(masked_ref.astype(np.float64), ys, xs)
    warped = quantize(np.clip(warped, 0.0, 1.0)) * warped_mask
    return warped.astype(np.float32), warped_mask.astype(np.float32)


# -- scene rendering ----------------------------------------------------------

def _random_color(rng, lo=0.15, hi=0.95):
    return rng.uniform(lo, hi, size=3)


def _render_background(size: int, family: str, rng) -> np.ndarray:
    ys, xs = _grid(size, size)
    c0, c1 = _random_color(rng, 0.1, 0.6), _random_color(rng, 0.3, 0.9)
    if family == "gradient":
        angle = rng.uniform(0, 2 * math.pi)
        ramp = (math.cos(angle) * xs + math.sin(angle) * ys)
        ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1e-9)
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp
    elif family == "stripes":
        angle = rng.uniform(0, math.pi)
        period = rng.uniform(4, 10)
        phase = ((math.cos(angle) * xs + math.sin(angle) * ys) / period) % 2.0
        band = (phase < 1.0).astype(np.float64)
        img = c0[:, None, None] * band + c1[:, None, None] * (1 - band)
    elif family == "blobs":
        coarse = rng.random((3, 4, 4))
        img = np.stack([_sample_bilinear(coarse[k:k + 1],
                                         ys * 3 / (size - 1), xs * 3 / (size - 1))[0]
                        for k in range(3)])
        img = c0[:, None, None] + (c1 - c0)[:, None, None] * img
    else:
        raise GenerationError(f"unknown background family {family!r}")
    return np.clip(img, 0.0, 1.0)


def _object_support(size: int, family: str, rng) -> np.ndarray:
    ys, xs = _grid(size, size)
    cy = cx = (size - 1) / 2.0
    radius = size * rng.uniform(0.18, 0.30)
    if family == "polygon":
        k = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radii = radius * rng.uniform(0.7, 1.0, size=k)
        vy = cy + radii * np.sin(angles)
        vx = cx + radii * np.cos(angles)
        inside = np.ones((size, size), dtype=bool)
        for i in range(k):  # convex hull of sorted-angle vertices: half-plane tests
            y0, x0 = vy[i], vx[i]
            y1, x1 = vy[(i + 1) % k], vx[(i + 1) % k]
            cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside &= cross >= 0
        return inside.astype(np.float32)
    if family == "ring":
        r = np.hypot(ys - cy, xs - cx)
        return ((r <= radius) & (r >= radius * rng.uniform(0.35, 0.55))).astype(np.float32)
    if family == "cross":
        bar = radius * rng.uniform(0.25, 0.4)
        arm = radius
        v = (np.abs(ys - cy) <= arm) & (np.abs(xs - cx) <= bar)
        h = (np.abs(xs - cx) <= arm) & (np.abs(ys - cy) <= bar)
        return (v | h).astype(np.float32)
    raise GenerationError(f"unknown object family {family!r}")


def _object_texture(size: int, rng) -> np.ndarray:
    ys, xs = _grid(size, size)
    base = _random_color(rng, 0.25, 0.95)
    if rng.random() < 0.5:
        return np.clip(np.broadcast_to(base[:, None, None], (3, size, size)).copy(), 0.05, 1.0)
    other = _random_color(rng, 0.25, 0.95)
    period = rng.uniform(2.5, 6.0)
    band = (((xs + ys) / period) % 2.0 < 1.0).astype(np.float64)
    img = base[:, None, None] * band + other[:, None, None] * (1 - band)
    return np.clip(img, 0.05, 1.0)


def generate_scene(cfg: SceneConfig, seed: int) -> CompositionSample:
    """Render one composition sample; the copy-paste identity holds bitwise."""
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    bg = quantize(_render_background(size, str(rng.choice(cfg.background_families)), rng))
    ref_bg = _render_background(size, str(rng.choice(cfg.background_families)), rng)
    area_lo_canonical = cfg.min_area_frac * size * size / (cfg.scale_range[1] ** 2)
    for _ in range(cfg.max_retries):
        mask_ref = _object_support(size, str(rng.choice(cfg.object_families)), rng)
        if mask_ref.sum() >= area_lo_canonical:
            break
    else:
        raise GenerationError(f"seed {seed}: could not render a large-enough object")
    texture = _object_texture(size, rng)
    ref = quantize(ref_bg * (1 - mask_ref) + texture * mask_ref)
    masked_ref = (mask_ref * ref).astype(np.float32)

    idx = np.argwhere(mask_ref > 0)
    src_cy, src_cx = idx.mean(axis=0)
    area_lo = cfg.min_area_frac * size * size
    area_hi = cfg.max_area_frac * size * size
    for _ in range(cfg.max_retries):
        pose = {
            "angle_deg": float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
            "scale": float(rng.uniform(*cfg.scale_range)),
            "src_cy": float(src_cy),
            "src_cx": float(src_cx),
            "dst_cy": float(rng.uniform(size * 0.25, size * 0.75)),
            "dst_cx": float(rng.uniform(size * 0.25, size * 0.75)),
        }
        warped, warped_mask = warp_object(masked_ref, mask_ref, pose, size)
        area = warped_mask.sum()
        on_border = (warped_mask[0].any() or warped_mask[-1].any()
                     or warped_mask[:, 0].any() or warped_mask[:, -1].any())
        if area_lo <= area <= area_hi and not on_border:
            break
    else:
        raise GenerationError(f"seed {seed}: no in-frame pose after {cfg.max_retries} tries")

    mask_bg = (1.0 - warped_mask).astype(np.float32)
    gt = (mask_bg * bg + warped).astype(np.float32)
    return CompositionSample(gt=gt, bg=bg, ref=ref, mask_bg=mask_bg,
                             mask_ref=mask_ref, pose=pose,
                             sample_id=f"sample_{seed:08d}", seed=seed)


def generate_dataset(cfg: SceneConfig, count: int, base_seed: int) -> list[CompositionSample]:
    return [generate_scene(cfg, base_seed + i) for i in range(count)]


# -- augmentation -------------------------------------------------------------

def _resample_pair(img, mask, ys, xs):
    out_img = np.clip(_sample_bilinear(img.astype(np.float64), ys, xs), 0.0, 1.0)
    out_mask = _sample_nearest(mask, ys, xs)
    return out_img.astype(np.float32), out_mask.astype(np.float32)


@dataclass(frozen=True)
class AugmentationPlan:
    """The concrete draws one augmentation call will apply, in order."""

    flip: bool
    rotation_deg: float | None
    scale: float | None
    crop: tuple | None  # (oy, ox, ch, cw)


def draw_augmentation_plan(cfg: AugmentationConfig, shape: tuple[int, int],
                           rng: np.random.Generator) -> AugmentationPlan:
    h, w = shape
    flip = rng.random() < cfg.flip_p
    rotation = None
    if rng.random() < cfg.rotation_p:
        rotation = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    scale = None
    if rng.random() < cfg.scale_p:
        scale = float(1.0 + rng.uniform(-cfg.scale_delta, cfg.scale_delta))
    crop = None
    if rng.random() < cfg.crop_p:
        ratio = rng.uniform(cfg.crop_min_ratio, 1.0)
        side = math.sqrt(ratio)
        ch, cw = max(2, round(h * side)), max(2, round(w * side))
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        crop = (oy, ox, ch, cw)
    return AugmentationPlan(flip=flip, rotation_deg=rotation, scale=scale, crop=crop)


def augment_image(img: np.ndarray, mask: np.ndarray, cfg: AugmentationConfig,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply flip/rotation/scaling/cropping draws; the mask rides along."""
    if mask.shape != img.shape[1:]:
        raise ValueError(f"mask {mask.shape} not aligned to image {img.shape}")
    img = img.astype(np.float32).copy()
    mask = mask.astype(np.float32).copy()
    h, w = mask.shape
    center = ((h - 1) / 2.0, (w - 1) / 2.0)
    plan = draw_augmentation_plan(cfg, (h, w), np.random.default_rng(seed))
    if plan.flip:
        img = img[:, :, ::-1].copy()
        mask = mask[:, ::-1].copy()
    if plan.rotation_deg is not None:
        ys, xs = _affine_sources(h, w, plan.rotation_deg, 1.0, center, center)
        img, mask = _resample_pair(img, mask, ys, xs)
    if plan.scale is not None:
        ys, xs = _affine_sources(h, w, 0.0, plan.scale, center, center)
        img, mask = _resample_pair(img, mask, ys, xs)
    if plan.crop is not None:
        oy, ox, ch, cw = plan.crop
        ys, xs = _grid(h, w)
        ys = oy + ys * (ch - 1) / (h - 1)
        xs = ox + xs * (cw - 1) / (w - 1)
        img, mask = _resample_pair(img, mask, ys, xs)
    return img, mask


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=mask.dtype)
    padded[radius:radius + h, radius:radius + w] = mask
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out = np.maximum(out, padded[dy:dy + h, dx:dx + w])
    return out


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    return 1.0 - _dilate(1.0 - mask, radius)


def _gaussian_blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w))
    padded[radius:radius + h] = mask
    rows = sum(kernel[i] * padded[i:i + h] for i in range(len(kernel)))
    padded = np.zeros((h, w + 2 * radius))
    padded[:, radius:radius + w] = rows
    return sum(kernel[i] * padded[:, i:i + w] for i in range(len(kernel)))


def bounding_box_mask(mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask > 0)
    out = np.zeros_like(mask)
    if idx.size:
        (y0, x0), (y1, x1) = idx.min(axis=0), idx.max(axis=0)
        out[y0:y1 + 1, x0:x1 + 1] = 1.0
    return out


MASK_BRANCHES = ("perturb", "blur", "bbox", "none")


def draw_mask_branch(cfg: AugmentationConfig, rng: np.random.Generator) -> str:
    u = rng.random()
    cumulative = np.cumsum(cfg.mask_branch_p)
    for branch, edge in zip(MASK_BRANCHES, cumulative):
        if u < edge:
            return branch
    return MASK_BRANCHES[-1]


def augment_mask(mask: np.ndarray, seed: int,
                 cfg: AugmentationConfig = AugmentationConfig()) -> np.ndarray:
    """One of four equally likely perturbations of a binary object mask."""
    mask = mask.astype(np.float32)
    if not (mask > 0).any():
        return mask.copy()
    rng = np.random.default_rng(seed)
    branch = draw_mask_branch(cfg, rng)
    if branch == "perturb":
        radius = int(rng.integers(cfg.dilation_radius[0], cfg.dilation_radius[1] + 1))
        out = _dilate(mask, radius) if rng.random() < 0.5 else _erode(mask, radius)
        if not (out > 0).any():
            return mask.copy()
        return out.astype(np.float32)
    if branch == "blur":
        blurred = _gaussian_blur(mask, cfg.blur_sigma)
        out = (blurred > cfg.blur_threshold).astype(np.float32)
        if not (out > 0).any():
            return mask.copy()
        return out
    if branch == "bbox":
        return bounding_box_mask(mask).astype(np.float32)
    return mask.copy()


# -- dataset files ------------------------------------------------------------

def write_dataset(samples, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as manifest:
        for sample in samples:
            sid = sample.sample_id or f"sample_{sample.seed or 0:08d}"
            record = {"id": sid, "seed": sample.seed, "pose": sample.pose}
            for key, arr, writer in (("gt", sample.gt, write_ppm),
                                     ("bg", sample.bg, write_ppm),
                                     ("ref", sample.ref, write_ppm),
                                     ("mask_bg", sample.mask_bg, write_pgm),
                                     ("mask_ref", sample.mask_ref, write_pgm)):
                name = f"{sid}_{key}.{'ppm' if writer is write_ppm else 'pgm'}"
                writer(directory / name, arr)
                record[key] = name
            manifest.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(directory) -> list[CompositionSample]:
    directory = Path(directory)
    manifest_path = directory / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {directory}")
    samples = []
    with open(manifest_path, encoding="utf-8") as manifest:
        for line in manifest:
            rec = json.loads(line)
            samples.append(CompositionSample(
                gt=read_ppm(directory / rec["gt"]),
                bg=read_ppm(directory / rec["bg"]),
                ref=read_ppm(directory / rec["ref"]),
                mask_bg=read_mask(directory / rec["mask_bg"]),
                mask_ref=read_mask(directory / rec["mask_ref"]),
                pose=rec.get("pose") or {},
                sample_id=rec["id"],
                seed=rec.get("seed")))
    return samples
