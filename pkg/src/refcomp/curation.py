"""Frame curation for reference/target pair mining.

Implements the deterministic core of the pipeline: sharpness-based blur
rejection, connected-component mask filtering, cosine clustering of
object embeddings, and reference/target pairing.  The model-backed steps
(detection, category verification, feature embedding) are pluggable
hooks so scripted stand-ins can drive the pipeline end to end.

Sharpness scores are computed on the 0-255 luma scale regardless of the
[0, 1] float convention used for stored images.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SOBEL_VARIANCE_THRESHOLD = 1600.0
LAPLACIAN_VARIANCE_THRESHOLD = 800.0
LARGEST_COMPONENT_RATIO_THRESHOLD = 0.95
CLUSTER_COSINE_THRESHOLD = 0.85


@dataclass(frozen=True)
class CurationConfig:
    sobel_threshold: float = SOBEL_VARIANCE_THRESHOLD
    laplacian_threshold: float = LAPLACIAN_VARIANCE_THRESHOLD
    component_ratio_threshold: float = LARGEST_COMPONENT_RATIO_THRESHOLD
    cluster_threshold: float = CLUSTER_COSINE_THRESHOLD


@dataclass
class MaskCandidate:
    label: str
    mask: np.ndarray  # (H, W) binary


@dataclass
class FrameRecord:
    image: np.ndarray           # (3, H, W) or (H, W) floats in [0, 1]
    source_id: str
    frame_index: int
    candidates: list = field(default_factory=list)
    sobel_var: float | None = None
    laplacian_var: float | None = None


@dataclass
class OracleHooks:
    """Stand-ins for the model-backed pipeline steps.

    detector: frame image -> list of (label, (y0, x0, y1, x1)) boxes.
    verifier: (crop, label) -> bool.
    embedder: crop -> unit-norm 1-D feature vector.
    """

    detector: Callable[[np.ndarray], list]
    verifier: Callable[[np.ndarray, str], bool]
    embedder: Callable[[np.ndarray], np.ndarray]


def _luma255(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        r, g, b = img[0], img[1], img[2]
        y = 0.299 * r + 0.587 * g + 0.114 * b
    elif img.ndim == 2:
        y = img
    else:
        raise ValueError(f"expected (3, H, W) or (H, W) image, got {img.shape}")
    return y.astype(np.float64) * 255.0


def sharpness_scores(img: np.ndarray) -> tuple[float, float]:
    """Sobel gradient-magnitude variance and 4-neighbour Laplacian variance,
    both over valid interior pixels of the 0-255 grayscale frame."""
    y = _luma255(img)
    if y.shape[0] < 3 or y.shape[1] < 3:
        raise ValueError(f"image {y.shape} too small for 3x3 operators")
    gx = (y[:-2, 2:] + 2 * y[1:-1, 2:] + y[2:, 2:]
          - y[:-2, :-2] - 2 * y[1:-1, :-2] - y[2:, :-2])
    gy = (y[2:, :-2] + 2 * y[2:, 1:-1] + y[2:, 2:]
          - y[:-2, :-2] - 2 * y[:-2, 1:-1] - y[:-2, 2:])
    magnitude = np.sqrt(gx * gx + gy * gy)
    lap = (y[:-2, 1:-1] + y[2:, 1:-1] + y[1:-1, :-2] + y[1:-1, 2:]
           - 4.0 * y[1:-1, 1:-1])
    return float(magnitude.var()), float(lap.var())


def blur_filter(record: FrameRecord, cfg: CurationConfig = CurationConfig()) -> bool:
    """True = keep.  A frame is discarded when either sharpness score falls
    strictly below its threshold."""
    if record.sobel_var is None or record.laplacian_var is None:
        record.sobel_var, record.laplacian_var = sharpness_scores(record.image)
    return not (record.sobel_var < cfg.sobel_threshold
                or record.laplacian_var < cfg.laplacian_threshold)


def largest_cc_ratio(mask: np.ndarray) -> float:
    """Area of the largest 8-connected component over total foreground area."""
    fg = np.asarray(mask) > 0
    total = int(fg.sum())
    if total == 0:
        raise ValueError("mask has no foreground")
    h, w = fg.shape
    seen = np.zeros_like(fg, dtype=bool)
    best = 0
    for sy, sx in zip(*np.nonzero(fg)):
        if seen[sy, sx]:
            continue
        size = 0
        queue = deque([(sy, sx)])
        seen[sy, sx] = True
        while queue:
            y, x = queue.popleft()
            size += 1
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and fg[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
        best = max(best, size)
    return best / total


def mask_filter(mask: np.ndarray, cfg: CurationConfig = CurationConfig()) -> bool:
    """True = keep.  Kept only when the largest component holds strictly more
    than the configured share of the foreground."""
    return largest_cc_ratio(mask) > cfg.component_ratio_threshold


def cluster_objects(embeddings: Sequence[np.ndarray],
                    threshold: float = CLUSTER_COSINE_THRESHOLD) -> list[int]:
    """Single-linkage agglomeration: merge while any inter-cluster cosine is
    at or above the threshold.  Returns one cluster id per input, numbered
    by first appearance."""
    n = len(embeddings)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if float(np.dot(embeddings[i], embeddings[j])) >= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    labels = {}
    out = []
    for i in range(n):
        root = find(i)
        if root not in labels:
            labels[root] = len(labels)
        out.append(labels[root])
    return out


def _crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask > 0)
    (y0, x0), (y1, x1) = idx.min(axis=0), idx.max(axis=0)
    masked = image * mask if image.ndim == 2 else image * mask[None]
    return masked[..., y0:y1 + 1, x0:x1 + 1]


def default_hooks() -> OracleHooks:
    """Deterministic model-free hooks: the detector proposes nothing (labels
    pass through), the verifier accepts everything, and the embedder is an
    8x8 grayscale thumbnail normalized to unit length."""

    def detector(_frame):
        return None  # no proposals: candidate labels are trusted as-is

    def verifier(_crop, _label):
        return True

    def embedder(crop):
        y = _luma255(crop) / 255.0
        h, w = y.shape
        ys = np.clip((np.arange(8) + 0.5) * h / 8, 0, h - 1).astype(int)
        xs = np.clip((np.arange(8) + 0.5) * w / 8, 0, w - 1).astype(int)
        thumb = y[np.ix_(ys, xs)].reshape(-1)
        norm = np.linalg.norm(thumb)
        if norm == 0:
            thumb = np.ones(64)
            norm = 8.0
        return (thumb / norm).astype(np.float64)

    return OracleHooks(detector, verifier, embedder)


def build_pairs(frames: Sequence[FrameRecord], hooks: OracleHooks,
                cfg: CurationConfig = CurationConfig()) -> dict:
    """Run the filtering pipeline and pair each clustered object's earliest
    frame (the reference) with every later frame that contains it.

    Returns a manifest dict with deterministic ordering: ``pairs`` is a list
    of {cluster, reference, target, masks} records plus summary counters.
    """
    kept = []
    dropped_blur = 0
    for record in frames:
        if not blur_filter(record, cfg):
            dropped_blur += 1
            continue
        kept.append(record)

    entries = []  # (record, candidate_pos, candidate, embedding)
    dropped_mask = 0
    dropped_label = 0
    dropped_verify = 0
    for record in kept:
        detected = hooks.detector(record.image)
        allowed = None if detected is None else {label for label, _ in detected}
        for pos, cand in enumerate(record.candidates):
            if not (np.asarray(cand.mask) > 0).any():
                dropped_mask += 1
                continue
            if not mask_filter(cand.mask, cfg):
                dropped_mask += 1
                continue
            if allowed is not None and cand.label not in allowed:
                dropped_label += 1
                continue
            crop = _crop(record.image, cand.mask)
            if not hooks.verifier(crop, cand.label):
                dropped_verify += 1
                continue
            entries.append((record, pos, cand, hooks.embedder(crop)))

    labels = cluster_objects([e[3] for e in entries], cfg.cluster_threshold)
    clusters: dict[int, list] = {}
    for lab, entry in zip(labels, entries):
        clusters.setdefault(lab, []).append(entry)

    pairs = []
    singletons = 0
    for lab in sorted(clusters):
        members = sorted(clusters[lab], key=lambda e: (e[0].source_id, e[0].frame_index, e[1]))
        if len(members) < 2:
            singletons += 1
            continue
        ref_record, ref_pos, ref_cand, _ = members[0]
        for record, pos, cand, _ in members[1:]:
            pairs.append({
                "cluster": lab,
                "reference": {"source": ref_record.source_id,
                              "frame": ref_record.frame_index,
                              "label": ref_cand.label, "candidate": ref_pos},
                "target": {"source": record.source_id, "frame": record.frame_index,
                           "label": cand.label, "candidate": pos},
                "masks": {"reference": ref_pos, "target": pos},
            })
    return {
        "pairs": pairs,
        "clusters": len(clusters),
        "singleton_clusters": singletons,
        "dropped": {"blur": dropped_blur, "mask": dropped_mask,
                    "label": dropped_label, "verify": dropped_verify},
    }


def write_pair_manifest(manifest: dict, path) -> None:
    """JSON-lines: one summary line then one line per pair, key-sorted so
    identical inputs produce byte-identical files."""
    with open(path, "w", encoding="utf-8") as fh:
        summary = {k: manifest[k] for k in ("clusters", "singleton_clusters", "dropped")}
        fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
        for pair in manifest["pairs"]:
            fh.write(json.dumps(pair, sort_keys=True) + "\n")
