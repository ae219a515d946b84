"""Bounding-box-aware image augmentation and letterboxing.

Every transform is a pure function of (image, boxes, parameters); ``augment``
draws the parameters from a seeded generator, so identical (input, plan,
seed) triples produce identical bytes. Images are uint8 RGB (h, w, 3);
boxes stay normalized to the current image throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import BoxYolo

GRAY = 114  # letterbox / rotation fill


@dataclass(frozen=True)
class AugmentPlan:
    hflip_prob: float = 0.5
    crop_prob: float = 0.5
    crop_min_scale: float = 0.6
    crop_keep_area: float = 0.25
    rotate_prob: float = 0.25
    max_rotation_deg: float = 10.0
    color_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2


NO_AUGMENT = AugmentPlan(hflip_prob=0.0, crop_prob=0.0, rotate_prob=0.0, color_prob=0.0)


def hflip(image: np.ndarray, boxes: list[BoxYolo]) -> tuple[np.ndarray, list[BoxYolo]]:
    flipped = image[:, ::-1].copy()
    return flipped, [BoxYolo(1.0 - b.xc, b.yc, b.w, b.h) for b in boxes]


def crop(image: np.ndarray, boxes: list[BoxYolo], rect: tuple[int, int, int, int],
         keep_area: float = 0.25) -> tuple[np.ndarray, list[BoxYolo], list[int]]:
    """Crop to ``rect`` = (x0, y0, w, h) pixels; drop boxes keeping < keep_area."""
    h, w = image.shape[:2]
    x0, y0, cw, ch = rect
    if not (0 <= x0 and 0 <= y0 and x0 + cw <= w and y0 + ch <= h and cw > 0 and ch > 0):
        raise ValueError(f"crop rect {rect} outside image {w}x{h}")
    out = image[y0 : y0 + ch, x0 : x0 + cw].copy()
    new_boxes, kept = [], []
    for i, b in enumerate(boxes):
        xmin = b.xc * w - b.w * w / 2 - x0
        xmax = b.xc * w + b.w * w / 2 - x0
        ymin = b.yc * h - b.h * h / 2 - y0
        ymax = b.yc * h + b.h * h / 2 - y0
        cxmin, cxmax = max(xmin, 0.0), min(xmax, float(cw))
        cymin, cymax = max(ymin, 0.0), min(ymax, float(ch))
        if cxmax <= cxmin or cymax <= cymin:
            continue
        area = (xmax - xmin) * (ymax - ymin)
        if (cxmax - cxmin) * (cymax - cymin) < keep_area * area:
            continue
        new_boxes.append(
            BoxYolo(
                (cxmin + cxmax) / (2 * cw),
                (cymin + cymax) / (2 * ch),
                (cxmax - cxmin) / cw,
                (cymax - cymin) / ch,
            )
        )
        kept.append(i)
    return out, new_boxes, kept


def rotate(image: np.ndarray, boxes: list[BoxYolo],
           degrees: float) -> tuple[np.ndarray, list[BoxYolo], list[int]]:
    """Rotate about the center (y-down axes), re-boxing rotated corners.

    The canvas keeps its size; exposed corners fill with gray. Boxes become
    the axis-aligned hull of their four rotated corners, clamped to the
    canvas; boxes pushed fully outside are dropped (indices reported in the
    third return value).
    """
    h, w = image.shape[:2]
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    # continuous coordinates: pixel (i, j) occupies [j, j+1) x [i, i+1),
    # rotation is about the image center (w/2, h/2)
    cx, cy = w / 2.0, h / 2.0

    # inverse-map output pixel centers onto the source grid, nearest neighbour
    ys, xs = np.mgrid[0:h, 0:w]
    ox = xs + 0.5 - cx
    oy = ys + 0.5 - cy
    sx = cos_t * ox + sin_t * oy + cx
    sy = -sin_t * ox + cos_t * oy + cy
    sxi = np.floor(sx).astype(np.int64)
    syi = np.floor(sy).astype(np.int64)
    valid = (sxi >= 0) & (sxi < w) & (syi >= 0) & (syi < h)
    out = np.full_like(image, GRAY)
    out[valid] = image[syi[valid], sxi[valid]]

    new_boxes, kept = [], []
    for i, b in enumerate(boxes):
        bx, by = b.xc * w, b.yc * h
        hw, hh = b.w * w / 2.0, b.h * h / 2.0
        corners = np.array(
            [[bx - hw, by - hh], [bx + hw, by - hh], [bx - hw, by + hh], [bx + hw, by + hh]]
        )
        rel = corners - [cx, cy]
        rot = np.stack(
            [cos_t * rel[:, 0] - sin_t * rel[:, 1], sin_t * rel[:, 0] + cos_t * rel[:, 1]],
            axis=1,
        ) + [cx, cy]
        xmin = max(float(rot[:, 0].min()), 0.0)
        xmax = min(float(rot[:, 0].max()), float(w))
        ymin = max(float(rot[:, 1].min()), 0.0)
        ymax = min(float(rot[:, 1].max()), float(h))
        if xmax <= xmin or ymax <= ymin:
            continue
        new_boxes.append(
            BoxYolo((xmin + xmax) / (2 * w), (ymin + ymax) / (2 * h),
                    (xmax - xmin) / w, (ymax - ymin) / h)
        )
        kept.append(i)
    return out, new_boxes, kept


def color_jitter(image: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0) -> np.ndarray:
    """Scale brightness/contrast/saturation; geometry untouched."""
    img = image.astype(np.float32)
    img = img * brightness
    mean = img.mean()
    img = (img - mean) * contrast + mean
    gray = img.mean(axis=2, keepdims=True)
    img = gray + (img - gray) * saturation
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def letterbox(image: np.ndarray, boxes: list[BoxYolo], size: int,
              fill: int = GRAY) -> tuple[np.ndarray, list[BoxYolo]]:
    """Aspect-preserving resize onto a size x size gray canvas."""
    h, w = image.shape[:2]
    scale = min(size / w, size / h)
    nw, nh = max(1, int(round(w * scale))), max(1, int(round(h * scale)))
    resized = _resize_bilinear(image, nw, nh)
    out = np.full((size, size, 3), fill, dtype=np.uint8)
    px = (size - nw) // 2
    py = (size - nh) // 2
    out[py : py + nh, px : px + nw] = resized
    new_boxes = [
        BoxYolo(
            (b.xc * nw + px) / size,
            (b.yc * nh + py) / size,
            b.w * nw / size,
            b.h * nh / size,
        )
        for b in boxes
    ]
    return out, new_boxes


def unletterbox_box(xmin: float, ymin: float, xmax: float, ymax: float,
                    orig_w: int, orig_h: int, size: int) -> tuple[float, float, float, float]:
    """Map letterboxed-pixel corners back to original image pixels."""
    scale = min(size / orig_w, size / orig_h)
    nw, nh = max(1, int(round(orig_w * scale))), max(1, int(round(orig_h * scale)))
    px = (size - nw) // 2
    py = (size - nh) // 2
    inv = lambda v, off, n, full: min(max((v - off) / (n / full), 0.0), float(full))
    return (
        inv(xmin, px, nw, orig_w),
        inv(ymin, py, nh, orig_h),
        inv(xmax, px, nw, orig_w),
        inv(ymax, py, nh, orig_h),
    )


def _resize_bilinear(image: np.ndarray, nw: int, nh: int) -> np.ndarray:
    from PIL import Image

    if (nw, nh) == (image.shape[1], image.shape[0]):
        return image.copy()
    return np.asarray(
        Image.fromarray(image, mode="RGB").resize((nw, nh), Image.BILINEAR), dtype=np.uint8
    )


def augment(image: np.ndarray, boxes: list[BoxYolo], plan: AugmentPlan,
            seed: int) -> tuple[np.ndarray, list[BoxYolo], list[int]]:
    """Apply the plan with parameters drawn from ``seed``.

    Returns (image, boxes, kept) where ``kept`` maps surviving boxes back to
    input indices (crops and rotations can drop boxes; callers with class
    lists index them with ``kept``). A call that would drop every box of a
    non-empty scene is the caller's signal to resample or skip.
    """
    rng = np.random.default_rng(seed)
    kept = list(range(len(boxes)))

    if plan.color_prob > 0 and rng.random() < plan.color_prob:
        image = color_jitter(
            image,
            brightness=1.0 + rng.uniform(-plan.brightness, plan.brightness),
            contrast=1.0 + rng.uniform(-plan.contrast, plan.contrast),
            saturation=1.0 + rng.uniform(-plan.saturation, plan.saturation),
        )

    if plan.rotate_prob > 0 and rng.random() < plan.rotate_prob:
        image, boxes, rot_kept = rotate(
            image, boxes, rng.uniform(-plan.max_rotation_deg, plan.max_rotation_deg)
        )
        kept = [kept[i] for i in rot_kept]

    if plan.crop_prob > 0 and rng.random() < plan.crop_prob:
        h, w = image.shape[:2]
        s = rng.uniform(plan.crop_min_scale, 1.0)
        cw, ch = max(1, int(round(w * s))), max(1, int(round(h * s)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        image, boxes, crop_kept = crop(image, boxes, (x0, y0, cw, ch), plan.crop_keep_area)
        kept = [kept[i] for i in crop_kept]

    if plan.hflip_prob > 0 and rng.random() < plan.hflip_prob:
        image, boxes = hflip(image, boxes)

    return image, boxes, kept
