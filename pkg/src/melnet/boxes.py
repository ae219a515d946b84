"""Box geometry, the grid-cell codec, IoU, and non-maximum suppression.

Raw head tensors hold, per anchor slot and cell, the 4 box offsets followed
by an objectness logit and per-class logits. Decoding follows

    bx = (sigmoid(tx) + cx) * stride      bw = pw * exp(tw)
    by = (sigmoid(ty) + cy) * stride      bh = ph * exp(th)

and encoding inverts it exactly, so a head tensor filled with encoded
targets decodes back to the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOGIT_CLIP = 1e-9  # fractional cell offsets are clamped into (0, 1) before the inverse sigmoid


@dataclass(frozen=True)
class BoxXYXY:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"invalid box corners: {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def clamped(self, img_w: float, img_h: float) -> "BoxXYXY":
        return BoxXYXY(
            min(max(self.xmin, 0.0), img_w),
            min(max(self.ymin, 0.0), img_h),
            min(max(self.xmax, 0.0), img_w),
            min(max(self.ymax, 0.0), img_h),
        )


@dataclass(frozen=True)
class BoxYolo:
    xc: float
    yc: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.xc, self.yc, self.w, self.h):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"normalized box field out of [0,1]: {self}")


@dataclass(frozen=True)
class Anchor:
    pw: float
    ph: float

    def __post_init__(self):
        if self.pw <= 0 or self.ph <= 0:
            raise ValueError(f"anchor sides must be positive: {self}")

    @property
    def area(self) -> float:
        return self.pw * self.ph


@dataclass(frozen=True)
class Detection:
    box: BoxXYXY
    objectness: float
    class_id: int
    class_score: float

    @property
    def score(self) -> float:
        return self.objectness * self.class_score


def iou(a: BoxXYXY, b: BoxXYXY) -> float:
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def wh_iou(w1: float, h1: float, w2: float, h2: float) -> float:
    """IoU of two origin-centered boxes given only their sides."""
    inter = min(w1, w2) * min(h1, h2)
    union = w1 * h1 + w2 * h2 - inter
    if union <= 0:
        return 0.0
    return inter / union


def xyxy_to_yolo(box: BoxXYXY, img_w: float, img_h: float) -> BoxYolo:
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"degenerate image dimensions {img_w}x{img_h}")
    box = box.clamped(img_w, img_h)
    return BoxYolo(
        (box.xmin + box.xmax) / (2.0 * img_w),
        (box.ymin + box.ymax) / (2.0 * img_h),
        (box.xmax - box.xmin) / img_w,
        (box.ymax - box.ymin) / img_h,
    )


def yolo_to_xyxy(box: BoxYolo, img_w: float, img_h: float) -> BoxXYXY:
    if img_w <= 0 or img_h <= 0:
        raise ValueError(f"degenerate image dimensions {img_w}x{img_h}")
    half_w = box.w * img_w / 2.0
    half_h = box.h * img_h / 2.0
    cx = box.xc * img_w
    cy = box.yc * img_h
    return BoxXYXY(cx - half_w, cy - half_h, cx + half_w, cy + half_h)


# -- decoding ----------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode(head: np.ndarray, anchors: list[Anchor], stride: int,
           conf_threshold: float = 0.001) -> list[list[Detection]]:
    """Turn one raw head tensor (n, B*(5+C), S, S) into detections per image.

    Confidence is objectness times the best class probability; detections
    under ``conf_threshold`` are dropped and boxes are clamped to the input
    square before they are returned.
    """
    if head.ndim != 4:
        raise ValueError("decode expects a rank-4 head tensor")
    n, ch, s, s2 = head.shape
    if s != s2:
        raise ValueError("decode expects square grids")
    b = len(anchors)
    if b == 0 or ch % b != 0 or ch // b < 6:
        raise ValueError(f"head channel count {ch} does not match {b} anchors")
    nc = ch // b - 5
    img_size = float(s * stride)

    head = head.reshape(n, b, 5 + nc, s, s).astype(np.float64)
    txy = _sigmoid(head[:, :, 0:2])
    twh = head[:, :, 2:4]
    obj = _sigmoid(head[:, :, 4])
    cls = _sigmoid(head[:, :, 5:])

    cols = np.arange(s).reshape(1, 1, 1, s)
    rows = np.arange(s).reshape(1, 1, s, 1)
    bx = (txy[:, :, 0] + cols) * stride
    by = (txy[:, :, 1] + rows) * stride
    pw = np.array([a.pw for a in anchors]).reshape(1, b, 1, 1)
    ph = np.array([a.ph for a in anchors]).reshape(1, b, 1, 1)
    bw = pw * np.exp(twh[:, :, 0])
    bh = ph * np.exp(twh[:, :, 1])

    class_id = cls.argmax(axis=2)
    class_score = cls.max(axis=2)
    score = obj * class_score

    out: list[list[Detection]] = []
    for img in range(n):
        keep = np.argwhere(score[img] >= conf_threshold)
        dets = []
        for a, i, j in keep:
            half_w, half_h = bw[img, a, i, j] / 2.0, bh[img, a, i, j] / 2.0
            box = BoxXYXY(
                bx[img, a, i, j] - half_w,
                by[img, a, i, j] - half_h,
                bx[img, a, i, j] + half_w,
                by[img, a, i, j] + half_h,
            ).clamped(img_size, img_size)
            dets.append(
                Detection(
                    box=box,
                    objectness=float(obj[img, a, i, j]),
                    class_id=int(class_id[img, a, i, j]),
                    class_score=float(class_score[img, a, i, j]),
                )
            )
        out.append(dets)
    return out


# -- encoding -----------------------------------------------------------------


@dataclass
class ScaleTarget:
    """Regression/objectness/class targets plus disjoint anchor-cell masks."""

    target: np.ndarray       # (B, 5+C, S, S), t-space box values, 0/1 obj and class
    pos_mask: np.ndarray     # (B, S, S) bool
    ignore_mask: np.ndarray  # (B, S, S) bool
    neg_mask: np.ndarray     # (B, S, S) bool
    anchors: list[Anchor]
    stride: int


@dataclass
class EncodedTargets:
    scales: list[ScaleTarget]  # index 0: stride-32 head, index 1: stride-16 head

    def total_positives(self) -> int:
        return int(sum(st.pos_mask.sum() for st in self.scales))


def _inv_sigmoid(f: float) -> float:
    f = min(max(f, LOGIT_CLIP), 1.0 - LOGIT_CLIP)
    return math.log(f / (1.0 - f))


def encode_targets(gt: list[tuple[BoxYolo, int]], anchors_by_scale: list[list[Anchor]],
                   grid_sizes: list[int], input_size: int, num_classes: int,
                   ignore_iou: float = 0.5) -> EncodedTargets:
    """Build head-shaped training targets for one image.

    Each ground-truth box gets exactly one positive anchor-cell across both
    scales: the anchor with the best width-height IoU whose cell is still
    free (falling back to the best one on collision). Non-best anchors with
    width-height IoU above ``ignore_iou`` are masked out of the negative set
    at the box's cell.
    """
    if len(anchors_by_scale) != len(grid_sizes):
        raise ValueError("anchors_by_scale and grid_sizes must align")
    scales: list[ScaleTarget] = []
    for anchors, s in zip(anchors_by_scale, grid_sizes):
        b = len(anchors)
        stride = input_size // s
        if stride * s != input_size:
            raise ValueError(f"grid size {s} does not divide input size {input_size}")
        scales.append(
            ScaleTarget(
                target=np.zeros((b, 5 + num_classes, s, s), dtype=np.float32),
                pos_mask=np.zeros((b, s, s), dtype=bool),
                ignore_mask=np.zeros((b, s, s), dtype=bool),
                neg_mask=np.ones((b, s, s), dtype=bool),
                anchors=list(anchors),
                stride=stride,
            )
        )

    flat_anchors = [
        (si, ai, a) for si, st in enumerate(scales) for ai, a in enumerate(st.anchors)
    ]

    for box, class_id in gt:
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"degenerate ground-truth box {box}")
        if not 0 <= class_id < num_classes:
            raise ValueError(f"class id {class_id} out of range 0..{num_classes - 1}")
        w_px = box.w * input_size
        h_px = box.h * input_size
        ious = [wh_iou(w_px, h_px, a.pw, a.ph) for _, _, a in flat_anchors]
        order = sorted(range(len(flat_anchors)), key=lambda i: (-ious[i], i))

        def cell_of(si: int) -> tuple[int, int]:
            s = scales[si].pos_mask.shape[1]
            j = min(int(box.xc * s), s - 1)
            i = min(int(box.yc * s), s - 1)
            return i, j

        chosen = order[0]
        for cand in order:
            si, ai, _ = flat_anchors[cand]
            i, j = cell_of(si)
            if not scales[si].pos_mask[ai, i, j]:
                chosen = cand
                break

        si, ai, anchor = flat_anchors[chosen]
        st = scales[si]
        i, j = cell_of(si)
        s = st.pos_mask.shape[1]
        st.pos_mask[ai, i, j] = True
        st.neg_mask[ai, i, j] = False
        st.ignore_mask[ai, i, j] = False
        tgt = st.target[ai, :, i, j]
        tgt[0] = _inv_sigmoid(box.xc * s - j)
        tgt[1] = _inv_sigmoid(box.yc * s - i)
        tgt[2] = math.log(w_px / anchor.pw)
        tgt[3] = math.log(h_px / anchor.ph)
        tgt[4] = 1.0
        tgt[5:] = 0.0
        tgt[5 + class_id] = 1.0

        # near-miss anchors are neither positive nor negative
        for idx, (osi, oai, _) in enumerate(flat_anchors):
            if idx == chosen or ious[idx] <= ignore_iou:
                continue
            ost = scales[osi]
            oi, oj = cell_of(osi)
            if not ost.pos_mask[oai, oi, oj]:
                ost.ignore_mask[oai, oi, oj] = True
                ost.neg_mask[oai, oi, oj] = False

    return EncodedTargets(scales)


def targets_to_head(st: ScaleTarget, positive_logit: float = 12.0,
                    negative_logit: float = -12.0) -> np.ndarray:
    """Render one scale's targets as a raw head tensor (batch of one).

    Positive cells carry the encoded box values and a saturated objectness
    logit; everywhere else objectness is strongly negative. Used by the
    round-trip checks and synthetic-data tooling.
    """
    b, ch, s, _ = st.target.shape
    head = np.zeros((1, b, ch, s, s), dtype=np.float64)
    head[0, :, 4] = negative_logit
    pos = np.argwhere(st.pos_mask)
    for a, i, j in pos:
        head[0, a, 0:4, i, j] = st.target[a, 0:4, i, j]
        head[0, a, 4, i, j] = positive_logit
        cls = st.target[a, 5:, i, j]
        head[0, a, 5:, i, j] = np.where(cls > 0.5, positive_logit, negative_logit)
    return head.reshape(1, b * ch, s, s)


# -- suppression ----------------------------------------------------------------


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Class-wise greedy suppression.

    Within a class, detections are visited by descending combined score
    (ties: input order); a detection is dropped when it overlaps an already
    kept box of the same class with IoU strictly above the threshold. The
    result is sorted by score descending (stable).
    """
    kept: list[tuple[int, Detection]] = []
    by_class: dict[int, list[tuple[int, Detection]]] = {}
    for idx, det in enumerate(dets):
        by_class.setdefault(det.class_id, []).append((idx, det))
    for class_id in sorted(by_class):
        group = sorted(by_class[class_id], key=lambda t: (-t[1].score, t[0]))
        chosen: list[tuple[int, Detection]] = []
        for idx, det in group:
            if all(iou(det.box, k.box) <= iou_threshold for _, k in chosen):
                chosen.append((idx, det))
        kept.extend(chosen)
    kept.sort(key=lambda t: (-t[1].score, t[1].class_id, t[0]))
    return [det for _, det in kept]
