"""Detection evaluation: greedy matching at IoU 0.5, per-class AP, mAP.

AP uses the all-point interpolation: rank every detection of a class across
all images by combined score, match greedily (each ground truth at most
once, best IoU wins), then integrate max-precision-to-the-right over the
recall increments. mAP averages classes that have at least one ground-truth
instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .architecture import Network
from .augment import letterbox, unletterbox_box
from .autograd import no_grad
from .boxes import Anchor, BoxXYXY, Detection, decode, iou, nms, yolo_to_xyxy
from .training import BatchScaleTargets, Sample, batch_metrics, encode_batch


def average_precision(dets_per_image: list[list[Detection]],
                      gts_per_image: list[list[tuple[BoxXYXY, int]]],
                      class_id: int, iou_threshold: float = 0.5) -> float | None:
    """AP for one class; None when the class has no ground truth."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    gt_boxes = [[box for box, cid in gts if cid == class_id] for gts in gts_per_image]
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        return None

    ranked: list[tuple[float, int, int]] = []  # (-score, image, index) keeps ties stable
    for img, dets in enumerate(dets_per_image):
        for idx, det in enumerate(dets):
            if det.class_id == class_id:
                ranked.append((-det.score, img, idx))
    if not ranked:
        return 0.0
    ranked.sort()

    matched = [set() for _ in gts_per_image]
    tp = np.zeros(len(ranked))
    for rank, (_, img, idx) in enumerate(ranked):
        det = dets_per_image[img][idx]
        best_iou, best_gt = 0.0, -1
        for gi, gt_box in enumerate(gt_boxes[img]):
            if gi in matched[img]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap > best_iou:
                best_iou, best_gt = overlap, gi
        if best_gt >= 0 and best_iou >= iou_threshold:
            matched[img].add(best_gt)
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(ranked) + 1)
    # all-point interpolation: running max of precision from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * interp))


def mean_ap(per_class: dict[int, float | None]) -> float:
    values = [ap for ap in per_class.values() if ap is not None]
    if not values:
        raise ValueError("no class has ground-truth instances")
    return float(np.mean(values))


@dataclass
class EvalResult:
    per_class_ap: dict[int, float | None]
    map: float
    class_acc: float
    obj_acc: float
    noobj_acc: float
    images: int


# -- the shared decode path --------------------------------------------------------


def decode_heads(heads, anchors_by_scale: list[list[Anchor]], n_images: int,
                 conf_threshold: float = 0.001, nms_iou: float = 0.5) -> list[list[Detection]]:
    """Decode both raw head tensors and apply class-wise NMS per image."""
    per_image: list[list[Detection]] = [[] for _ in range(n_images)]
    for head, anchors, stride in zip(heads, anchors_by_scale, (32, 16)):
        data = head.data if hasattr(head, "data") else np.asarray(head)
        for img, dets in enumerate(decode(data, anchors, stride, conf_threshold)):
            per_image[img].extend(dets)
    return [nms(dets, nms_iou) for dets in per_image]


def detect_batch(net: Network, images: np.ndarray, anchors_by_scale: list[list[Anchor]],
                 conf_threshold: float = 0.001, nms_iou: float = 0.5) -> list[list[Detection]]:
    """Forward + decode + class-wise NMS for a float CHW batch (input space)."""
    with no_grad():
        heads = net.forward(images, training=False)
    return decode_heads(heads, anchors_by_scale, images.shape[0], conf_threshold, nms_iou)


def detect_image(net: Network, image: np.ndarray, anchors_by_scale: list[list[Anchor]],
                 conf_threshold: float = 0.001, nms_iou: float = 0.5) -> list[Detection]:
    """Detections for one uint8 RGB image, boxes in original pixel coordinates."""
    size = net.spec.input_size
    boxed, _ = letterbox(image, [], size)
    chw = boxed.astype(np.float32).transpose(2, 0, 1) / 255.0
    dets = detect_batch(net, chw[None], anchors_by_scale, conf_threshold, nms_iou)[0]
    h, w = image.shape[:2]
    out = []
    for det in dets:
        xmin, ymin, xmax, ymax = unletterbox_box(
            det.box.xmin, det.box.ymin, det.box.xmax, det.box.ymax, w, h, size
        )
        out.append(
            Detection(BoxXYXY(xmin, ymin, xmax, ymax), det.objectness, det.class_id,
                      det.class_score)
        )
    return out


def evaluate_samples(net: Network, samples: list[Sample],
                     anchors_by_scale: list[list[Anchor]], num_classes: int,
                     input_size: int, conf_threshold: float = 0.001,
                     nms_iou: float = 0.5, iou_threshold: float = 0.5,
                     batch_size: int = 4, ignore_iou: float = 0.5) -> EvalResult:
    """mAP plus the three cell accuracies over already-loaded samples.

    Images are letterboxed to the network input; matching happens in that
    space (letterboxing is a similarity transform, so IoU is unchanged).
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample set")
    all_dets: list[list[Detection]] = []
    all_gts: list[list[tuple[BoxXYXY, int]]] = []
    hits = np.zeros(3)
    totals = np.zeros(3)

    for b0 in range(0, len(samples), batch_size):
        chunk = samples[b0 : b0 + batch_size]
        images, gts = [], []
        for sample in chunk:
            boxed, boxes = letterbox(sample.image, sample.boxes, input_size)
            images.append(boxed.astype(np.float32).transpose(2, 0, 1) / 255.0)
            gts.append(list(zip(boxes, sample.class_ids)))
        batch = np.stack(images)
        with no_grad():
            heads = net.forward(batch, training=False)
        all_dets.extend(
            decode_heads(heads, anchors_by_scale, batch.shape[0], conf_threshold, nms_iou)
        )
        for gt in gts:
            all_gts.append(
                [(yolo_to_xyxy(box, input_size, input_size), cid) for box, cid in gt]
            )
        # cell accuracies need encoded targets for the same batch
        targets = encode_batch(gts, anchors_by_scale, input_size, num_classes, ignore_iou)
        accs = batch_metrics(heads, targets)
        weights = _metric_supports(targets)
        hits += np.array(accs) / 100.0 * weights
        totals += weights

    class_acc, obj_acc, noobj_acc = [
        100.0 * h / t if t > 0 else 100.0 for h, t in zip(hits, totals)
    ]
    per_class = {
        cid: average_precision(all_dets, all_gts, cid, iou_threshold)
        for cid in range(num_classes)
    }
    return EvalResult(
        per_class_ap=per_class, map=mean_ap(per_class),
        class_acc=class_acc, obj_acc=obj_acc, noobj_acc=noobj_acc,
        images=len(samples),
    )


def _metric_supports(targets: list[BatchScaleTargets]) -> np.ndarray:
    n_pos = sum(int(t.pos.sum()) for t in targets)
    n_neg = sum(int(t.neg.sum()) for t in targets)
    return np.array([n_pos, n_pos, n_neg], dtype=np.float64)
