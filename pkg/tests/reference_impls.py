"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (scalar loops, brute force, plain
Python floats) and shares no code with the package paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Direct six-loop cross-correlation (plus the batch loop)."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    assert c == ci
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for b in range(n):
        for oc in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                ih = i * stride - pad + ki
                                iw = j * stride - pad + kj
                                if 0 <= ih < h and 0 <= iw < wd:
                                    acc += float(x[b, ic, ih, iw]) * float(w[oc, ic, ki, kj])
                    out[b, oc, i, j] = acc
    return out


def scalar_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def scalar_decode(head: np.ndarray, anchors: list[tuple[float, float]], stride: int,
                  conf_threshold: float) -> list[list[tuple]]:
    """Per-cell loop re-implementation of head decoding.

    Returns, per image, tuples of
    (class_id, objectness, class_score, xmin, ymin, xmax, ymax) in the same
    anchor/row/column visiting order the vectorized path uses.
    """
    n, ch, s, _ = head.shape
    b = len(anchors)
    nc = ch // b - 5
    img_size = float(s * stride)
    head = head.reshape(n, b, 5 + nc, s, s).astype(np.float64)
    out = []
    for img in range(n):
        dets = []
        for a in range(b):
            for i in range(s):
                for j in range(s):
                    v = head[img, a, :, i, j]
                    obj = scalar_sigmoid(float(v[4]))
                    probs = [scalar_sigmoid(float(v[5 + q])) for q in range(nc)]
                    best = max(range(nc), key=lambda q: probs[q])
                    score = obj * probs[best]
                    if score < conf_threshold:
                        continue
                    bx = (scalar_sigmoid(float(v[0])) + j) * stride
                    by = (scalar_sigmoid(float(v[1])) + i) * stride
                    bw = anchors[a][0] * math.exp(float(v[2]))
                    bh = anchors[a][1] * math.exp(float(v[3]))
                    xmin = min(max(bx - bw / 2.0, 0.0), img_size)
                    ymin = min(max(by - bh / 2.0, 0.0), img_size)
                    xmax = min(max(bx + bw / 2.0, 0.0), img_size)
                    ymax = min(max(by + bh / 2.0, 0.0), img_size)
                    dets.append((best, obj, probs[best], xmin, ymin, xmax, ymax))
        out.append(dets)
    return out


def _iou_tuple(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes: list[tuple], scores: list[float], classes: list[int],
                    iou_threshold: float) -> list[int]:
    """O(n^2) suppression by repeatedly taking the best remaining detection.

    Returns input indices in final output order: score descending, ties by
    class then input index, suppressing any remaining same-class box whose
    IoU with a kept box exceeds the threshold.
    """
    alive = set(range(len(boxes)))
    kept: list[int] = []
    while alive:
        best = min(alive, key=lambda i: (-scores[i], classes[i], i))
        kept.append(best)
        alive.remove(best)
        for other in list(alive):
            if classes[other] == classes[best] and _iou_tuple(boxes[other], boxes[best]) > iou_threshold:
                alive.remove(other)
    kept.sort(key=lambda i: (-scores[i], classes[i], i))
    return kept


class ScalarAdam:
    """Plain-float Adam with L2-in-gradient decay, one instance per parameter."""

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, theta: float, grad: float) -> float:
        self.t += 1
        g = grad + self.wd * theta
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (math.sqrt(vhat) + self.eps)


def wh_iou_np(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(
        wh[:, None, 1], centroids[None, :, 1]
    )
    union = wh[:, 0:1] * wh[:, 1:2] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def restart_kmeans_mean_iou(samples: np.ndarray, k: int, restarts: int = 40,
                            iters: int = 200, seed: int = 1234) -> float:
    """Best mean best-anchor IoU over many random-restart Lloyd runs (mean update)."""
    wh = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        centroids = wh[rng.choice(len(wh), size=k, replace=False)].copy()
        for _ in range(iters):
            assign = wh_iou_np(wh, centroids).argmax(axis=1)
            new = centroids.copy()
            for c in range(k):
                members = wh[assign == c]
                if len(members):
                    new[c] = members.mean(axis=0)
            if np.allclose(new, centroids):
                break
            centroids = new
        best = max(best, float(wh_iou_np(wh, centroids).max(axis=1).mean()))
    return best


def quantile_anchor_mean_iou(samples: np.ndarray, k: int) -> float:
    """Axis-aligned quantile baseline: paired per-dimension quantiles."""
    wh = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    qs = (np.arange(k) + 0.5) / k
    anchors = np.stack([np.quantile(wh[:, 0], qs), np.quantile(wh[:, 1], qs)], axis=1)
    return float(wh_iou_np(wh, anchors).max(axis=1).mean())


def interp_average_precision(tp_flags: list[int], n_gt: int) -> float:
    """All-point interpolated AP from an already-ranked TP/FP sequence."""
    tps = 0
    points = []
    for rank, flag in enumerate(tp_flags, start=1):
        tps += flag
        points.append((tps / n_gt, tps / rank))
    ap = 0.0
    prev_recall = 0.0
    for idx, (recall, _) in enumerate(points):
        max_prec = max(p for r, p in points[idx:])
        ap += (recall - prev_recall) * max_prec
        prev_recall = recall
    return ap
