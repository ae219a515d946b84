"""Anchor priors from box dimensions via IoU-distance k-means.

Distance between a sample and a centroid is 1 - IoU of the origin-centered
boxes. Seeding is farthest-point after one seeded random pick; updates take
the per-cluster median of each side, and a candidate centroid is kept only
if it does not lower its cluster's summed IoU, which makes the mean
best-anchor IoU provably non-decreasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boxes import Anchor


@dataclass(frozen=True)
class KMeansResult:
    anchors: list[Anchor]      # sorted by area ascending
    mean_iou: float            # mean best-anchor IoU over the samples
    iou_history: list[float]   # mean best-anchor IoU after each iteration
    iterations: int


def _pairwise_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of origin-centered boxes, (n, 2) x (k, 2) -> (n, k)."""
    inter = np.minimum(wh[:, None, 0], centroids[None, :, 0]) * np.minimum(
        wh[:, None, 1], centroids[None, :, 1]
    )
    union = wh[:, 0:1] * wh[:, 1:2] + (centroids[:, 0] * centroids[:, 1])[None, :] - inter
    return inter / union


def kmeans_iou(samples, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    wh = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if wh.size == 0:
        raise ValueError("cannot cluster an empty sample set")
    if np.any(wh <= 0):
        raise ValueError("samples must have positive width and height")
    distinct = np.unique(wh, axis=0)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(distinct):
        raise ValueError(f"k={k} exceeds the {len(distinct)} distinct samples")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, 2))
    centroids[0] = wh[rng.integers(len(wh))]
    for c in range(1, k):
        dist = 1.0 - _pairwise_iou(wh, centroids[:c]).max(axis=1)
        centroids[c] = wh[int(np.argmax(dist))]  # argmax ties -> lowest sample index

    history: list[float] = []
    assign = None
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        ious = _pairwise_iou(wh, centroids)
        new_assign = ious.argmax(axis=1)  # ties -> lowest centroid index
        for c in range(k):
            members = wh[new_assign == c]
            if len(members) == 0:
                continue
            candidate = np.median(members, axis=0)
            # keep the old centroid when the median would lower the cluster fit
            old_iou = _pairwise_iou(members, centroids[c : c + 1]).sum()
            new_iou = _pairwise_iou(members, candidate[None, :]).sum()
            if new_iou >= old_iou:
                centroids[c] = candidate
        history.append(float(_pairwise_iou(wh, centroids).max(axis=1).mean()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign

    order = np.lexsort((centroids[:, 0], centroids[:, 0] * centroids[:, 1]))
    centroids = centroids[order]
    anchors = [Anchor(float(w), float(h)) for w, h in centroids]
    return KMeansResult(anchors=anchors, mean_iou=history[-1], iou_history=history,
                        iterations=iterations)


def assign_to_scales(anchors: list[Anchor], num_scales: int = 2) -> list[list[Anchor]]:
    """Split area-ascending anchors across heads: largest half to stride 32.

    Returns per-head lists in head order (stride-32 first, then stride-16),
    preserving the input order inside each half.
    """
    if len(anchors) % num_scales != 0:
        raise ValueError(f"{len(anchors)} anchors do not divide into {num_scales} scales")
    per = len(anchors) // num_scales
    halves = [list(anchors[i * per : (i + 1) * per]) for i in range(num_scales)]
    return list(reversed(halves))


def mean_best_iou(samples, anchors: list[Anchor]) -> float:
    wh = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    cents = np.array([[a.pw, a.ph] for a in anchors])
    return float(_pairwise_iou(wh, cents).max(axis=1).mean())


def save_anchors(path, result: KMeansResult, k: int, seed: int) -> None:
    lines = [f"# anchors k={k} seed={seed} mean_iou={result.mean_iou:.6f}"]
    lines += [f"{a.pw:.6f} {a.ph:.6f}" for a in result.anchors]
    Path(path).write_text("\n".join(lines) + "\n")


def load_anchors(path) -> list[Anchor]:
    anchors = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'pw ph', got {line!r}")
        anchors.append(Anchor(float(parts[0]), float(parts[1])))
    if not anchors:
        raise ValueError(f"{path} contains no anchors")
    return anchors
