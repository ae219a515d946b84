"""Composite detection loss, Adam with L2 weight decay, metrics, training loop.

The loss couples mean squared error on the sigmoid-space box offsets and the
raw log-space sizes at positive anchor-cells with binary cross-entropy on
objectness (positives toward 1, negatives toward 0, ignore cells excluded)
and per-class binary cross-entropy at positives:

    total = 5 * box + 1 * obj + 0.5 * noobj + 1 * cls        (default weights)

Weight decay enters the gradient (g + wd * theta), not the update rule.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .anchors import assign_to_scales
from .architecture import ArchSpec, Network, build
from .augment import NO_AUGMENT, AugmentPlan, augment, letterbox
from .autograd import Tensor, bce_with_logits, no_grad
from .boxes import Anchor, BoxYolo, EncodedTargets, encode_targets
from .weights import read_tensors, write_tensors


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 1
    input_size: int = 640
    seed: int = 0
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    lambda_cls: float = 1.0
    conf_threshold: float = 0.001
    nms_iou: float = 0.5
    ignore_iou: float = 0.5
    augment: bool = False

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "batch_size", "epochs", "input_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class LossParts:
    box: float
    obj: float
    noobj: float
    cls: float
    total: float


# -- target batching -------------------------------------------------------------


@dataclass
class BatchScaleTargets:
    target: np.ndarray  # (n, B, 5+C, S, S)
    pos: np.ndarray     # (n, B, S, S)
    ignore: np.ndarray
    neg: np.ndarray


def stack_targets(per_image: list[EncodedTargets]) -> list[BatchScaleTargets]:
    out = []
    for si in range(len(per_image[0].scales)):
        out.append(
            BatchScaleTargets(
                target=np.stack([t.scales[si].target for t in per_image]),
                pos=np.stack([t.scales[si].pos_mask for t in per_image]),
                ignore=np.stack([t.scales[si].ignore_mask for t in per_image]),
                neg=np.stack([t.scales[si].neg_mask for t in per_image]),
            )
        )
    return out


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def detection_loss(heads: tuple[Tensor, Tensor], targets: list[BatchScaleTargets],
                   cfg: TrainingConfig) -> tuple[Tensor, LossParts]:
    """Weighted sum of box / objectness / no-object / class terms.

    Each term is averaged over its own support pooled across both scales, so
    scales with more cells do not silently dominate.
    """
    if len(heads) != len(targets):
        raise ValueError("need one target block per head")

    dtype = heads[0].dtype
    box_sum = None
    obj_sum = None
    noobj_sum = None
    cls_sum = None
    n_pos = 0
    n_neg = 0
    num_classes = None

    for head, tgt in zip(heads, targets):
        n, ch, s, _ = head.shape
        b = tgt.pos.shape[1]
        c = ch // b - 5
        num_classes = c
        if tgt.target.shape != (n, b, 5 + c, s, s):
            raise ValueError(
                f"target shape {tgt.target.shape} does not match head {head.shape}"
            )
        overlap = (tgt.pos & tgt.ignore) | (tgt.pos & tgt.neg) | (tgt.ignore & tgt.neg)
        if overlap.any():
            raise ValueError("positive/ignore/negative masks must be disjoint")

        h = head.reshape(n, b, 5 + c, s, s)
        pos_f = tgt.pos.astype(dtype)
        n_pos += int(tgt.pos.sum())
        n_neg += int(tgt.neg.sum())

        # box: sigmoid-space offsets, raw log-space sizes
        pos4 = np.broadcast_to(pos_f[:, :, None], (n, b, 4, s, s))
        pred_xy = h[:, :, 0:2].sigmoid()
        tgt_xy = _np_sigmoid(tgt.target[:, :, 0:2]).astype(dtype)
        pred_wh = h[:, :, 2:4]
        tgt_wh = tgt.target[:, :, 2:4].astype(dtype)
        d_xy = (pred_xy - Tensor(tgt_xy)).square()
        d_wh = (pred_wh - Tensor(tgt_wh)).square()
        box_terms = (d_xy * Tensor(pos4[:, :, 0:2].copy())).sum() + (
            d_wh * Tensor(pos4[:, :, 2:4].copy())
        ).sum()
        box_sum = box_terms if box_sum is None else box_sum + box_terms

        # objectness split into positive and negative supports
        obj_bce = bce_with_logits(h[:, :, 4], tgt.pos.astype(dtype))
        obj_term = (obj_bce * Tensor(pos_f)).sum()
        noobj_term = (obj_bce * Tensor(tgt.neg.astype(dtype))).sum()
        obj_sum = obj_term if obj_sum is None else obj_sum + obj_term
        noobj_sum = noobj_term if noobj_sum is None else noobj_sum + noobj_term

        # classes at positives only
        posc = np.broadcast_to(pos_f[:, :, None], (n, b, c, s, s)).copy()
        cls_bce = bce_with_logits(h[:, :, 5:], tgt.target[:, :, 5:].astype(dtype))
        cls_term = (cls_bce * Tensor(posc)).sum()
        cls_sum = cls_term if cls_sum is None else cls_sum + cls_term

    box = box_sum / max(1, 4 * n_pos)
    obj = obj_sum / max(1, n_pos)
    noobj = noobj_sum / max(1, n_neg)
    cls = cls_sum / max(1, num_classes * n_pos)
    total = (
        box * cfg.lambda_box
        + obj * cfg.lambda_obj
        + noobj * cfg.lambda_noobj
        + cls * cfg.lambda_cls
    )
    parts = LossParts(
        box=float(box.data), obj=float(obj.data), noobj=float(noobj.data),
        cls=float(cls.data), total=float(total.data),
    )
    return total, parts


def batch_metrics(heads, targets: list[BatchScaleTargets]) -> tuple[float, float, float]:
    """(class_acc, obj_acc, noobj_acc) percentages pooled over both scales.

    Class accuracy: share of positive cells whose argmax class matches.
    Objectness: positive cells with probability > 0.5 (logit > 0); no-object:
    negative cells with probability < 0.5. Empty supports count as 100.
    """
    cls_hit = cls_total = obj_hit = obj_total = neg_hit = neg_total = 0
    for head, tgt in zip(heads, targets):
        data = head.data if isinstance(head, Tensor) else np.asarray(head)
        n, ch, s, _ = data.shape
        b = tgt.pos.shape[1]
        c = ch // b - 5
        h = data.reshape(n, b, 5 + c, s, s)
        pos = tgt.pos
        if pos.any():
            pred_cls = h[:, :, 5:].argmax(axis=2)
            true_cls = tgt.target[:, :, 5:].argmax(axis=2)
            cls_hit += int((pred_cls[pos] == true_cls[pos]).sum())
            cls_total += int(pos.sum())
            obj_hit += int((h[:, :, 4][pos] > 0).sum())
            obj_total += int(pos.sum())
        neg = tgt.neg
        neg_hit += int((h[:, :, 4][neg] < 0).sum())
        neg_total += int(neg.sum())
    pct = lambda hit, total: 100.0 * hit / total if total else 100.0
    return pct(cls_hit, cls_total), pct(obj_hit, obj_total), pct(neg_hit, neg_total)


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float32)}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        state = cls(t=int(arrays["adam.t"][0]))
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                state.m[key[len("adam.m."):]] = arr.copy()
            elif key.startswith("adam.v."):
                state.v[key[len("adam.v."):]] = arr.copy()
        return state


def adam_step(params: list[tuple[str, Tensor]], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place; L2 decay folds into the gradient."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# -- data plumbing ---------------------------------------------------------------------


@dataclass
class Sample:
    """One training example: uint8 RGB image plus normalized boxes."""

    image: np.ndarray
    boxes: list[BoxYolo]
    class_ids: list[int]


def prepare_sample(sample: Sample, input_size: int, plan: AugmentPlan,
                   seed: int) -> tuple[np.ndarray, list[tuple[BoxYolo, int]]]:
    """Augment + letterbox + scale to float CHW in [0, 1].

    Falls back to the unaugmented image when augmentation would drop every
    box of a non-empty scene.
    """
    image, boxes, kept = augment(sample.image, sample.boxes, plan, seed)
    classes = [sample.class_ids[i] for i in kept]
    if sample.boxes and not boxes:
        image, boxes, classes = sample.image, sample.boxes, list(sample.class_ids)
    image, boxes = letterbox(image, boxes, input_size)
    chw = image.astype(np.float32).transpose(2, 0, 1) / 255.0
    return chw, list(zip(boxes, classes))


def encode_batch(gt_per_image: list[list[tuple[BoxYolo, int]]], anchors_by_scale,
                 input_size: int, num_classes: int,
                 ignore_iou: float) -> list[BatchScaleTargets]:
    grid_sizes = [input_size // 32, input_size // 16]
    encoded = [
        encode_targets(gt, anchors_by_scale, grid_sizes, input_size, num_classes, ignore_iou)
        for gt in gt_per_image
    ]
    return stack_targets(encoded)


# -- metric log --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    epoch: int
    map: float
    loss: float
    class_acc: float
    obj_acc: float
    noobj_acc: float


CSV_FIELDS = ("epoch", "map", "loss", "class_acc", "obj_acc", "noobj_acc")


def write_metric_csv(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow(
                [row.epoch, f"{row.map:.6f}", f"{row.loss:.6f}", f"{row.class_acc:.4f}",
                 f"{row.obj_acc:.4f}", f"{row.noobj_acc:.4f}"]
            )


def read_metric_csv(path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(
                    MetricRow(
                        epoch=int(rec["epoch"]), map=float(rec["map"]),
                        loss=float(rec["loss"]), class_acc=float(rec["class_acc"]),
                        obj_acc=float(rec["obj_acc"]), noobj_acc=float(rec["noobj_acc"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad CSV row at line {lineno}: {exc}") from None
    return rows


# -- checkpoints --------------------------------------------------------------------------


def checkpoint_dir(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"checkpoint_{epoch:04d}"


def save_checkpoint(out_dir, epoch: int, net: Network, state: AdamState,
                    cfg: TrainingConfig) -> Path:
    ckpt = checkpoint_dir(out_dir, epoch)
    ckpt.mkdir(parents=True, exist_ok=True)
    write_tensors(ckpt / "weights.melw", net.state_arrays())
    write_tensors(ckpt / "adam.melw", state.to_arrays())
    (ckpt / "state.json").write_text(
        json.dumps({"epoch": epoch, "config_digest": cfg.digest()}, indent=2) + "\n"
    )
    return ckpt


def load_checkpoint(ckpt, net: Network, cfg: TrainingConfig) -> tuple[int, AdamState]:
    ckpt = Path(ckpt)
    meta = json.loads((ckpt / "state.json").read_text())
    if meta["config_digest"] != cfg.digest():
        raise ValueError("checkpoint was written with a different configuration")
    net.load_state(read_tensors(ckpt / "weights.melw"))
    return int(meta["epoch"]), AdamState.from_arrays(read_tensors(ckpt / "adam.melw"))


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted(Path(out_dir).glob("checkpoint_*"))
    return ckpts[-1] if ckpts else None


# -- the loop -----------------------------------------------------------------------------


def train_loop(cfg: TrainingConfig, spec: ArchSpec, anchors: list[Anchor],
               train_data: list[Sample], val_data: list[Sample], out_dir,
               resume: bool = False, plan: AugmentPlan | None = None,
               log=None) -> tuple[Network, list[MetricRow]]:
    """Run ``cfg.epochs`` epochs; checkpoint and log metrics after each.

    Fully deterministic given (config, data): shuffling and augmentation
    seeds derive from (seed, epoch, item). ``resume=True`` picks up after the
    latest checkpoint in ``out_dir`` and continues bit-identically to an
    uninterrupted run.
    """
    from .evaluation import evaluate_samples  # local import to avoid a cycle

    if not train_data:
        raise ValueError("training set is empty")
    if not val_data:
        raise ValueError("validation set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    anchors_by_scale = assign_to_scales(anchors)
    plan = plan if plan is not None else (AugmentPlan() if cfg.augment else NO_AUGMENT)

    net = build(spec, seed=cfg.seed)
    state = AdamState()
    rows: list[MetricRow] = []
    start_epoch = 1
    csv_path = out_dir / "metrics.csv"
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise FileNotFoundError(f"resume requested but no checkpoint under {out_dir}")
        done, state = load_checkpoint(ckpt, net, cfg)
        start_epoch = done + 1
        if csv_path.exists():
            rows = [r for r in read_metric_csv(csv_path) if r.epoch <= done]

    params = net.parameters()
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_data))
        loss_total = 0.0
        batches = 0
        for b0 in range(0, len(order), cfg.batch_size):
            idxs = order[b0 : b0 + cfg.batch_size]
            images, gts = [], []
            for idx in idxs:
                chw, gt = prepare_sample(
                    train_data[int(idx)], cfg.input_size, plan,
                    seed=(cfg.seed, epoch, int(idx)),
                )
                images.append(chw)
                gts.append(gt)
            batch = np.stack(images)
            targets = encode_batch(gts, anchors_by_scale, cfg.input_size,
                                   spec.num_classes, cfg.ignore_iou)
            heads = net.forward(batch, training=True)
            loss, parts = detection_loss(heads, targets, cfg)
            if not math.isfinite(parts.total):
                raise FloatingPointError(
                    f"non-finite loss {parts.total} at epoch {epoch}, "
                    f"batch {b0 // cfg.batch_size} (items {list(map(int, idxs))})"
                )
            for _, p in params:
                p.zero_grad()
            loss.backward()
            adam_step(params, state, cfg.learning_rate, cfg.weight_decay)
            loss_total += parts.total
            batches += 1

        val = evaluate_samples(
            net, val_data, anchors_by_scale,
            num_classes=spec.num_classes, input_size=cfg.input_size,
            conf_threshold=cfg.conf_threshold, nms_iou=cfg.nms_iou,
            batch_size=cfg.batch_size, ignore_iou=cfg.ignore_iou,
        )
        row = MetricRow(
            epoch=epoch, map=val.map, loss=loss_total / max(1, batches),
            class_acc=val.class_acc, obj_acc=val.obj_acc, noobj_acc=val.noobj_acc,
        )
        rows.append(row)
        write_metric_csv(csv_path, rows)
        save_checkpoint(out_dir, epoch, net, state, cfg)
        if log:
            log(f"epoch {epoch}: loss {row.loss:.4f} map {row.map:.4f}")

    return net, rows
