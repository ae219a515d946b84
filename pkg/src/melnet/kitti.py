"""KITTI 2D object labels: parsing, class mapping, conversion, train/val split.

A label line has 15 whitespace-separated fields (16 with a trailing score):

    type truncated occluded alpha xmin ymin xmax ymax h w l x y z rotation_y [score]

Conversion writes one text file per image with ``class_id xc yc w h`` rows,
all coordinates normalized to the image and fixed to 6 decimals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoxXYXY, BoxYolo, xyxy_to_yolo
from .imageio import image_size

CLASS_NAMES = (
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
    "DontCare",
)


@dataclass(frozen=True)
class ClassMap:
    names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: BoxXYXY
    dimensions: tuple[float, float, float]  # h, w, l in meters
    location: tuple[float, float, float]    # x, y, z in meters
    rotation_y: float
    score: float | None = None


class LabelParseError(ValueError):
    pass


def parse_label_line(line: str, lineno: int, class_map: ClassMap) -> KittiLabel:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise LabelParseError(
            f"line {lineno}: expected 15 or 16 fields, got {len(fields)}"
        )
    name = fields[0]
    if name not in class_map.names:
        raise LabelParseError(f"line {lineno}: unknown class {name!r}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise LabelParseError(f"line {lineno}: unparsable number ({exc})") from None
    try:
        bbox = BoxXYXY(nums[3], nums[4], nums[5], nums[6])
    except ValueError as exc:
        raise LabelParseError(f"line {lineno}: {exc}") from None
    return KittiLabel(
        type=name,
        truncated=nums[0],
        occluded=int(nums[1]),
        alpha=nums[2],
        bbox=bbox,
        dimensions=(nums[7], nums[8], nums[9]),
        location=(nums[10], nums[11], nums[12]),
        rotation_y=nums[13],
        score=nums[14] if len(fields) == 16 else None,
    )


def parse_label_file(path, class_map: ClassMap | None = None) -> list[KittiLabel]:
    class_map = class_map or ClassMap()
    labels = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            labels.append(parse_label_line(raw, lineno, class_map))
        except LabelParseError as exc:
            raise LabelParseError(f"{path}: {exc}") from None
    return labels


# -- dataset index and split -----------------------------------------------------


@dataclass(frozen=True)
class IndexItem:
    image_path: str
    label_path: str
    tag: str  # train | val


@dataclass(frozen=True)
class DatasetIndex:
    items: tuple[IndexItem, ...]
    seed: int
    fraction: float

    def subset(self, tag: str) -> list[IndexItem]:
        return [item for item in self.items if item.tag == tag]


def discover_pairs(kitti_root) -> list[tuple[Path, Path]]:
    """(image, label) pairs under the standard training layout, sorted by id."""
    root = Path(kitti_root)
    label_dir = root / "training" / "label_2"
    image_dir = root / "training" / "image_2"
    if not label_dir.is_dir():
        raise FileNotFoundError(f"no label directory at {label_dir}")
    pairs = []
    for label_path in sorted(label_dir.glob("*.txt")):
        image_path = image_dir / (label_path.stem + ".png")
        pairs.append((image_path, label_path))
    if not pairs:
        raise FileNotFoundError(f"no label files under {label_dir}")
    return pairs


def split(pairs, fraction: float = 0.8, seed: int = 0) -> DatasetIndex:
    """Deterministic shuffled split; train size is floor(n * fraction)."""
    if not pairs:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(len(pairs) * fraction)
    items = []
    for rank, idx in enumerate(order):
        image_path, label_path = pairs[idx]
        tag = "train" if rank < n_train else "val"
        items.append(IndexItem(str(image_path), str(label_path), tag))
    items.sort(key=lambda it: it.image_path)
    return DatasetIndex(items=tuple(items), seed=seed, fraction=fraction)


def write_manifest(path, index: DatasetIndex) -> None:
    lines = [f"# split seed={index.seed} fraction={index.fraction}"]
    lines += [f"{it.tag}\t{it.image_path}\t{it.label_path}" for it in index.items]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetIndex:
    seed, fraction = 0, 0.8
    items = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line.lstrip("# ").split():
                key, _, value = token.partition("=")
                if key == "seed":
                    seed = int(value)
                elif key == "fraction":
                    fraction = float(value)
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "val"):
            raise ValueError(f"{path}:{lineno}: malformed manifest line {line!r}")
        items.append(IndexItem(parts[1], parts[2], parts[0]))
    if not items:
        raise ValueError(f"{path} lists no dataset items")
    return DatasetIndex(items=tuple(items), seed=seed, fraction=fraction)


# -- conversion --------------------------------------------------------------------


@dataclass
class ConversionReport:
    files: int = 0
    boxes_per_class: dict[str, int] = field(default_factory=dict)
    dropped_degenerate: int = 0

    def total_boxes(self) -> int:
        return sum(self.boxes_per_class.values())


def convert_label(label: KittiLabel, img_w: int, img_h: int,
                  class_map: ClassMap) -> tuple[int, BoxYolo] | None:
    """One KITTI row to (class_id, normalized box); None when degenerate."""
    clamped = label.bbox.clamped(img_w, img_h)
    if clamped.area <= 0:
        return None
    return class_map.id_of(label.type), xyxy_to_yolo(clamped, img_w, img_h)


def format_yolo_line(class_id: int, box: BoxYolo) -> str:
    return f"{class_id} {box.xc:.6f} {box.yc:.6f} {box.w:.6f} {box.h:.6f}"


def parse_yolo_label_file(path) -> list[tuple[BoxYolo, int]]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'class xc yc w h'")
        out.append(
            (BoxYolo(float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])),
             int(parts[0]))
        )
    return out


def load_samples(items, labels_dir):
    """Materialize (image, boxes, classes) samples for manifest items.

    Labels come from the converted YOLO files under ``labels_dir`` named after
    each image stem.
    """
    from .imageio import load_image
    from .training import Sample

    labels_dir = Path(labels_dir)
    samples = []
    for item in items:
        label_path = labels_dir / (Path(item.image_path).stem + ".txt")
        if not label_path.exists():
            raise FileNotFoundError(f"no converted label file {label_path}")
        gt = parse_yolo_label_file(label_path)
        samples.append(
            Sample(
                image=load_image(item.image_path),
                boxes=[box for box, _ in gt],
                class_ids=[cid for _, cid in gt],
            )
        )
    return samples


def convert_dataset(kitti_root, out_root, class_map: ClassMap | None = None,
                    fraction: float = 0.8, seed: int = 0) -> ConversionReport:
    """Write YOLO-format labels and the split manifest under ``out_root``.

    Raises when a label file has no matching image; re-runs are
    byte-identical.
    """
    class_map = class_map or ClassMap()
    pairs = discover_pairs(kitti_root)
    out_dir = Path(out_root)
    labels_dir = out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)

    report = ConversionReport(boxes_per_class={name: 0 for name in class_map.names})
    for image_path, label_path in pairs:
        if not image_path.exists():
            raise FileNotFoundError(f"missing image for {label_path}: {image_path}")
        img_w, img_h = image_size(image_path)
        lines = []
        for label in parse_label_file(label_path, class_map):
            converted = convert_label(label, img_w, img_h, class_map)
            if converted is None:
                report.dropped_degenerate += 1
                continue
            class_id, box = converted
            lines.append(format_yolo_line(class_id, box))
            report.boxes_per_class[label.type] += 1
        (labels_dir / label_path.name).write_text("\n".join(lines) + ("\n" if lines else ""))
        report.files += 1

    index = split(pairs, fraction=fraction, seed=seed)
    write_manifest(out_dir / "split.txt", index)
    return report
