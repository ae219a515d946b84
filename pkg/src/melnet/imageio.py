"""Image loading boundary: all decoding/encoding goes through Pillow here.

Images travel through the rest of the package as uint8 RGB arrays of shape
(h, w, 3); nothing outside this module touches an image file.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Detection


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def image_size(path) -> tuple[int, int]:
    """(width, height) without decoding pixel data."""
    with Image.open(path) as img:
        return img.size


def save_image(path, array: np.ndarray) -> None:
    Image.fromarray(array, mode="RGB").save(path)


def draw_detections(array: np.ndarray, detections: list[Detection],
                    class_names: list[str] | None = None) -> np.ndarray:
    img = Image.fromarray(array, mode="RGB")
    draw = ImageDraw.Draw(img)
    for det in detections:
        b = det.box
        draw.rectangle([b.xmin, b.ymin, b.xmax, b.ymax], outline=(255, 64, 64), width=2)
        name = class_names[det.class_id] if class_names else str(det.class_id)
        draw.text((b.xmin + 2, max(b.ymin - 12, 0)), f"{name} {det.score:.2f}", fill=(255, 64, 64))
    return np.asarray(img, dtype=np.uint8)
