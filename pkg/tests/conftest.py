import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # reference_impls


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)


def make_scene(index: int, rng, size: int = 64, num_classes: int = 3):
    """One synthetic detection sample: a colored rectangle per class id."""
    from melnet.boxes import BoxYolo
    from melnet.training import Sample

    colors = [(220, 60, 60), (60, 220, 60), (60, 60, 220),
              (220, 220, 60), (220, 60, 220), (60, 220, 220)]
    img = np.full((size, size, 3), 40, dtype=np.uint8)
    cls = index % num_classes
    w = int(rng.integers(size // 5, size // 2))
    h = int(rng.integers(size // 5, size // 2))
    x0 = int(rng.integers(1, size - w - 1))
    y0 = int(rng.integers(1, size - h - 1))
    img[y0 : y0 + h, x0 : x0 + w] = colors[cls % len(colors)]
    box = BoxYolo((x0 + w / 2) / size, (y0 + h / 2) / size, w / size, h / size)
    return Sample(img, [box], [cls])


@pytest.fixture
def synthetic_scenes(rng):
    return [make_scene(i, rng) for i in range(8)]
