import os

import numpy as np
import pytest
from PIL import Image

from app.models import CLASS_NAMES

# (semi-axis x, semi-axis y, RGB) per class, so classes are visually separable
GRAIN_SHAPES = {
    "Arborio": (14, 10, (235, 232, 220)),
    "Basmati": (24, 5, (215, 200, 160)),
    "Ipsala": (20, 12, (245, 245, 240)),
    "Jasmine": (20, 7, (225, 215, 190)),
    "Karacadag": (12, 9, (160, 120, 85)),
}


def grain_pixels(name, size=60, jitter=0):
    a, b, color = GRAIN_SHAPES[name]
    yy, xx = np.mgrid[0:size, 0:size]
    c = size / 2 + jitter
    inside = ((xx - c) / a) ** 2 + ((yy - c) / b) ** 2 <= 1.0
    pixels = np.zeros((size, size, 3), dtype=np.uint8)
    pixels[inside] = color
    return pixels


def write_corpus(root, per_class=10, size=60):
    for name in CLASS_NAMES:
        folder = os.path.join(root, name)
        os.makedirs(folder, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(grain_pixels(name, size, jitter=i % 3 - 1)).save(
                os.path.join(folder, f"{name.lower()}_{i:03d}.png"))
    return str(root)


@pytest.fixture(autouse=True)
def logs_path(tmp_path, monkeypatch):
    monkeypatch.setenv("LOGS_PATH", str(tmp_path / "logs"))


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "data", per_class=10)
