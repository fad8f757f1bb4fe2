"""Image preparation for backbone inference: bilinear resize to the model's
input side and channel normalization with ImageNet statistics."""

from __future__ import annotations

import numpy as np
from PIL import Image

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_rgb(path: str) -> Image.Image:
    with Image.open(path) as img:
        return img.convert("RGB")


def prepare(image: Image.Image, side: int) -> np.ndarray:
    """(3, side, side) float32, ImageNet-normalized."""
    resized = image.resize((side, side), Image.BILINEAR)
    arr = np.asarray(resized, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return arr.transpose(2, 0, 1)
