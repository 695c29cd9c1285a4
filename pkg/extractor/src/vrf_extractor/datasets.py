"""Image-folder enumeration and preprocessing.

Layout: one subdirectory per class, images inside. Classes are assigned
indices in lexicographic order; files are sorted within each class, so
row i of every emitted tensor refers to the same image on every run.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def enumerate_images(dataset_dir):
    """Returns (class_names, [(path, label), ...]) in deterministic order."""
    dataset_dir = Path(dataset_dir)
    class_dirs = sorted(p for p in dataset_dir.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"{dataset_dir}: need at least 2 class directories")
    class_names = [p.name for p in class_dirs]
    samples = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        samples.extend((p, label) for p in files)
    if not samples:
        raise ValueError(f"{dataset_dir}: no images found")
    return class_names, samples


def load_image(path, image_size, mean, std):
    """Resize shorter side, center-crop, scale to [0,1], normalize; CHW float32."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        w, h = img.size
        scale = image_size / min(w, h)
        img = img.resize((max(image_size, round(w * scale)),
                          max(image_size, round(h * scale))),
                         Image.Resampling.BICUBIC)
        w, h = img.size
        left = (w - image_size) // 2
        top = (h - image_size) // 2
        img = img.crop((left, top, left + image_size, top + image_size))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return arr.transpose(2, 0, 1)


def batches(samples, batch_size, image_size, mean, std):
    """Yield (float32 B x 3 x S x S array, labels) preserving sample order."""
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = np.stack([load_image(p, image_size, mean, std) for p, _ in chunk])
        labels = np.array([label for _, label in chunk], dtype=np.uint32)
        yield images, labels
