"""Procedural leaf-like textures for desk-scale experiments.

Each class has its own base colour and lesion pattern, so a small CNN can
separate them after the full preprocessing chain:

* ``Bacterial Rot``   olive base, a few large dark blotches
* ``Downey Mildew``   green base, mid-sized yellow patches
* ``Healthy Leaves``  bright green base, dark vein lines, no spots
* ``Powdery Mildew``  grey-green base, many small white dots
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageprep import save_png

CLASS_NAMES = ("Bacterial Rot", "Downey Mildew", "Healthy Leaves", "Powdery Mildew")

_BASE = {
    "Bacterial Rot": (110, 120, 40),
    "Downey Mildew": (60, 140, 50),
    "Healthy Leaves": (50, 150, 60),
    "Powdery Mildew": (90, 130, 90),
}


def _disc(canvas, cy, cx, r, color, soft=False):
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    if soft:
        a = np.clip(1.0 - d / r, 0, 1)[..., None]
    else:
        a = (d <= r).astype(np.float64)[..., None]
    canvas[:] = canvas * (1 - a) + np.asarray(color, dtype=np.float64) * a


def render(label: str, size: int, rng: np.random.Generator) -> np.ndarray:
    if label not in _BASE:
        raise ValueError(f"unknown synthetic class {label!r}")
    base = np.asarray(_BASE[label], dtype=np.float64) + rng.uniform(-15, 15, size=3)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    s = size / 64.0
    if label == "Bacterial Rot":
        for _ in range(rng.integers(2, 5)):
            _disc(img, *rng.uniform(0, size, 2), rng.uniform(6, 10) * s, (60, 35, 20))
    elif label == "Downey Mildew":
        for _ in range(rng.integers(6, 11)):
            _disc(img, *rng.uniform(0, size, 2), rng.uniform(4, 7) * s, (210, 200, 70), soft=True)
    elif label == "Healthy Leaves":
        yy, xx = np.mgrid[0:size, 0:size]
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 10)
        proj = np.cos(angle) * xx + np.sin(angle) * yy
        veins = (np.abs(((proj + phase) % (10 * s)) - 5 * s) < 0.8 * s)[..., None]
        img = np.where(veins, img * 0.55, img)
    else:
        for _ in range(rng.integers(30, 51)):
            _disc(img, *rng.uniform(0, size, 2), rng.uniform(1.0, 2.0) * s, (235, 235, 230))
    img += rng.normal(0, 8, size=img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_corpus(root, per_class: int = 200, size: int = 64, seed: int = 0,
                    classes=CLASS_NAMES) -> Path:
    """Write ``root/<class>/<class>_<i>.png``; identical output for identical arguments."""
    root = Path(root)
    for c, label in enumerate(classes):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, c])))
        slug = label.lower().replace(" ", "_")
        for i in range(per_class):
            save_png(render(label, size, rng), root / label / f"{slug}_{i:04d}.png")
    return root
