"""Seeded background texture generators.

Two sources stand in for natural-image crops: ``texture-a`` is blurred colour
noise (photo-like low frequency content), ``texture-b`` is a collage of flat
geometric shapes (segmentation-dataset-like edges). Patches are 32x32 crops
taken at a random offset from a larger canvas.
"""
import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from ..exceptions import ConfigurationError

PATCH = 32
_CANVAS = 48


def _smooth_noise(rng):
    field = rng.normal(0.0, 1.0, size=(_CANVAS, _CANVAS, 3))
    img = Image.fromarray(np.clip(field * 40 + 128, 0, 255).astype(np.uint8))
    img = img.filter(ImageFilter.GaussianBlur(radius=float(rng.uniform(1.5, 4.0))))
    arr = np.asarray(img).astype(np.float64)
    arr = (arr - arr.mean(axis=(0, 1))) / (arr.std(axis=(0, 1)) + 1e-6)
    base = rng.uniform(40, 215, size=3)
    contrast = rng.uniform(20, 60, size=3)
    return np.clip(base + contrast * arr, 0, 255).astype(np.uint8)


def _geometric(rng):
    img = Image.new("RGB", (_CANVAS, _CANVAS), tuple(int(c) for c in rng.integers(0, 256, 3)))
    draw = ImageDraw.Draw(img)
    for _ in range(int(rng.integers(5, 12))):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        x0, y0 = rng.integers(-8, _CANVAS, size=2)
        w, h = rng.integers(6, 30, size=2)
        box = [int(x0), int(y0), int(x0 + w), int(y0 + h)]
        kind = rng.integers(0, 3)
        if kind == 0:
            draw.rectangle(box, fill=color)
        elif kind == 1:
            draw.ellipse(box, fill=color)
        else:
            draw.line(box, fill=color, width=int(rng.integers(2, 6)))
    return np.asarray(img)


_GENERATORS = {"texture-a": _smooth_noise, "texture-b": _geometric}
BACKGROUND_SOURCES = tuple(_GENERATORS)


class TexturePatches:
    def __init__(self, source_id):
        if source_id not in _GENERATORS:
            raise ConfigurationError(f"unknown background source {source_id!r}; known: {BACKGROUND_SOURCES}")
        self.source_id = source_id
        self._make = _GENERATORS[source_id]

    def patch(self, rng):
        canvas = self._make(rng)
        y, x = rng.integers(0, _CANVAS - PATCH + 1, size=2)
        return np.ascontiguousarray(canvas[y:y + PATCH, x:x + PATCH])

    def sample(self, rng, n):
        if n == 0:
            return np.zeros((0, PATCH, PATCH, 3), dtype=np.uint8)
        return np.stack([self.patch(rng) for _ in range(n)])
