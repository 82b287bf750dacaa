"""Foreground glyph sources.

Procedural families render stroke skeletons with a per-family style, so that
several "datasets" share a class vocabulary but differ in handwriting. An IDX
reader lets real MNIST-format files stand in for a procedural family.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..exceptions import ConfigurationError

GLYPH_SIZE = 28
CANVAS_SIZE = 32
_SUPERSAMPLE = 4


def _arc(cx, cy, rx, ry, start_deg, stop_deg, n=14):
    t = np.radians(np.linspace(start_deg, stop_deg, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Image coordinates: x to the right, y downwards, unit square.
DIGIT_STROKES = {
    0: [_arc(0.5, 0.5, 0.27, 0.38, 0, 360, 24)],
    1: [[(0.36, 0.26), (0.52, 0.1), (0.52, 0.9)]],
    2: [_arc(0.5, 0.32, 0.22, 0.2, 190, 400) + [(0.24, 0.9), (0.78, 0.9)]],
    3: [_arc(0.5, 0.3, 0.2, 0.19, 200, 450), _arc(0.5, 0.7, 0.23, 0.2, 270, 520)],
    4: [[(0.66, 0.9), (0.66, 0.1), (0.2, 0.66), (0.82, 0.66)]],
    5: [[(0.76, 0.1), (0.34, 0.1), (0.33, 0.49)] + _arc(0.5, 0.66, 0.23, 0.22, 230, 520)],
    6: [[(0.7, 0.1), (0.45, 0.3), (0.31, 0.62)], _arc(0.5, 0.68, 0.2, 0.2, 0, 360, 20)],
    7: [[(0.2, 0.1), (0.8, 0.1), (0.42, 0.9)]],
    8: [_arc(0.5, 0.29, 0.17, 0.18, 0, 360, 18), _arc(0.5, 0.69, 0.21, 0.21, 0, 360, 20)],
    9: [_arc(0.5, 0.31, 0.2, 0.2, 0, 360, 20), [(0.7, 0.31), (0.62, 0.9)]],
}

# A second vocabulary whose classes have nothing to do with digits, playing
# the part of a character set like KMNIST relative to MNIST.
SYMBOL_STROKES = {
    0: [[(0.5, 0.12), (0.88, 0.85), (0.12, 0.85), (0.5, 0.12)]],
    1: [[(0.18, 0.18), (0.82, 0.18), (0.82, 0.82), (0.18, 0.82), (0.18, 0.18)]],
    2: [[(0.15, 0.15), (0.85, 0.85)], [(0.85, 0.15), (0.15, 0.85)]],
    3: [[(0.5, 0.1), (0.5, 0.9)], [(0.1, 0.5), (0.9, 0.5)]],
    4: [[(0.1, 0.5), (0.85, 0.5)], [(0.6, 0.25), (0.85, 0.5), (0.6, 0.75)]],
    5: [[(0.5, 0.1), (0.9, 0.5), (0.5, 0.9), (0.1, 0.5), (0.5, 0.1)]],
    6: [[(0.15, 0.25), (0.85, 0.25)], [(0.15, 0.5), (0.85, 0.5)], [(0.15, 0.75), (0.85, 0.75)]],
    7: [[(0.1, 0.8), (0.3, 0.2), (0.5, 0.8), (0.7, 0.2), (0.9, 0.8)]],
    8: [_arc(0.5, 0.5, 0.35, 0.35, 0, 360, 24), _arc(0.5, 0.5, 0.12, 0.12, 0, 360, 12)],
    9: [[(0.2, 0.1), (0.2, 0.9), (0.8, 0.9)], [(0.2, 0.5), (0.6, 0.5)]],
}

VOCABULARIES = {"digits": DIGIT_STROKES, "symbols": SYMBOL_STROKES}


@dataclass(frozen=True)
class GlyphStyle:
    vocabulary: str = "digits"
    stroke_width: float = 2.2
    slant: float = 0.0
    x_scale: float = 1.0
    y_scale: float = 1.0
    jitter: float = 0.02
    rotation_deg: float = 8.0
    shift_px: float = 1.5


FAMILIES = {
    "fine": GlyphStyle(stroke_width=1.4, jitter=0.015),
    "bold": GlyphStyle(stroke_width=3.6, jitter=0.02, x_scale=0.95),
    "italic": GlyphStyle(stroke_width=2.2, slant=0.38, jitter=0.02),
    "wide": GlyphStyle(stroke_width=2.5, x_scale=1.25, y_scale=0.8),
    "jagged": GlyphStyle(stroke_width=2.0, jitter=0.035, rotation_deg=14.0),
    "compact": GlyphStyle(stroke_width=2.0, x_scale=0.7, y_scale=0.7, shift_px=3.0),
    "symbols": GlyphStyle(vocabulary="symbols", stroke_width=2.4),
    "symbols-bold": GlyphStyle(vocabulary="symbols", stroke_width=3.6, slant=0.2),
}


def pad_to_canvas(pixels):
    """Zero-pad a 28x28 glyph to the 32x32 canvas (other sizes are resized)."""
    pixels = np.asarray(pixels)
    if pixels.shape == (CANVAS_SIZE, CANVAS_SIZE):
        return pixels.astype(np.uint8)
    if pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
        img = Image.fromarray(pixels.astype(np.uint8)).resize((GLYPH_SIZE, GLYPH_SIZE), Image.BILINEAR)
        pixels = np.asarray(img)
    off = (CANVAS_SIZE - GLYPH_SIZE) // 2
    out = np.zeros((CANVAS_SIZE, CANVAS_SIZE), dtype=np.uint8)
    out[off:off + GLYPH_SIZE, off:off + GLYPH_SIZE] = pixels
    return out


class ProceduralGlyphs:
    """Renders class-labelled glyphs from stroke templates in a fixed style."""

    def __init__(self, name, style=None):
        if style is None:
            if name not in FAMILIES:
                raise ConfigurationError(f"unknown glyph family {name!r}; known: {sorted(FAMILIES)}")
            style = FAMILIES[name]
        self.name = name
        self.style = style
        self.templates = VOCABULARIES[style.vocabulary]
        self.num_classes = len(self.templates)

    def __len__(self):
        return self.num_classes

    def render(self, label, rng):
        s = self.style
        size = GLYPH_SIZE * _SUPERSAMPLE
        img = Image.new("L", (size, size), 0)
        draw = ImageDraw.Draw(img)
        angle = math.radians(rng.normal(0.0, s.rotation_deg / 2.0))
        scale = 1.0 + rng.normal(0.0, 0.05)
        dx, dy = rng.uniform(-s.shift_px, s.shift_px, size=2) / GLYPH_SIZE
        ca, sa = math.cos(angle), math.sin(angle)
        width = max(1, int(round(s.stroke_width * _SUPERSAMPLE * (1.0 + rng.normal(0.0, 0.1)))))
        r = width / 2.0
        for stroke in self.templates[int(label)]:
            pts = np.asarray(stroke, dtype=np.float64) - 0.5
            pts = pts + rng.normal(0.0, s.jitter, size=pts.shape)
            pts[:, 0] = pts[:, 0] * s.x_scale - s.slant * pts[:, 1]
            pts[:, 1] = pts[:, 1] * s.y_scale
            rot = np.stack([ca * pts[:, 0] - sa * pts[:, 1], sa * pts[:, 0] + ca * pts[:, 1]], axis=1)
            # glyphs occupy ~80% of the box like MNIST digits
            xy = (rot * 0.8 * scale + 0.5 + [dx, dy]) * size
            coords = [tuple(p) for p in xy]
            draw.line(coords, fill=255, width=width)
            for x, y in coords:
                draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
        small = img.resize((GLYPH_SIZE, GLYPH_SIZE), Image.BOX)
        return pad_to_canvas(np.asarray(small))

    def sample(self, rng, n, num_classes=None):
        k = num_classes or self.num_classes
        labels = rng.integers(0, k, size=n)
        pixels = np.stack([self.render(lab, rng) for lab in labels]) if n else np.zeros((0, 32, 32), np.uint8)
        return pixels, labels.astype(np.int64)


def _read_idx(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read IDX file {path}: {exc}") from exc
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ConfigurationError(f"{path} is not an unsigned-byte IDX file")
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


class IdxGlyphs:
    """Glyphs drawn (with replacement) from an MNIST-format IDX image/label pair."""

    def __init__(self, name, images_path, labels_path):
        self.name = name
        images = _read_idx(images_path)
        labels = _read_idx(labels_path).astype(np.int64)
        if len(images) == 0:
            raise ConfigurationError(f"glyph source {name!r} is empty")
        if len(images) != len(labels):
            raise ConfigurationError(f"{name!r}: {len(images)} images but {len(labels)} labels")
        self.images = images
        self.labels = labels
        self.num_classes = int(labels.max()) + 1

    def __len__(self):
        return len(self.images)

    def sample(self, rng, n, num_classes=None):
        idx = rng.integers(0, len(self.images), size=n)
        pixels = np.stack([pad_to_canvas(self.images[i]) for i in idx]) if n else np.zeros((0, 32, 32), np.uint8)
        return pixels, self.labels[idx]


def glyph_source(entry):
    """Build a glyph source from a config entry (a family name or a dict)."""
    if isinstance(entry, str):
        return ProceduralGlyphs(entry)
    if "idx_images" in entry:
        return IdxGlyphs(entry["name"], entry["idx_images"], entry["idx_labels"])
    style = GlyphStyle(**entry["style"]) if "style" in entry else None
    return ProceduralGlyphs(entry["name"], style)
