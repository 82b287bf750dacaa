"""Pixel-level compositing: absolute-difference blend and the five render modes."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigurationError, DimensionError, PreconditionError
from .backgrounds import TexturePatches
from .glyphs import glyph_source

LUMA = (0.299, 0.587, 0.114)


class RenderMode(str, enum.Enum):
    BB = "BB"  # black background
    WB = "WB"  # white background
    GS = "GS"  # grayscale
    Cr = "Cr"  # colour
    Or = "Or"  # original foreground, no background

    def __str__(self):
        return self.value


BACKGROUNDED_MODES = (RenderMode.BB, RenderMode.WB, RenderMode.GS, RenderMode.Cr)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    foreground_set: str
    background_source: str | None
    mode: RenderMode
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "mode", RenderMode(self.mode))
        if (self.mode is RenderMode.Or) != (self.background_source is None):
            raise ConfigurationError(
                f"domain {self.domain_id}: mode Or requires no background and vice versa "
                f"(mode={self.mode}, background={self.background_source})")

    @property
    def name(self):
        bg = self.background_source or "none"
        return f"{self.foreground_set}_{bg}_{self.mode.value}"


def to_rgb(glyph):
    glyph = np.asarray(glyph)
    return np.repeat(glyph[..., None], 3, axis=-1).astype(np.uint8)


def blend_abs_diff(fg, bg):
    """Per-pixel, per-channel |fg - bg| of two uint8 images."""
    fg = np.asarray(fg)
    bg = np.asarray(bg)
    if fg.shape != bg.shape:
        raise DimensionError(f"blend shapes differ: {fg.shape} vs {bg.shape}")
    return np.abs(fg.astype(np.int16) - bg.astype(np.int16)).astype(np.uint8)


def luma(image):
    """BT.601 luma, rounded half-up, replicated over three channels."""
    img = np.asarray(image).astype(np.float64)
    y = LUMA[0] * img[..., 0] + LUMA[1] * img[..., 1] + LUMA[2] * img[..., 2]
    gray = np.floor(y + 0.5).clip(0, 255).astype(np.uint8)
    return np.repeat(gray[..., None], 3, axis=-1)


def foreground_mask(glyph, threshold=0):
    return np.asarray(glyph) > threshold


def apply_mode(blended, glyph, mode, fg_original=None, mask_threshold=0):
    blended = np.asarray(blended)
    glyph = np.asarray(glyph)
    mode = RenderMode(mode)
    if blended.shape[:-1] != glyph.shape or blended.shape[-1] != 3:
        raise DimensionError(f"blended {blended.shape} does not match glyph {glyph.shape}")
    if mode is RenderMode.Cr:
        return blended.copy()
    if mode is RenderMode.GS:
        return luma(blended)
    if mode is RenderMode.Or:
        return to_rgb(glyph) if fg_original is None else np.asarray(fg_original).copy()
    mask = foreground_mask(glyph, mask_threshold)[..., None]
    fill = 0 if mode is RenderMode.BB else 255
    return np.where(mask, blended, np.uint8(fill)).astype(np.uint8)


def domain_rng(seed, domain_id):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(domain_id)]))


def render_domain(spec, glyphs, patches, count, seed, mask_threshold=0):
    """Render ``count`` labelled images for one domain.

    ``glyphs`` and ``patches`` may be source objects or config identifiers.
    Output depends only on (spec, seed, count).
    """
    if count <= 0:
        raise PreconditionError(f"count must be positive, got {count}")
    if isinstance(glyphs, (str, dict)):
        glyphs = glyph_source(glyphs)
    if glyphs is None or len(glyphs) == 0:
        raise ConfigurationError(f"domain {spec.domain_id}: empty glyph source")
    if spec.mode is not RenderMode.Or and patches is None:
        raise ConfigurationError(f"domain {spec.domain_id}: mode {spec.mode} needs a background source")
    if isinstance(patches, str):
        patches = TexturePatches(patches)

    rng = domain_rng(seed, spec.domain_id)
    pixels, labels = glyphs.sample(rng, count, spec.num_classes)
    out = np.empty((count, 32, 32, 3), dtype=np.uint8)
    for i, glyph in enumerate(pixels):
        fg = to_rgb(glyph)
        if spec.mode is RenderMode.Or:
            out[i] = fg
            continue
        blended = blend_abs_diff(fg, patches.patch(rng))
        out[i] = apply_mode(blended, glyph, spec.mode, fg, mask_threshold)
    return out, labels
