"""Procedural hidden-content images: colored texture, shapes, and glyphs.

Stand-ins for printed pages: each image layers random text fragments and
geometric shapes over a smooth colorful base, which keeps per-channel
variance high and makes every generated page visually distinct. Fully
deterministic for a given (spec, seed).
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw, ImageFont

__all__ = ["ContentSpec", "generate_content", "smooth_field"]

_GLYPH_ALPHABET = string.ascii_uppercase + string.digits


@dataclass(frozen=True)
class ContentSpec:
    height: int = 256
    width: int = 256
    shapes: bool = True
    glyphs: bool = True

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"content resolution too small: {self.height}x{self.width}")

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width,
                "shapes": self.shapes, "glyphs": self.glyphs}

    @classmethod
    def from_dict(cls, d: dict) -> "ContentSpec":
        return cls(**d)


def smooth_field(size, rng: np.random.Generator, low=0.0, high=1.0, cells=6) -> np.ndarray:
    """Smooth random color field: a coarse random grid upsampled bilinearly."""
    h, w = size
    grid = rng.uniform(low, high, size=(cells, cells, 3))
    img = Image.fromarray(np.round(grid * 255).astype(np.uint8), mode="RGB")
    img = img.resize((w, h), resample=Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def _draw_shapes(draw: ImageDraw.ImageDraw, size, rng: np.random.Generator) -> None:
    h, w = size
    for _ in range(int(rng.integers(5, 10))):
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        x0, y0 = rng.integers(0, w - 4), rng.integers(0, h - 4)
        x1 = int(min(w - 1, x0 + rng.integers(4, max(5, w // 2))))
        y1 = int(min(h - 1, y0 + rng.integers(4, max(5, h // 2))))
        kind = int(rng.integers(0, 3))
        if kind == 0:
            draw.rectangle([int(x0), int(y0), x1, y1], fill=color)
        elif kind == 1:
            draw.ellipse([int(x0), int(y0), x1, y1], fill=color)
        else:
            width = int(rng.integers(1, max(2, min(h, w) // 24)))
            draw.line([int(x0), int(y0), x1, y1], fill=color, width=width)


def _draw_glyphs(draw: ImageDraw.ImageDraw, size, rng: np.random.Generator) -> None:
    h, w = size
    for _ in range(int(rng.integers(2, 5))):
        n = int(rng.integers(3, 8))
        text = "".join(_GLYPH_ALPHABET[i] for i in rng.integers(0, len(_GLYPH_ALPHABET), size=n))
        px = int(max(8, min(h, w) // int(rng.integers(4, 9))))
        font = ImageFont.load_default(size=px)
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        x = int(rng.integers(0, max(1, w - px)))
        y = int(rng.integers(0, max(1, h - px)))
        draw.text((x, y), text, font=font, fill=color)


def generate_content(n: int, spec: ContentSpec, seed: int) -> list[np.ndarray]:
    """Generate `n` distinct content images, bit-identical for a fixed seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    images = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        base = smooth_field((spec.height, spec.width), rng, low=0.05, high=0.95)
        canvas = Image.fromarray(np.round(base * 255).astype(np.uint8), mode="RGB")
        draw = ImageDraw.Draw(canvas)
        if spec.shapes:
            _draw_shapes(draw, (spec.height, spec.width), rng)
        if spec.glyphs:
            _draw_glyphs(draw, (spec.height, spec.width), rng)
        images.append(np.asarray(canvas, dtype=np.float32) / 255.0)
    return images
