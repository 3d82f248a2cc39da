"""Rasterize candidate-region overlays (the `bop` prompt variant)."""

from __future__ import annotations

from pathlib import Path

from PIL import Image, ImageDraw

from .fileio import atomic_write

RED = (255, 0, 0)
DEFAULT_STROKE_PX = 4


def draw_box(
    image: Image.Image,
    bbox: tuple[float, float, float, float],
    color: tuple[int, int, int] = RED,
    stroke_px: int = DEFAULT_STROKE_PX,
) -> Image.Image:
    """Return a copy of the image with a rectangle drawn around the bbox."""
    out = image.convert("RGB").copy()
    x, y, w, h = bbox
    ImageDraw.Draw(out).rectangle([x, y, x + w - 1, y + h - 1], outline=color, width=stroke_px)
    return out


def render_overlay_file(
    source: str | Path,
    bbox: tuple[float, float, float, float],
    out: str | Path,
    color: tuple[int, int, int] = RED,
    stroke_px: int = DEFAULT_STROKE_PX,
) -> Path:
    with Image.open(source) as img:
        rendered = draw_box(img, bbox, color=color, stroke_px=stroke_px)
    out = Path(out)
    with atomic_write(out, "wb") as fh:
        rendered.save(fh, format="PNG")
    return out
