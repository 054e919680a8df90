"""
Overlay rendering for mask inspection.

Each candidate (and the working mask) is alpha-composited over the input
image with an outline and a burned-in caption, so the VLM can bind an id to
a region inside a single image.
"""

import base64
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .exceptions import DimensionMismatch, InvalidConfig, MissingImage
from .masks import RasterMask

logger = logging.getLogger(__name__)

RGB = Tuple[int, int, int]

# 8-color qualitative palette, cycled by candidate id.
PALETTE: Tuple[RGB, ...] = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)
WORKING_COLOR: RGB = (255, 255, 255)
OUTLINE_COLOR: RGB = (0, 0, 0)
CAPTION_BACKGROUND: RGB = (0, 0, 0)
CAPTION_TEXT: RGB = (255, 255, 255)
CAPTION_PADDING = 2
DEFAULT_ALPHA = 0.45


@dataclass(frozen=True)
class OverlayStyle:
    fill_color: RGB
    fill_alpha: float = DEFAULT_ALPHA
    outline_color: RGB = OUTLINE_COLOR
    outline_width: int = 1
    caption: str = ''

    def __post_init__(self):
        if not 0.0 <= self.fill_alpha <= 1.0:
            raise InvalidConfig(f"fill_alpha must be in [0, 1], got {self.fill_alpha}")
        if self.outline_width < 1:
            raise InvalidConfig(f"outline_width must be >= 1, got {self.outline_width}")
        for color in (self.fill_color, self.outline_color):
            if len(color) != 3 or not all(0 <= c <= 255 for c in color):
                raise InvalidConfig(f"colors must be RGB triples in [0, 255], got {color}")


def palette_color(candidate_id: int) -> RGB:
    return PALETTE[(candidate_id - 1) % len(PALETTE)]


# ===== IMAGE I/O =====

def load_image(path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise MissingImage(f"image not found: {path}")
    with Image.open(path) as image:
        return image.convert('RGB')


def encode_png(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.save(buffer, format='PNG')
    return buffer.getvalue()


def fit_for_transport(image: Image.Image, max_side: Optional[int]) -> Image.Image:
    """Downscale so the longest side is at most max_side (never upscales)."""
    if not max_side or max(image.size) <= max_side:
        return image
    scale = max_side / max(image.size)
    size = (max(1, round(image.width * scale)), max(1, round(image.height * scale)))
    return image.resize(size, Image.Resampling.LANCZOS)


def to_data_uri(image: Image.Image, max_side: Optional[int] = None) -> str:
    encoded = base64.b64encode(encode_png(fit_for_transport(image, max_side))).decode('ascii')
    return f"data:image/png;base64,{encoded}"


# ===== RENDERING =====

def _dilate(bits: np.ndarray, iterations: int) -> np.ndarray:
    grown = bits
    for _ in range(iterations):
        padded = np.pad(grown, 1)
        grown = (
            padded[1:-1, 1:-1] | padded[:-2, 1:-1] | padded[2:, 1:-1]
            | padded[1:-1, :-2] | padded[1:-1, 2:]
        )
    return grown


def caption_box(caption: str, size: Tuple[int, int]) -> Optional[Tuple[int, int, int, int]]:
    """Top-left box (x0, y0, x1, y1), exclusive end, that a caption occupies."""
    if not caption:
        return None
    width, height = size
    draw = ImageDraw.Draw(Image.new('RGB', (1, 1)))
    left, top, right, bottom = draw.textbbox((CAPTION_PADDING, CAPTION_PADDING), caption,
                                             font=ImageFont.load_default())
    return (0, 0, min(width, right + CAPTION_PADDING), min(height, bottom + CAPTION_PADDING))


def render_overlay(image: Image.Image, mask: RasterMask, style: OverlayStyle) -> Image.Image:
    if image.size != (mask.width, mask.height):
        raise DimensionMismatch(
            f"mask {mask.width}x{mask.height} does not match image {image.width}x{image.height}"
        )
    pixels = np.asarray(image.convert('RGB'), dtype=np.float64)
    out = pixels.copy()
    bits = mask.bits

    fill = np.array(style.fill_color, dtype=np.float64)
    alpha = style.fill_alpha
    out[bits] = np.rint(pixels[bits] * (1.0 - alpha) + fill * alpha)

    ring = _dilate(bits, style.outline_width) & ~bits
    out[ring] = np.array(style.outline_color, dtype=np.float64)

    rendered = Image.fromarray(out.astype(np.uint8))
    box = caption_box(style.caption, rendered.size)
    if box is not None:
        draw = ImageDraw.Draw(rendered)
        draw.rectangle((box[0], box[1], box[2] - 1, box[3] - 1), fill=CAPTION_BACKGROUND)
        draw.text((CAPTION_PADDING, CAPTION_PADDING), style.caption, fill=CAPTION_TEXT,
                  font=ImageFont.load_default())
    return rendered


def examine_each_mask(image: Image.Image, candidates: Sequence, working: RasterMask,
                      alpha: float = DEFAULT_ALPHA, outline_width: int = 1) -> List[Tuple[str, Image.Image]]:
    """
    Captioned overlays for inspection: the working mask first, then every
    candidate in id order.
    """
    overlays = [('working', render_overlay(image, working, OverlayStyle(
        fill_color=WORKING_COLOR, fill_alpha=alpha, outline_width=outline_width, caption='working',
    )))]
    for candidate in sorted(candidates, key=lambda c: c.candidate_id):
        caption = f"cand {candidate.candidate_id}"
        overlays.append((caption, render_overlay(image, candidate.mask, OverlayStyle(
            fill_color=palette_color(candidate.candidate_id), fill_alpha=alpha,
            outline_width=outline_width, caption=caption,
        ))))
    return overlays


def compose_grid(overlays: Sequence[Tuple[str, Image.Image]], columns: Optional[int] = None,
                 gap: int = 4) -> Tuple[str, Image.Image]:
    """Pack captioned overlays into one tiled image (row-major, input order)."""
    if not overlays:
        raise DimensionMismatch('nothing to compose')
    columns = columns or math.ceil(math.sqrt(len(overlays)))
    rows = math.ceil(len(overlays) / columns)
    tile_w, tile_h = overlays[0][1].size
    grid = Image.new('RGB', (columns * tile_w + (columns - 1) * gap, rows * tile_h + (rows - 1) * gap),
                     (128, 128, 128))
    for index, (_, tile) in enumerate(overlays):
        if tile.size != (tile_w, tile_h):
            raise DimensionMismatch('grid tiles must share dimensions')
        row, col = divmod(index, columns)
        grid.paste(tile, (col * (tile_w + gap), row * (tile_h + gap)))
    caption = 'grid: ' + ', '.join(caption for caption, _ in overlays)
    return caption, grid


def dump_overlays(directory, round_index: int, overlays: Sequence[Tuple[str, Image.Image]]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for caption, image in overlays:
        slug = caption.replace(' ', '_').replace(':', '').replace(',', '')[:60]
        path = directory / f"round_{round_index:02d}_{slug}.png"
        image.save(path, format='PNG')
        paths.append(path)
    logger.debug("wrote %d overlays for round %d to %s", len(paths), round_index, directory)
    return paths
