"""Procedural glyph shapes used to build the synthetic fixture dataset.

Each class id maps to a boolean mask drawn inside a square patch. Masks
are built from coordinate grids so the same (class, size) pair always
yields the same shape; randomness enters only through placement, size and
intensity chosen by the callers.
"""

from __future__ import annotations

import numpy as np

CLASS_NAMES = (
    "filled_square",
    "hollow_square",
    "disk",
    "ring",
    "plus",
    "cross",
    "h_stripes",
    "v_stripes",
    "triangle",
    "checkerboard",
)
NUM_CLASSES = len(CLASS_NAMES)


def glyph_mask(class_id: int, size: int) -> np.ndarray:
    """Boolean (size, size) mask of the glyph for one class."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class id {class_id} out of range")
    if size < 8:
        raise ValueError(f"glyph size must be >= 8, got {size}")
    t = max(2, size // 6)  # stroke thickness
    rows, cols = np.mgrid[0:size, 0:size]
    center = (size - 1) / 2
    name = CLASS_NAMES[class_id]

    if name == "filled_square":
        return np.ones((size, size), dtype=bool)
    if name == "hollow_square":
        border = (rows < t) | (rows >= size - t) | (cols < t) | (cols >= size - t)
        return border
    if name == "disk":
        r2 = (rows - center) ** 2 + (cols - center) ** 2
        return r2 <= (size / 2) ** 2
    if name == "ring":
        r2 = (rows - center) ** 2 + (cols - center) ** 2
        outer = (size / 2) ** 2
        inner = (size / 2 - t) ** 2
        return (r2 <= outer) & (r2 >= inner)
    if name == "plus":
        bar = t + (size // 8)
        horiz = np.abs(rows - center) <= bar / 2
        vert = np.abs(cols - center) <= bar / 2
        return horiz | vert
    if name == "cross":
        main = np.abs(rows - cols) < t
        anti = np.abs(rows + cols - (size - 1)) < t
        return main | anti
    if name == "h_stripes":
        return (rows // t) % 2 == 0
    if name == "v_stripes":
        return (cols // t) % 2 == 0
    if name == "triangle":
        # upward triangle: row i spans the middle 2*i/size fraction
        half_span = (rows + 1) * center / size
        return np.abs(cols - center) <= half_span
    if name == "checkerboard":
        block = max(3, size // 4)
        return ((rows // block) + (cols // block)) % 2 == 0
    raise AssertionError(name)


def tight_box(mask: np.ndarray, row0: int, col0: int) -> tuple[int, int, int, int]:
    """Inclusive (x0, y0, x1, y1) bounds of a mask placed at (row0, col0)."""
    ys, xs = np.nonzero(mask)
    return (col0 + int(xs.min()), row0 + int(ys.min()),
            col0 + int(xs.max()), row0 + int(ys.max()))


def draw_glyph(canvas: np.ndarray, class_id: int, size: int, row0: int,
               col0: int, intensity: int) -> tuple[int, int, int, int]:
    """Stamp a glyph onto a grayscale uint8 canvas; returns its tight box."""
    mask = glyph_mask(class_id, size)
    region = canvas[row0:row0 + size, col0:col0 + size]
    if region.shape != mask.shape:
        raise ValueError("glyph does not fit inside the canvas")
    region[mask] = intensity
    return tight_box(mask, row0, col0)
