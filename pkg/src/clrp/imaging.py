"""Image loading, resizing and heatmap rendering (PGM mandatory, PNG optional).

Rendering normalizes each map by its own maximum for display only; metrics
are always computed from the raw maps before any rendering happens.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def load_rgb(path: str | Path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def resize_rgb(image: np.ndarray, height: int, width: int,
               method: str = "bilinear") -> np.ndarray:
    from PIL import Image
    resample = {"bilinear": Image.BILINEAR, "nearest": Image.NEAREST}[method]
    img = Image.fromarray(image).resize((width, height), resample)
    return np.asarray(img)


def render_u8(values: np.ndarray) -> np.ndarray:
    """Per-map max scaling of a nonnegative map into [0, 255]."""
    clipped = np.maximum(values.astype(np.float64), 0.0)
    peak = clipped.max()
    if peak > 0:
        clipped = clipped / peak
    return np.round(clipped * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise ValueError(f"{path} is not an 8-bit P5 PGM")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    return pixels.reshape(h, w)


def write_png_heatmap(path: str | Path, gray: np.ndarray,
                      colormap: bool = False) -> None:
    from PIL import Image
    if colormap:
        # simple black -> red -> yellow -> white ramp
        t = gray.astype(np.float64) / 255.0
        r = np.clip(3 * t, 0, 1)
        g = np.clip(3 * t - 1, 0, 1)
        b = np.clip(3 * t - 2, 0, 1)
        rgb = np.stack([r, g, b], axis=-1)
        Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)
    else:
        Image.fromarray(gray, mode="L").save(path)
