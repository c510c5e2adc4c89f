"""8-bit PNG I/O. Internal images are float arrays [3, H, W] in [-1, 1]."""

import io
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from cfld.common.checkpoint import atomic_write
from cfld.common.errors import ShapeError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] uint8 via round((v + 1) / 2 * 255)."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"Expected an image of shape [3, H, W], got {image.shape}")
    scaled = np.rint((np.clip(image, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)
    return np.repeat(scaled, 3, axis=0).transpose(1, 2, 0) if image.shape[0] == 1 else scaled.transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32).transpose(2, 0, 1) / 255.0) * 2.0 - 1.0


def png_bytes(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(to_uint8(image))).save(buffer, format="PNG")
    return buffer.getvalue()


def write_png(path: str | Path, image: np.ndarray) -> Path:
    atomic_write(path, png_bytes(image))
    return Path(path)


def read_png(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as handle:
        pixels = np.asarray(handle.convert("RGB"))
    if size is not None and pixels.shape[:2] != (size, size):
        raise ShapeError(f"{path}: expected {size}x{size} image, got {pixels.shape[1]}x{pixels.shape[0]}")
    return from_uint8(pixels)


def read_mask(path: str | Path) -> np.ndarray:
    """Single-channel 0/255 PNG -> boolean [H, W] (True = editable)."""
    with Image.open(path) as handle:
        values = np.asarray(handle.convert("L"))
    return values >= 128


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    buffer = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(buffer, format="PNG")
    atomic_write(path, buffer.getvalue())
    return Path(path)


def make_grid(images: Sequence[np.ndarray], columns: int, pad: int = 2) -> np.ndarray:
    """Tile [3, H, W] images row by row on a white background."""
    if not images:
        raise ShapeError("make_grid: no images")
    channels, height, width = images[0].shape
    rows = -(-len(images) // columns)
    grid = np.ones((channels, rows * (height + pad) + pad, columns * (width + pad) + pad), dtype=np.float32)
    for index, image in enumerate(images):
        row, col = divmod(index, columns)
        top = pad + row * (height + pad)
        left = pad + col * (width + pad)
        grid[:, top : top + height, left : left + width] = image
    return grid
