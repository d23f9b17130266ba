"""
Image I/O Module

8-bit raster reading and writing (PNG, binary PGM/PPM) through Pillow, plus
the two kernel artifacts written next to every result: a max-normalized
grayscale picture for viewing and a plain-text matrix that is the
authoritative copy.
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from src.degradation import as_image

logger = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = (".png", ".pgm", ".ppm")


def read_image(path: Union[str, Path]) -> np.ndarray:
    """
    Read an 8-bit raster as an (H, W, C) float64 array in [0, 1].

    Grayscale images give C=1; RGBA and palette images are converted to RGB.

    Raises:
        ValueError: Missing file, unreadable data, or a non 8-bit image.
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "RGB"):
                converted = img.copy()
            elif img.mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
                converted = img.convert("RGB")
            elif img.mode == "1":
                converted = img.convert("L")
            else:
                raise ValueError(f"Unsupported image mode '{img.mode}' in {path} (8-bit grayscale or RGB expected)")
    except (UnidentifiedImageError, OSError) as e:
        raise ValueError(f"Cannot read image {path}: {e}") from e

    array = np.asarray(converted, dtype=np.float64) / 255.0
    return as_image(array)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """round(image·255) clipped to [0, 255]."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: Union[str, Path], image: np.ndarray) -> Path:
    """
    Write an (H, W, C) image in [0, 1] as 8-bit; format follows the suffix.

    Single-channel images are written as grayscale. `.pgm` needs C=1 and
    `.ppm` needs C=3.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ValueError(f"Unsupported image format '{suffix}' for {path}; use one of {SUPPORTED_SUFFIXES}")

    pixels = to_uint8(as_image(image))
    channels = pixels.shape[2]
    if suffix == ".pgm" and channels != 1:
        raise ValueError(f"PGM output needs a single-channel image, got {channels} channels")
    if suffix == ".ppm" and channels != 3:
        raise ValueError(f"PPM output needs an RGB image, got {channels} channels")

    path.parent.mkdir(parents=True, exist_ok=True)
    picture = Image.fromarray(pixels[:, :, 0] if channels == 1 else pixels)
    picture.save(path)
    return path


def center_crop(image: np.ndarray, multiple: int) -> np.ndarray:
    """Crop H and W down to the nearest multiples of `multiple`, keeping the center."""
    if multiple < 1:
        raise ValueError(f"center_crop: multiple must be >= 1, got {multiple}")
    h, w = image.shape[:2]
    new_h, new_w = h - h % multiple, w - w % multiple
    if new_h == 0 or new_w == 0:
        raise ValueError(f"Image {h}×{w} is smaller than the required multiple {multiple}")
    top, left = (h - new_h) // 2, (w - new_w) // 2
    return image[top:top + new_h, left:left + new_w].copy()


def write_kernel_image(path: Union[str, Path], k: np.ndarray) -> Path:
    """Write a kernel as 8-bit grayscale scaled so its maximum is white."""
    k = np.asarray(k, dtype=np.float64)
    peak = float(k.max())
    scaled = k / peak if peak > 0 else np.zeros_like(k)
    return write_image(path, scaled[:, :, None])


def write_kernel_text(path: Union[str, Path], k: np.ndarray) -> Path:
    """Write a kernel as a row-major text matrix with 17 significant digits (exact float64)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(k, dtype=np.float64), fmt="%.17g")
    return path


def read_kernel_text(path: Union[str, Path]) -> np.ndarray:
    """Read a kernel written by `write_kernel_text`."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Kernel file not found: {path}")
    try:
        k = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise ValueError(f"Cannot parse kernel matrix {path}: {e}") from e
    if k.shape[0] != k.shape[1]:
        raise ValueError(f"Kernel matrix {path} is not square: shape {list(k.shape)}")
    return k
