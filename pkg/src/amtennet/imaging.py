"""Pixel-level post-processing operations on 8-bit RGB images.

All operations map uint8 (h, w, 3) RGB arrays to uint8 RGB arrays.
Spatial filters replicate edges; the Gaussian sigma is left at 0 so the
kernel-size-derived default of the underlying library applies, matching
the convention the parameter tables assume.  OpenCV expects BGR, so
channel order is swapped at the codec boundaries only (filters are
channel-agnostic).
"""
from __future__ import annotations

import cv2
import numpy as np

from .errors import DataError

FILTER_KERNELS = (3, 5, 7)
GAMMA_VALUES = (0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)
JPEG_QUALITIES = tuple(range(60, 91))
SCALE_UP_PERCENTS = (1, 3, 5, 10, 20, 30, 40, 50, 60, 70, 80, 90)
SCALE_DOWN_PERCENTS = (1, 3, 5, 10, 15, 20, 25, 30, 35, 40, 45)
SCALE_PERCENTS = SCALE_UP_PERCENTS + tuple(-p for p in SCALE_DOWN_PERCENTS)

OP_DOMAINS = {
    "ME": FILTER_KERNELS,
    "GB": FILTER_KERNELS,
    "MED": FILTER_KERNELS,
    "GC": GAMMA_VALUES,
    "JP": JPEG_QUALITIES,
    "SC": SCALE_PERCENTS,
}


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"expected a uint8 (h, w, 3) RGB image, got {img.dtype} {img.shape}")
    return img


def _check_kernel(k: int) -> int:
    if k % 2 == 0 or k < 1:
        raise DataError(f"filter kernel size must be odd and positive, got {k}")
    return k


def mean_filter(img: np.ndarray, k: int) -> np.ndarray:
    img = _check_image(img)
    _check_kernel(k)
    return cv2.blur(img, (k, k), borderType=cv2.BORDER_REPLICATE)


def gaussian_blur(img: np.ndarray, k: int, sigma: float = 0.0) -> np.ndarray:
    img = _check_image(img)
    _check_kernel(k)
    return cv2.GaussianBlur(img, (k, k), sigma, borderType=cv2.BORDER_REPLICATE)


def median_filter(img: np.ndarray, k: int) -> np.ndarray:
    img = _check_image(img)
    _check_kernel(k)
    return cv2.medianBlur(img, k)


def gamma_correct(img: np.ndarray, gamma: float) -> np.ndarray:
    """out = in^gamma on [0, 1]-normalized channels, re-quantized.

    Monotone, so pixel ordering is preserved; gamma=1 is the identity
    (the lookup table is exact there)."""
    img = _check_image(img)
    if gamma <= 0:
        raise DataError(f"gamma must be positive, got {gamma}")
    lut = np.round(((np.arange(256) / 255.0) ** gamma) * 255.0).astype(np.uint8)
    return lut[img]


def jpeg_recompress(img: np.ndarray, quality: int) -> np.ndarray:
    img = _check_image(img)
    buf = jpeg_encode(img, quality)
    return jpeg_decode(buf)


def jpeg_encode(img: np.ndarray, quality: int) -> bytes:
    img = _check_image(img)
    if not 1 <= quality <= 100:
        raise DataError(f"JPEG quality must be in [1, 100], got {quality}")
    ok, buf = cv2.imencode(".jpg", img[:, :, ::-1], [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise DataError("JPEG encoding failed")
    return buf.tobytes()


def jpeg_decode(buf: bytes) -> np.ndarray:
    arr = cv2.imdecode(np.frombuffer(buf, dtype=np.uint8), cv2.IMREAD_COLOR)
    if arr is None:
        raise DataError("JPEG decoding failed")
    return arr[:, :, ::-1].copy()


def scale(img: np.ndarray, percent: int) -> np.ndarray:
    """Bilinear resize by (1 + percent/100); the result keeps the new size
    (downstream model input resizing normalizes dimensions anyway)."""
    img = _check_image(img)
    factor = 1.0 + percent / 100.0
    if factor <= 0:
        raise DataError(f"scale percent {percent} would collapse the image")
    if percent == 0:
        return img.copy()
    h, w = img.shape[:2]
    nh, nw = max(1, round(h * factor)), max(1, round(w * factor))
    return cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)


def resize_to(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to the square model input size."""
    img = _check_image(img)
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)


def apply_op(img: np.ndarray, name: str, param) -> np.ndarray:
    """Dispatch one named operation; parameters are not domain-checked here
    (forging validates against the published parameter lists)."""
    if name == "ME":
        return mean_filter(img, int(param))
    if name == "GB":
        return gaussian_blur(img, int(param))
    if name == "MED":
        return median_filter(img, int(param))
    if name == "GC":
        return gamma_correct(img, float(param))
    if name == "JP":
        return jpeg_recompress(img, int(param))
    if name == "SC":
        return scale(img, int(param))
    raise DataError(f"unknown image operation {name!r}")


def apply_chain(img: np.ndarray, ops: list[tuple[str, object]]) -> np.ndarray:
    for name, param in ops:
        img = apply_op(img, name, param)
    return img


def read_image(path) -> np.ndarray:
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise DataError(f"could not read image {path}")
    return arr[:, :, ::-1].copy()


def write_image(path, img: np.ndarray) -> None:
    img = _check_image(img)
    if not cv2.imwrite(str(path), img[:, :, ::-1]):
        raise DataError(f"could not write image {path}")


def save_grayscale(path, channel: np.ndarray) -> None:
    """Min-max normalize a single feature-map channel to 8-bit grayscale."""
    channel = np.asarray(channel, dtype=np.float64)
    lo, hi = channel.min(), channel.max()
    if hi - lo < 1e-12:
        out = np.zeros(channel.shape, dtype=np.uint8)
    else:
        out = np.round((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), out):
        raise DataError(f"could not write image {path}")
