"""Classical anonymization: pixelization, Gaussian blur, masking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ConfigError

KINDS = ("pixelize", "blur", "mask")


def pixelize(image: np.ndarray, block: int) -> np.ndarray:
    """Replace every block x block tile by its mean; edge tiles use partial means."""
    if block < 1:
        raise ConfigError("block size must be positive")
    img = np.asarray(image)
    out = np.empty_like(img)
    h, w = img.shape[:2]
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[y:y + block, x:x + block]
            out[y:y + block, x:x + block] = tile.mean(axis=(0, 1), dtype=np.float64)
    return out


def gaussian_kernel(size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps; sigma defaults to size/6."""
    if size < 1 or size % 2 == 0:
        raise ConfigError("kernel size must be a positive odd integer")
    sigma = size / 6.0 if sigma is None else sigma
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(image: np.ndarray, size: int, sigma: Optional[float] = None) -> np.ndarray:
    """Separable Gaussian blur with reflective padding."""
    k = gaussian_kernel(size, sigma)
    img = np.asarray(image, dtype=np.float64)
    out = convolve1d(img, k, axis=0, mode="reflect")
    out = convolve1d(out, k, axis=1, mode="reflect")
    return out.astype(np.asarray(image).dtype, copy=False)


def mask_region(image: np.ndarray, face_mask: np.ndarray, fill: float = 0.0) -> np.ndarray:
    out = np.array(image, copy=True)
    out[np.asarray(face_mask, dtype=bool)] = fill
    return out


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "pixelize" and (self.param < 1 or int(self.param) != self.param):
            raise ConfigError("pixelize block size must be a positive integer")
        if self.kind == "blur" and (self.param < 1 or int(self.param) != self.param or int(self.param) % 2 == 0):
            raise ConfigError("blur kernel size must be a positive odd integer")

    @property
    def name(self) -> str:
        p = int(self.param) if self.kind != "mask" else self.param
        return f"{self.kind}-{p}"

    def apply(self, image: np.ndarray, face_mask: Optional[np.ndarray] = None) -> np.ndarray:
        if self.kind == "pixelize":
            return pixelize(image, int(self.param))
        if self.kind == "blur":
            return blur(image, int(self.param))
        if face_mask is None:
            face_mask = np.ones(np.asarray(image).shape[:2], dtype=bool)
        return mask_region(image, face_mask, self.param)


def mask_box(face_mask: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    ys, xs = np.nonzero(face_mask)
    if len(ys) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def apply_in_box(image: np.ndarray, method: BaselineSpec, box, face_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Run a baseline on the (x0, y0, x1, y1) box only; pixels elsewhere are untouched."""
    x0, y0, x1, y1 = box
    out = np.array(image, copy=True)
    sub_mask = None if face_mask is None else np.asarray(face_mask)[y0:y1, x0:x1]
    out[y0:y1, x0:x1] = method.apply(out[y0:y1, x0:x1], sub_mask)
    return out
