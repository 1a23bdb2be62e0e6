"""Color (hue, brightness) and shape (pepper, salt) training augmentations."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

CATEGORIES = ("none", "color", "shape", "shape+color")


@dataclass(frozen=True)
class AugmentationPolicy:
    category: str = "shape+color"
    hue_shift: float = 0.1
    brightness: float = 0.2
    pepper_rate: float = 0.02
    salt_rate: float = 0.02

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        for name in ("pepper_rate", "salt_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.2:
                raise ValueError(f"{name} must lie in [0, 0.2], got {v}")
        if not 0.0 <= self.hue_shift <= 1.0:
            raise ValueError("hue_shift must lie in [0, 1]")
        if not 0.0 <= self.brightness < 1.0:
            raise ValueError("brightness must lie in [0, 1)")

    @property
    def uses_color(self) -> bool:
        return self.category in ("color", "shape+color")

    @property
    def uses_shape(self) -> bool:
        return self.category in ("shape", "shape+color")

    def to_dict(self) -> dict:
        return asdict(self)


def _value_range(img: np.ndarray) -> tuple[float, float]:
    if np.issubdtype(img.dtype, np.integer):
        return 0.0, float(np.iinfo(img.dtype).max)
    return 0.0, 1.0


def shift_hue(img: np.ndarray, delta: float) -> np.ndarray:
    """Rotate the hue channel by ``delta`` (fraction of the hue circle)."""
    lo, hi = _value_range(img)
    hsv = rgb_to_hsv(np.clip(img.astype(np.float64) / hi, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + delta, 1.0)
    out = hsv_to_rgb(hsv) * hi
    return _restore(out, img.dtype, lo, hi)


def scale_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    lo, hi = _value_range(img)
    return _restore(img.astype(np.float64) * factor, img.dtype, lo, hi)


def salt_and_pepper(img: np.ndarray, pepper_rate: float, salt_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Set ``round(rate * H * W)`` distinct pixels to the minimum / maximum value."""
    lo, hi = _value_range(img)
    h, w = img.shape[:2]
    n = h * w
    n_pepper = int(round(pepper_rate * n))
    n_salt = int(round(salt_rate * n))
    if n_pepper + n_salt == 0:
        return img.copy()
    idx = rng.choice(n, size=n_pepper + n_salt, replace=False)
    out = img.copy()
    flat = out.reshape(n, -1)
    flat[idx[:n_pepper]] = lo
    flat[idx[n_pepper:]] = hi
    return out


def _restore(out: np.ndarray, dtype, lo: float, hi: float) -> np.ndarray:
    out = np.clip(out, lo, hi)
    if np.issubdtype(dtype, np.integer):
        out = np.rint(out)
    return out.astype(dtype)


def augment(img: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    if policy.category == "none":
        return img.copy()
    out = img
    if policy.uses_color:
        out = shift_hue(out, rng.uniform(-policy.hue_shift, policy.hue_shift))
        out = scale_brightness(out, rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness))
    if policy.uses_shape:
        out = salt_and_pepper(out, policy.pepper_rate, policy.salt_rate, rng)
    return out if out is not img else img.copy()
