"""Anomaly heatmap panels: input | overlay | mask."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

ALPHA = 0.5


def normalize_map(score_map: np.ndarray) -> np.ndarray:
    """Per-image min-max normalization to [0, 1]; a constant map becomes zeros."""
    m = np.asarray(score_map, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def overlay(score_map: np.ndarray, img: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Jet-colored normalized map blended over ``img`` (float RGB in [0, 1])."""
    colored = colormaps["jet"](normalize_map(score_map))[..., :3]
    return (1 - alpha) * np.asarray(img, dtype=np.float64) + alpha * colored


def heatmap_panel(score_map: np.ndarray, img: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """uint8 side-by-side panel at input resolution."""
    img = np.asarray(img, dtype=np.float64)
    if score_map.shape != img.shape[:2]:
        raise ValueError(f"score map {score_map.shape} does not match image {img.shape[:2]}")
    tiles = [img, overlay(score_map, img)]
    if mask is not None:
        tiles.append(np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=2))
    panel = np.concatenate(tiles, axis=1)
    return np.round(np.clip(panel, 0, 1) * 255).astype(np.uint8)


def render_heatmap(score_map: np.ndarray, img: np.ndarray, out_path, mask: np.ndarray | None = None) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_panel(score_map, img, mask)).save(out_path)
    return out_path
