"""Rank-statistic AUROC at image and pixel level."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ..errors import DimensionMismatch, SingleClass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied (anomaly, normal) pairs count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise DimensionMismatch(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    if len(maps) != len(masks):
        raise DimensionMismatch(f"{len(maps)} maps vs {len(masks)} masks")
    for m, k in zip(maps, masks):
        if np.shape(m) != np.shape(k):
            raise DimensionMismatch(f"map {np.shape(m)} vs mask {np.shape(k)}")
    s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    y = np.concatenate([np.asarray(k).astype(bool).ravel() for k in masks])
    return auroc(s, y)
