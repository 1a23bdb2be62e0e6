"""Pre-trained-feature anomaly scorers: PaDiM, PatchCore, SPADE and Mah.AD.

All fitting and distance computations run in float64 numpy; the backbone is
only used by :func:`extract_features`.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.linalg import cho_factor, solve_triangular
from scipy.ndimage import gaussian_filter

from .backbones import Backbone, state_digest, to_tensor
from .errors import ConfigMismatch, DimensionMismatch, InsufficientNormals

log = logging.getLogger(__name__)

SCORERS = ("padim", "patchcore", "spade", "mahad")


@dataclass
class FeatureMap:
    layer: str
    values: np.ndarray  # (N, C, h, w)
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class ScoreResult:
    image_score: float
    score_map: Optional[np.ndarray]
    scorer: str
    backbone: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class ScorerConfig:
    layers: tuple[str, ...] = ("layer1", "layer2", "layer3")
    eps: float = 0.01
    padim_dims: int = 100
    sigma: float = 4.0
    patch_size: int = 3
    coreset_ratio: float = 0.1
    spade_k: int = 50
    spade_kappa: int = 1
    seed: int = 0


# --------------------------------------------------------------------------- features


class FeatureExtractor:
    """Inference-mode backbone wrapper that taps a fixed set of layers."""

    def __init__(self, backbone: Backbone, layers: Sequence[str], batch_size: int = 16, checkpoint: str = ""):
        self.backbone = backbone.eval()
        self.layers = tuple(layers)
        self.batch_size = batch_size
        self.checkpoint = checkpoint
        backbone._check(self.layers)

    @property
    def name(self) -> str:
        return self.backbone.name

    def config_hash(self) -> str:
        payload = json.dumps({"backbone": self.name, "layers": self.layers, "weights": state_digest(self.backbone)})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def __call__(self, images) -> list[FeatureMap]:
        return extract_features(self.backbone, images, self.layers, self.batch_size)


@torch.no_grad()
def extract_features(backbone: Backbone, images, layers: Sequence[str], batch_size: int = 16) -> list[FeatureMap]:
    """Tapped activations for a batch of ``H x W x 3`` images in [0, 1]."""
    was_training = backbone.training
    backbone.eval()
    x = to_tensor(images)
    chunks: dict[str, list[np.ndarray]] = {layer: [] for layer in layers}
    try:
        for i in range(0, x.shape[0], batch_size):
            out = backbone.taps(x[i : i + batch_size], layers)
            for layer in layers:
                chunks[layer].append(out[layer].double().numpy())
    finally:
        backbone.train(was_training)
    return [FeatureMap(layer, np.concatenate(chunks[layer]), backbone.info.strides[layer]) for layer in layers]


def embed(features: Sequence[FeatureMap]) -> np.ndarray:
    """Resize every tap to the finest grid (nearest) and concatenate channels."""
    target = features[0].grid
    parts = []
    for fm in features:
        v = fm.values
        if fm.grid != target:
            v = F.interpolate(torch.from_numpy(v), size=target, mode="nearest").numpy()
        parts.append(v)
    return np.concatenate(parts, axis=1)


def global_descriptor(features: Sequence[FeatureMap]) -> np.ndarray:
    """Per-image concatenation of spatially averaged taps, ``(N, sum C)``."""
    return np.concatenate([fm.values.mean(axis=(2, 3)) for fm in features], axis=1)


def upsample_and_smooth(grid_scores: np.ndarray, size: tuple[int, int], sigma: float) -> np.ndarray:
    """``(N, h, w)`` -> ``(N, H, W)`` via bilinear upsampling then Gaussian smoothing."""
    t = torch.from_numpy(np.ascontiguousarray(grid_scores[:, None]))
    up = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[:, 0].numpy()
    if sigma > 0:
        up = np.stack([gaussian_filter(m, sigma=sigma) for m in up])
    return np.maximum(up, 0.0)


# --------------------------------------------------------------------------- kernels


def mahalanobis(x, mean, cov_factor) -> float:
    """``sqrt((x - mean)^T cov^-1 (x - mean))`` given the lower Cholesky factor of cov."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    L = np.asarray(cov_factor, dtype=np.float64)
    if x.shape != mean.shape or L.shape != (x.size, x.size):
        raise DimensionMismatch(f"x {x.shape}, mean {mean.shape}, factor {L.shape}")
    z = solve_triangular(L, x - mean, lower=True)
    return float(np.sqrt(z @ z))


def cov_factor(cov) -> np.ndarray:
    """Lower Cholesky factor of an SPD covariance."""
    c, _ = cho_factor(np.asarray(cov, dtype=np.float64), lower=True)
    return np.tril(c)


def kcenter_greedy(points, ratio: float | None = None, count: int | None = None, seed: int = 0, start: int | None = None) -> list[int]:
    """Greedy k-center (max-min) selection.

    Begins at ``start`` (or a seeded random index) and repeatedly adds the
    point farthest from the selected set. Ties go to the lowest index.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if count is None:
        if ratio is None:
            raise ValueError("give ratio or count")
        count = max(1, int(round(n * ratio)))
    if count < 1:
        raise ValueError("count must be >= 1")
    count = min(count, n)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    sq = (X * X).sum(axis=1)

    def dist_to(i: int) -> np.ndarray:
        # expanded form is a single BLAS matvec; exact enough for ranking
        return np.sqrt(np.maximum(sq - 2.0 * (X @ X[i]) + sq[i], 0.0))

    selected = [start]
    chosen = np.zeros(n, dtype=bool)
    chosen[start] = True
    min_d = dist_to(start)
    min_d[chosen] = -1.0
    for _ in range(count - 1):
        nxt = int(np.argmax(min_d))
        selected.append(nxt)
        chosen[nxt] = True
        np.minimum(min_d, dist_to(nxt), out=min_d)
        min_d[chosen] = -1.0
    return selected


def _pairwise_dist(a: np.ndarray, b: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Euclidean distances ``(len(a), len(b))`` via the expanded form."""
    b2 = (b * b).sum(axis=1)
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(0, a.shape[0], chunk):
        ai = a[i : i + chunk]
        d2 = (ai * ai).sum(axis=1)[:, None] - 2.0 * ai @ b.T + b2[None, :]
        out[i : i + chunk] = np.sqrt(np.maximum(d2, 0.0))
    return out


def _nearest_dist(a: np.ndarray, bank: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact nearest-neighbor Euclidean distance from each row of ``a`` to ``bank``.

    The candidate is found with the fast expanded form, then its distance is
    recomputed directly so exact matches give exactly 0.
    """
    b2 = (bank * bank).sum(axis=1)
    out = np.empty(a.shape[0])
    for i in range(0, a.shape[0], chunk):
        ai = a[i : i + chunk]
        d2 = (ai * ai).sum(axis=1)[:, None] - 2.0 * ai @ bank.T + b2[None, :]
        idx = np.argmin(d2, axis=1)
        out[i : i + chunk] = np.sqrt(((ai - bank[idx]) ** 2).sum(axis=1))
    return out


# --------------------------------------------------------------------------- models


@dataclass
class GaussianStats:
    mean: np.ndarray  # (P, d)
    cov: np.ndarray  # (P, d, d), already includes eps * I
    cov_inv: np.ndarray  # (P, d, d)
    channels: np.ndarray  # selected channel indices
    grid: tuple[int, int]
    eps: float


@dataclass
class MemoryBank:
    bank: np.ndarray  # (M, C)
    coreset: np.ndarray  # indices into the pre-subsampling pool
    patch_size: int
    grid: tuple[int, int]


@dataclass
class SpadeModel:
    descriptors: np.ndarray  # (N, D)
    maps: np.ndarray  # (N, C, h, w)
    k: int
    kappa: int


@dataclass
class MahadModel:
    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    eps: float


@dataclass
class NormalModel:
    """A fitted scorer bound to the feature extractor that produced its training features."""

    scorer: str
    state: object
    config: ScorerConfig
    backbone: str = ""
    extractor_hash: str = ""
    meta: dict = field(default_factory=dict)


def _check_normals(n: int, floor: int, what: str):
    if n < floor:
        raise InsufficientNormals(f"{what} needs at least {floor} normal images, got {n}")


def padim_fit(features: Sequence[FeatureMap], cfg: ScorerConfig = ScorerConfig()) -> GaussianStats:
    emb = embed(features)
    n, c, h, w = emb.shape
    _check_normals(n, 2, "PaDiM")
    rng = np.random.default_rng(cfg.seed)
    d = min(cfg.padim_dims, c)
    channels = np.sort(rng.choice(c, size=d, replace=False)) if d < c else np.arange(c)
    if n < d + 1:
        log.warning("PaDiM: %d normals for %d channels; covariance relies on eps", n, d)
    x = emb[:, channels].reshape(n, d, h * w).transpose(2, 0, 1)  # (P, N, d)
    mean = x.mean(axis=1)
    xc = x - mean[:, None, :]
    cov = xc.transpose(0, 2, 1) @ xc / (n - 1)
    cov += cfg.eps * np.eye(d)[None]
    cov_inv = np.linalg.inv(cov)
    return GaussianStats(mean, cov, cov_inv, channels, (h, w), cfg.eps)


def padim_distances(stats: GaussianStats, features: Sequence[FeatureMap]) -> np.ndarray:
    emb = embed(features)
    n, c, h, w = emb.shape
    if (h, w) != stats.grid or c <= int(stats.channels.max()):
        raise DimensionMismatch(f"features grid {(h, w)} / {c} channels incompatible with stats grid {stats.grid}")
    x = emb[:, stats.channels].reshape(n, len(stats.channels), h * w).transpose(2, 0, 1)
    diff = x - stats.mean[:, None, :]
    m2 = ((diff @ stats.cov_inv) * diff).sum(axis=2)
    return np.sqrt(np.maximum(m2, 0.0)).T.reshape(n, h, w)


def padim_score(stats: GaussianStats, features: Sequence[FeatureMap], image_size, sigma: float = 4.0) -> list[ScoreResult]:
    dist = padim_distances(stats, features)
    maps = upsample_and_smooth(dist, image_size, sigma)
    return [ScoreResult(float(d.max()), m, "padim") for d, m in zip(dist, maps)]


def _aggregate(features: Sequence[FeatureMap], p: int) -> np.ndarray:
    emb = embed(features)
    if p > 1:
        emb = F.avg_pool2d(torch.from_numpy(emb), p, stride=1, padding=p // 2, count_include_pad=False).numpy()
    return emb


def patchcore_fit(features: Sequence[FeatureMap], cfg: ScorerConfig = ScorerConfig()) -> MemoryBank:
    emb = _aggregate(features, cfg.patch_size)
    n, c, h, w = emb.shape
    _check_normals(n, 1, "PatchCore")
    pool = emb.transpose(0, 2, 3, 1).reshape(-1, c)
    if cfg.coreset_ratio >= 1.0:
        idx = np.arange(pool.shape[0])
    else:
        idx = np.asarray(kcenter_greedy(pool, ratio=cfg.coreset_ratio, seed=cfg.seed))
    return MemoryBank(pool[idx].copy(), idx, cfg.patch_size, (h, w))


def patchcore_distances(bank: MemoryBank, features: Sequence[FeatureMap]) -> np.ndarray:
    emb = _aggregate(features, bank.patch_size)
    n, c, h, w = emb.shape
    if c != bank.bank.shape[1]:
        raise DimensionMismatch(f"feature channels {c} != bank channels {bank.bank.shape[1]}")
    q = emb.transpose(0, 2, 3, 1).reshape(-1, c)
    return _nearest_dist(q, bank.bank).reshape(n, h, w)


def patchcore_score(bank: MemoryBank, features: Sequence[FeatureMap], image_size, sigma: float = 4.0) -> list[ScoreResult]:
    dist = patchcore_distances(bank, features)
    maps = upsample_and_smooth(dist, image_size, sigma)
    return [ScoreResult(float(d.max()), m, "patchcore") for d, m in zip(dist, maps)]


def spade_fit(features: Sequence[FeatureMap], cfg: ScorerConfig = ScorerConfig()) -> SpadeModel:
    desc = global_descriptor(features)
    _check_normals(desc.shape[0], 2, "SPADE")
    k = min(cfg.spade_k, desc.shape[0])
    return SpadeModel(desc, embed(features), k, cfg.spade_kappa)


def spade_distances(model: SpadeModel, features: Sequence[FeatureMap]):
    """Image scores ``(N,)`` and per-position maps ``(N, h, w)``."""
    desc = global_descriptor(features)
    emb = embed(features)
    if desc.shape[1] != model.descriptors.shape[1] or emb.shape[1:] != model.maps.shape[1:]:
        raise DimensionMismatch("SPADE features do not match the fitted model")
    n, c, h, w = emb.shape
    gd = _pairwise_dist(desc, model.descriptors)
    image_scores = np.empty(n)
    maps = np.empty((n, h, w))
    for i in range(n):
        order = np.argsort(gd[i], kind="stable")[: model.k]
        # exact distances for the retrieved set so a training member scores exactly 0
        image_scores[i] = np.sqrt(((model.descriptors[order] - desc[i]) ** 2).sum(axis=1)).mean()
        maps[i] = _spade_map(emb[i], model.maps[order], model.kappa)
    return image_scores, maps


def _spade_map(query: np.ndarray, gallery: np.ndarray, kappa: int) -> np.ndarray:
    """Mean distance from each query position to its ``kappa`` nearest gallery
    features at the same or an 8-adjacent position."""
    c, h, w = query.shape
    padded = np.pad(gallery, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    valid = np.pad(np.ones((h, w), dtype=bool), 1, constant_values=False)
    dists = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cand = padded[:, :, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            d = np.sqrt(((cand - query[None]) ** 2).sum(axis=1))  # (K, h, w)
            ok = valid[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
            dists.append(np.where(ok[None], d, np.inf))
    d = np.concatenate(dists, axis=0)
    kk = min(kappa, d.shape[0])
    nearest = np.partition(d, kk - 1, axis=0)[:kk] if kk < d.shape[0] else d
    return nearest.mean(axis=0)


def spade_score(model: SpadeModel, features: Sequence[FeatureMap], image_size, sigma: float = 4.0) -> list[ScoreResult]:
    scores, grid = spade_distances(model, features)
    maps = upsample_and_smooth(grid, image_size, sigma)
    return [ScoreResult(float(s), m, "spade") for s, m in zip(scores, maps)]


def mahad_fit(features: Sequence[FeatureMap], cfg: ScorerConfig = ScorerConfig()) -> MahadModel:
    desc = global_descriptor(features)
    return mahad_fit_descriptors(desc, cfg.eps)


def mahad_fit_descriptors(desc: np.ndarray, eps: float = 0.01) -> MahadModel:
    desc = np.asarray(desc, dtype=np.float64)
    _check_normals(desc.shape[0], 2, "Mah.AD")
    mean = desc.mean(axis=0)
    cov = np.cov(desc, rowvar=False).reshape(desc.shape[1], desc.shape[1]) + eps * np.eye(desc.shape[1])
    return MahadModel(mean, cov, cov_factor(cov), eps)


def mahad_score_descriptors(model: MahadModel, desc: np.ndarray) -> list[ScoreResult]:
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[1] != model.mean.size:
        raise DimensionMismatch(f"descriptor dim {desc.shape} != {model.mean.size}")
    return [ScoreResult(mahalanobis(x, model.mean, model.factor), None, "mahad") for x in desc]


def mahad_score(model: MahadModel, features: Sequence[FeatureMap], image_size=None, sigma: float = 0.0) -> list[ScoreResult]:
    return mahad_score_descriptors(model, global_descriptor(features))


_FIT = {"padim": padim_fit, "patchcore": patchcore_fit, "spade": spade_fit, "mahad": mahad_fit}
_SCORE = {"padim": padim_score, "patchcore": patchcore_score, "spade": spade_score, "mahad": mahad_score}


def fit_scorer(scorer: str, extractor: FeatureExtractor, normals, cfg: ScorerConfig = ScorerConfig()) -> NormalModel:
    if scorer not in _FIT:
        raise KeyError(f"unknown scorer {scorer!r}; choose from {SCORERS}")
    state = _FIT[scorer](extractor(normals), cfg)
    return NormalModel(scorer, state, cfg, extractor.name, extractor.config_hash(), {"checkpoint": extractor.checkpoint})


def score_images(model: NormalModel, extractor: FeatureExtractor, images) -> list[ScoreResult]:
    if extractor.config_hash() != model.extractor_hash:
        raise ConfigMismatch(
            f"model fitted with extractor {model.extractor_hash}, got {extractor.config_hash()}"
        )
    size = images[0].shape[:2]
    results = _SCORE[model.scorer](model.state, extractor(images), size, model.config.sigma)
    for r in results:
        r.backbone = model.backbone
        r.checkpoint = model.meta.get("checkpoint", "")
    return results


# --------------------------------------------------------------------------- persistence


def save_normal_model(model: NormalModel, path) -> Path:
    """Write ``<path>.npz`` (arrays) and ``<path>.json`` (scorer, backbone, config hash)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v for k, v in vars(model.state).items() if isinstance(v, np.ndarray)}
    scalars = {k: v for k, v in vars(model.state).items() if not isinstance(v, np.ndarray)}
    np.savez(path.with_suffix(".npz"), **arrays)
    sidecar = {
        "scorer": model.scorer,
        "backbone": model.backbone,
        "extractor_hash": model.extractor_hash,
        "config": asdict(model.config),
        "scalars": scalars,
        "meta": model.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True, default=list))
    return path


def load_normal_model(path, extractor: FeatureExtractor | None = None) -> NormalModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if extractor is not None and extractor.config_hash() != meta["extractor_hash"]:
        raise ConfigMismatch(f"{path}: fitted with extractor {meta['extractor_hash']}, got {extractor.config_hash()}")
    with np.load(path.with_suffix(".npz")) as z:
        arrays = {k: z[k] for k in z.files}
    scalars = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["scalars"].items()}
    cls = {"padim": GaussianStats, "patchcore": MemoryBank, "spade": SpadeModel, "mahad": MahadModel}[meta["scorer"]]
    cfg = meta["config"]
    cfg["layers"] = tuple(cfg["layers"])
    return NormalModel(meta["scorer"], cls(**arrays, **scalars), ScorerConfig(**cfg), meta["backbone"], meta["extractor_hash"], meta["meta"])
