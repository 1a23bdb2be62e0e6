"""Deep homography aligners: template mode and pairwise-rotation mode.

Both modes regress the 8 corner displacements with the SHL loss. Inputs are
resized to ``cfg.input_size`` before the network; displacements are always
reported in the pixel units of the full-resolution frame.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import cv2
import numpy as np
import torch

from .backbones import DisplacementRegressor, RegressionHead, build_backbone, to_tensor
from .checkpoints import load_container, save_container
from .errors import NonFiniteLoss
from .geometry import (
    CornerDisplacement,
    ImageFrame,
    displacement_to_homography,
    displacement_to_rotation,
    perturbed_view,
    rotation_matrix,
    rotation_to_displacement,
    warp_image,
)
from .shl import shl_loss
from .synthesis.augment import AugmentationPolicy, augment
from .synthesis.variants import sample_inward_perturbation

log = logging.getLogger(__name__)

MODES = ("template", "pairwise_rotation")


@dataclass(frozen=True)
class AlignerConfig:
    mode: str = "pairwise_rotation"
    backbone: str = "compact_cnn"
    input_size: int = 64
    rho: float = 0.25  # template mode: max inward perturbation as a fraction of the side
    max_rotation: float = 60.0  # pairwise mode: degrees
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    head_pool: int = 4
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.rho <= 0.25:
            raise ValueError("rho must lie in (0, 0.25]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlignerConfig":
        d = dict(d)
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentationPolicy(**d["augmentation"])
        return cls(**d)


class AlignerModel(torch.nn.Module):
    def __init__(self, cfg: AlignerConfig, template_id: Optional[str] = None):
        super().__init__()
        in_ch = 6 if cfg.mode == "pairwise_rotation" else 3
        backbone = build_backbone(cfg.backbone, seed=cfg.seed, pretrained=False, in_channels=in_ch)
        scale = cfg.input_size / 4.0
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            head = RegressionHead(backbone.info.out_channels, cfg.head_pool, output_scale=scale)
        self.regressor = DisplacementRegressor(backbone, head)
        self.cfg = cfg
        self.template_id = template_id
        self.loss_curve: list[float] = []

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.regressor(x)
        assert out.shape[-1] == 8
        return out

    def save(self, path) -> Path:
        meta = {
            "kind": "aligner",
            "mode": self.cfg.mode,
            "backbone": self.cfg.backbone,
            "config": self.cfg.to_dict(),
            "template_id": self.template_id,
            "loss_curve": self.loss_curve,
        }
        return save_container(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "AlignerModel":
        state, meta = load_container(path)
        if meta.get("kind") != "aligner":
            raise ValueError(f"{path} is not an aligner checkpoint")
        model = cls(AlignerConfig.from_dict(meta["config"]), meta.get("template_id"))
        model.load_state_dict(state)
        model.loss_curve = list(meta.get("loss_curve", []))
        return model.eval()


def _resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return cv2.resize(np.ascontiguousarray(img, dtype=np.float32), (size, size), interpolation=cv2.INTER_AREA)


def _scale_displacement(d: np.ndarray, src: ImageFrame, dst: ImageFrame) -> np.ndarray:
    sx = (dst.width - 1) / (src.width - 1)
    sy = (dst.height - 1) / (src.height - 1)
    return np.asarray(d).reshape(4, 2) * np.array([sx, sy])


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the center with reflection fill."""
    return warp_image(img, rotation_matrix(angle, ImageFrame.of(img)), fill="reflection")


def _template_sample(template: np.ndarray, cfg: AlignerConfig, rng: np.random.Generator):
    frame = ImageFrame.of(template)
    img = augment(template, cfg.augmentation, rng)
    d = sample_inward_perturbation(rng, cfg.rho * min(frame.width, frame.height), frame)
    x = perturbed_view(img, d)
    return x.transpose(2, 0, 1), np.asarray(d).ravel()


def _pairwise_sample(images: Sequence[np.ndarray], cfg: AlignerConfig, rng: np.random.Generator):
    img = images[int(rng.integers(len(images)))]
    frame = ImageFrame.of(img)
    img = augment(img, cfg.augmentation, rng)
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    rotated = rotate_image(img, angle)
    x = np.concatenate([img, rotated], axis=2)
    return x.transpose(2, 0, 1), np.asarray(rotation_to_displacement(angle, frame)).ravel()


def train_regressor(
    model: torch.nn.Module,
    sample: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    iterations: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer | None = None,
    start: int = 0,
    on_step: Callable[[int, float], None] | None = None,
    freeze_bn: bool = False,
) -> list[float]:
    """Minimize the SHL loss on batches drawn from ``sample``; returns the loss per step.

    ``on_step(step, loss)`` runs after each update with the 1-based step index.
    With ``freeze_bn`` batch-norm layers keep their running statistics.
    """
    model.train()
    if freeze_bn:
        for m in model.modules():
            if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                m.eval()
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(start + 1, iterations + 1):
        batch = [sample(rng) for _ in range(batch_size)]
        x = torch.from_numpy(np.stack([b[0] for b in batch]).astype(np.float32))
        y = torch.from_numpy(np.stack([b[1] for b in batch]).astype(np.float32))
        loss = shl_loss(model(x), y).mean()
        value = float(loss.detach())
        if not np.isfinite(value):
            raise NonFiniteLoss(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    model.eval()
    return losses


def select_template(n_images: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(n_images))


def train_template_aligner(normals: Sequence[np.ndarray], template: np.ndarray, cfg: AlignerConfig, template_id: str | None = None) -> AlignerModel:
    """Train a template-mode aligner on perturbed views of ``template``."""
    if len(normals) < 1:
        raise ValueError("need at least one normal image")
    cfg = replace(cfg, mode="template")
    model = AlignerModel(cfg, template_id)
    small = _resize(template, cfg.input_size)
    rng = np.random.default_rng([cfg.seed, 1])
    model.loss_curve = train_regressor(
        model, lambda r: _template_sample(small, cfg, r), cfg.iterations, cfg.batch_size, cfg.lr, rng
    )
    return model


def train_pairwise_aligner(normals: Sequence[np.ndarray], cfg: AlignerConfig, template_id: str | None = None) -> AlignerModel:
    """Train a rotation aligner on (image, rotated image) pairs."""
    if len(normals) < 1:
        raise ValueError("need at least one normal image")
    cfg = replace(cfg, mode="pairwise_rotation")
    model = AlignerModel(cfg, template_id)
    small = [_resize(im, cfg.input_size) for im in normals]
    rng = np.random.default_rng([cfg.seed, 2])
    model.loss_curve = train_regressor(
        model, lambda r: _pairwise_sample(small, cfg, r), cfg.iterations, cfg.batch_size, cfg.lr, rng
    )
    return model


@torch.no_grad()
def predict_displacement(model: AlignerModel, img: np.ndarray, reference: np.ndarray | None = None) -> CornerDisplacement:
    if (reference is not None) != (model.mode == "pairwise_rotation"):
        raise ValueError("reference image is required in pairwise mode and not allowed in template mode")
    model.eval()
    size = model.cfg.input_size
    x = _resize(img, size)
    if reference is not None:
        x = np.concatenate([_resize(reference, size), x], axis=2)
    out = model(to_tensor(x[None])).double().numpy()[0]
    frame = ImageFrame.of(img)
    return CornerDisplacement(_scale_displacement(out, ImageFrame(size, size), frame))


def estimate_alignment(model: AlignerModel, img: np.ndarray, reference: np.ndarray | None = None):
    """Predicted displacement and its homography, in full-frame pixels.

    Template mode: ``img`` is modeled as the template resampled at the
    displaced quad. Pairwise mode: ``img`` is modeled as ``reference``
    rotated by the predicted displacement.
    """
    d = predict_displacement(model, img, reference)
    H = displacement_to_homography(d, ImageFrame.of(img))
    return d, H


def align_image(model: AlignerModel, img: np.ndarray, reference: np.ndarray | None = None):
    """Warp ``img`` onto the reference pose; returns ``(aligned, applied H, angle or None)``.

    Pairwise mode applies the exact inverse rotation fitted to the predicted
    corners; template mode applies the predicted homography.
    """
    frame = ImageFrame.of(img)
    d, H = estimate_alignment(model, img, reference)
    if model.mode == "pairwise_rotation":
        angle = displacement_to_rotation(d, frame)
        applied = rotation_matrix(-angle, frame)
        return warp_image(img, applied, fill="reflection"), applied, angle
    return warp_image(img, H, fill="reflection"), H, None

