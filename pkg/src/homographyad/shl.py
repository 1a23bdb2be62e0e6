"""Self-homography learning: fine-tune a backbone to regress corner perturbations."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbones import REGISTRY, Backbone, DisplacementRegressor, RegressionHead
from .checkpoints import config_hash, load_container, save_container
from .geometry import ImageFrame, perturbed_view
from .synthesis.augment import AugmentationPolicy, augment
from .synthesis.variants import sample_inward_perturbation

log = logging.getLogger(__name__)


def shl_loss(pred, target):
    """Sum over the four corners of the squared Euclidean error.

    Accepts ``CornerDisplacement``/arrays of 8 values (returns a float) or
    torch tensors shaped ``(..., 8)`` / ``(..., 4, 2)`` (returns per-sample
    losses).
    """
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        p = torch.as_tensor(pred)
        t = torch.as_tensor(target, dtype=p.dtype)
        p = p.reshape(*p.shape[: p.dim() - (2 if p.shape[-2:] == (4, 2) else 1)], 8)
        t = t.reshape(p.shape)
        return ((p - t) ** 2).sum(dim=-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.size != 8 or t.size != 8:
        raise ValueError("shl_loss expects 8 values per displacement")
    return float(((p - t) ** 2).sum())


@dataclass(frozen=True)
class ShlConfig:
    backbone: str = "compact_cnn"
    rho: Optional[float] = None  # pixels; None -> 25% of the image side
    iterations: int = 3000
    checkpoint_every: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    head_pool: int = 1  # 1 = global average pooling
    finetune_all: bool = True
    freeze_bn: bool = True  # keep pretrained batch-norm statistics
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in REGISTRY:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.checkpoint_every <= 0 or self.iterations % self.checkpoint_every:
            raise ValueError("checkpoint_every must divide iterations")

    def rho_for(self, frame: ImageFrame) -> float:
        rho = self.rho if self.rho is not None else 0.25 * min(frame.width, frame.height)
        if not 0 < rho <= min(frame.width, frame.height) / 4:
            raise ValueError(f"rho {rho} violates 0 < rho <= min(w, h)/4")
        return rho

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShlConfig":
        d = dict(d)
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentationPolicy(**d["augmentation"])
        return cls(**d)


@dataclass
class Checkpoint:
    iteration: int
    loss: float
    weights: dict | None = None  # in-memory backbone state dict
    path: Optional[str] = None  # on-disk container


@dataclass
class CheckpointSeries:
    checkpoints: list[Checkpoint]
    losses: list[float]  # per-step training loss
    config: ShlConfig
    directory: Optional[Path] = None

    def __len__(self):
        return len(self.checkpoints)

    @property
    def iterations(self) -> list[int]:
        return [c.iteration for c in self.checkpoints]

    def weights(self, ckpt: Checkpoint) -> dict:
        if ckpt.weights is not None:
            return ckpt.weights
        state, _ = load_container(ckpt.path)
        return state

    def load_backbone(self, backbone: Backbone, ckpt: Checkpoint) -> Backbone:
        bb = copy.deepcopy(backbone)
        bb.load_state_dict(self.weights(ckpt))
        return bb.eval()

    def index_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config.to_dict()),
            "checkpoints": [
                {"iteration": c.iteration, "loss": c.loss, "file": Path(c.path).name if c.path else None}
                for c in self.checkpoints
            ],
        }

    @classmethod
    def load(cls, directory) -> "CheckpointSeries":
        directory = Path(directory)
        index = json.loads((directory / "series.json").read_text())
        cfg = ShlConfig.from_dict(index["config"])
        losses = json.loads((directory / "losses.json").read_text()) if (directory / "losses.json").exists() else []
        ckpts = [
            Checkpoint(c["iteration"], c["loss"], None, str(directory / c["file"]))
            for c in index["checkpoints"]
        ]
        return cls(ckpts, losses, cfg, directory)


def _shl_sample(images: Sequence[np.ndarray], cfg: ShlConfig, rng: np.random.Generator):
    img = images[int(rng.integers(len(images)))]
    frame = ImageFrame.of(img)
    img = augment(img, cfg.augmentation, rng)
    d = sample_inward_perturbation(rng, cfg.rho_for(frame), frame)
    return perturbed_view(img, d).transpose(2, 0, 1), np.asarray(d).ravel()


def build_regressor(backbone: Backbone, cfg: ShlConfig, frame: ImageFrame) -> DisplacementRegressor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        head = RegressionHead(backbone.info.out_channels, cfg.head_pool, output_scale=cfg.rho_for(frame))
    return DisplacementRegressor(copy.deepcopy(backbone), head)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def finetune_backbone(
    backbone: Backbone,
    normals: Sequence[np.ndarray],
    cfg: ShlConfig,
    out_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    sample_hook: Callable[[np.ndarray], None] | None = None,
) -> CheckpointSeries:
    """Fine-tune a copy of ``backbone`` by regressing inward corner perturbations.

    The regression head is discarded; each checkpoint stores backbone weights
    only. With ``out_dir`` every checkpoint is written as a container plus a
    resumable training state, and ``resume=True`` continues from the latest
    one. ``stop_after`` ends the run early at that iteration (used to
    simulate interruption).
    """
    if not normals:
        raise ValueError("need at least one normal image")
    frame = ImageFrame.of(normals[0])
    model = build_regressor(backbone, cfg, frame)
    if not cfg.finetune_all:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 3])
    out_dir = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Checkpoint] = []
    losses: list[float] = []
    start = 0

    if resume and out_dir is not None and (out_dir / "series.json").exists():
        series = CheckpointSeries.load(out_dir)
        if series.checkpoints:
            last = series.checkpoints[-1]
            state, _ = load_container(out_dir / f"state_{last.iteration:06d}")
            model.load_state_dict(state["model"])
            optimizer.load_state_dict(state["optimizer"])
            rng.bit_generator.state = state["rng"]
            checkpoints = series.checkpoints
            losses = list(series.losses[: last.iteration])
            start = last.iteration

    def sample(r):
        x, y = _shl_sample(normals, cfg, r)
        if sample_hook is not None:
            sample_hook(x)
        return x, y

    end = cfg.iterations if stop_after is None else min(stop_after, cfg.iterations)
    for chunk_start in range(start, end, cfg.checkpoint_every):
        chunk_end = chunk_start + cfg.checkpoint_every
        from .alignment import train_regressor

        step_losses = train_regressor(
            model, sample, chunk_end, cfg.batch_size, cfg.lr, rng, optimizer=optimizer, start=chunk_start,
            freeze_bn=cfg.freeze_bn,
        )
        losses.extend(step_losses)
        window = float(np.mean(step_losses))
        weights = {k: v.detach().clone() for k, v in model.backbone.state_dict().items()}
        ckpt = Checkpoint(chunk_end, window, weights)
        if out_dir is not None:
            meta = {"kind": "backbone", "backbone": cfg.backbone, "iteration": chunk_end, "config": cfg.to_dict()}
            ckpt.path = str(save_container(out_dir / f"ckpt_{chunk_end:06d}", weights, meta))
            save_container(
                out_dir / f"state_{chunk_end:06d}",
                {"model": model.state_dict(), "optimizer": optimizer.state_dict(), "rng": _rng_state(rng)},
                {"kind": "train_state", "iteration": chunk_end, "config": cfg.to_dict()},
            )
        checkpoints.append(ckpt)
        series = CheckpointSeries(checkpoints, losses, cfg, out_dir)
        if out_dir is not None:
            (out_dir / "series.json").write_text(json.dumps(series.index_json(), indent=1) + "\n")
            (out_dir / "losses.json").write_text(json.dumps(losses) + "\n")
        log.info("SHL iteration %d: mean loss %.4f", chunk_end, window)
    return CheckpointSeries(checkpoints, losses, cfg, out_dir)


def select_checkpoint(series: CheckpointSeries, evaluator: Callable[[Checkpoint], float]) -> tuple[Checkpoint, list[float]]:
    """Checkpoint with the highest evaluator value; ties go to the earliest iteration."""
    values = [float(evaluator(c)) for c in series.checkpoints]
    best = int(np.argmax(values))  # first occurrence on ties
    return series.checkpoints[best], values


def grad_check_head(head: torch.nn.Module, probe: torch.Tensor, target: torch.Tensor, step: float = 1e-4, loss_scale: float = 1.0):
    """Max relative error between autograd and central finite differences of
    ``loss_scale * mean(shl_loss(head(probe), target))`` w.r.t. head parameters.

    Runs in float64 on a copy of ``head``. Returns ``(max_rel_error, grad_norm)``.
    """
    head = copy.deepcopy(head).double()
    probe = probe.double()
    target = target.double()

    def loss_fn():
        return loss_scale * shl_loss(head(probe), target).mean()

    head.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in head.parameters()]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(head.parameters(), analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                denom = max(abs(numeric), abs(gflat[i].item()), 1e-8)
                worst = max(worst, abs(numeric - gflat[i].item()) / denom)
    norm = float(torch.sqrt(sum((g**2).sum() for g in analytic)))
    return worst, norm
