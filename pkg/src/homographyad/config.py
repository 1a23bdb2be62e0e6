"""Run configuration: a versioned YAML document validated before any work starts."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .alignment import AlignerConfig
from .eval.studies import SelectionConfig
from .scorers import ScorerConfig
from .shl import ShlConfig
from .synthesis.augment import CATEGORIES, AugmentationPolicy
from .synthesis.toy import DEFECT_TYPES, ToyClassSpec, ToySpec
from .synthesis.variants import MisalignmentParams

CONFIG_SCHEMA_VERSION = 1
SNAPSHOT_NAME = "config.snapshot.yaml"

Backbone = Literal["compact_cnn", "resnet18", "wideresnet50", "efficientnet_b5"]
Scorer = Literal["padim", "patchcore", "spade", "mahad"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AugmentationModel(_Strict):
    category: Literal[CATEGORIES] = "shape+color"
    hue_shift: float = Field(0.1, ge=0, le=1)
    brightness: float = Field(0.2, ge=0, lt=1)
    pepper_rate: float = Field(0.02, ge=0, le=0.2)
    salt_rate: float = Field(0.02, ge=0, le=0.2)

    def build(self) -> AugmentationPolicy:
        return AugmentationPolicy(**self.model_dump())


class ToyClassModel(_Strict):
    name: str
    kind: Literal["object", "texture"] = "object"
    pose_jitter: float = Field(0.0, ge=0, le=180)
    color: tuple[float, float, float] = (0.80, 0.60, 0.30)
    defects: list[Literal[DEFECT_TYPES]] = list(DEFECT_TYPES)


class ToyModel(_Strict):
    classes: Optional[list[ToyClassModel]] = None  # None -> built-in classes
    size: int = Field(128, ge=32)
    n_train: int = Field(40, ge=2)
    n_test_good: int = Field(20, ge=1)
    n_test_defect: int = Field(20, ge=1)
    defect_strength: float = Field(0.5, gt=0)

    def build(self) -> ToySpec:
        kw = self.model_dump(exclude={"classes"})
        if self.classes is not None:
            kw["classes"] = tuple(
                ToyClassSpec(c.name, c.kind, c.pose_jitter, tuple(c.color), tuple(c.defects)) for c in self.classes
            )
        spec = ToySpec(**kw)
        spec.validate()
        return spec


class MisalignmentModel(_Strict):
    max_rotation: float = Field(30.0, ge=0)
    max_translation: float = Field(0.08, ge=0)
    max_scale_delta: float = Field(0.1, ge=0)
    foreground_margin: float = Field(0.2, ge=0, lt=0.5)

    def build(self) -> MisalignmentParams:
        return MisalignmentParams(**self.model_dump())


class DatasetModel(_Strict):
    root: Optional[Path] = None  # directory holding manifest.json
    classes: Optional[list[str]] = None  # None -> every class in the manifest


class MvtecModel(_Strict):
    source: Optional[Path] = None  # MVTec AD root (one directory per class)
    size: int = Field(256, ge=32)


class SynthesizeModel(_Strict):
    mode: Literal["toy", "misaligned", "mvtec"] = "toy"
    toy: ToyModel = ToyModel()
    misalignment: MisalignmentModel = MisalignmentModel()
    mvtec: MvtecModel = MvtecModel()


class AlignerModelCfg(_Strict):
    mode: Literal["template", "pairwise_rotation"] = "pairwise_rotation"
    backbone: Backbone = "compact_cnn"
    input_size: int = Field(64, ge=32)
    rho: float = Field(0.25, gt=0, le=0.25)
    max_rotation: float = Field(60.0, ge=0, le=180)
    iterations: int = Field(2000, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-4, gt=0)
    head_pool: int = Field(4, ge=1)
    augmentation: AugmentationModel = AugmentationModel()

    def build(self, seed: int) -> AlignerConfig:
        kw = self.model_dump(exclude={"augmentation"})
        return AlignerConfig(**kw, augmentation=self.augmentation.build(), seed=seed)


class AlignModel(_Strict):
    action: Literal["train", "apply", "train+apply"] = "train+apply"
    # per-class template: index into the class's train/good list, or a path relative to the dataset root
    template_id: Optional[dict[str, Union[int, str]]] = None
    checkpoint_dir: Optional[Path] = None  # apply-only: directory of <class>.pt aligners
    aligner: AlignerModelCfg = AlignerModelCfg()


class ShlModel(_Strict):
    rho: Optional[float] = Field(None, gt=0)
    iterations: int = Field(3000, ge=1)
    checkpoint_every: int = Field(100, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-4, gt=0)
    head_pool: int = Field(1, ge=1)
    finetune_all: bool = True
    freeze_bn: bool = True
    augmentation: AugmentationModel = AugmentationModel()

    @model_validator(mode="after")
    def _divides(self):
        if self.iterations % self.checkpoint_every:
            raise ValueError("checkpoint_every must divide iterations")
        return self

    def build(self, backbone: str, seed: int) -> ShlConfig:
        kw = self.model_dump(exclude={"augmentation"})
        return ShlConfig(backbone=backbone, augmentation=self.augmentation.build(), seed=seed, **kw)


class SelectionModel(_Strict):
    protocol: Literal["validation", "paper"] = "validation"
    scorer: Scorer = "padim"
    val_fraction: float = Field(0.25, gt=0, lt=1)

    def build(self) -> SelectionConfig:
        return SelectionConfig(**self.model_dump())


class FinetuneModel(_Strict):
    shl: ShlModel = ShlModel()
    selection: SelectionModel = SelectionModel()
    resume: bool = False


class ScorerModel(_Strict):
    layers: Optional[list[str]] = None  # None -> the backbone's default taps
    eps: float = Field(0.01, gt=0)
    padim_dims: int = Field(100, ge=1)
    sigma: float = Field(4.0, ge=0)
    patch_size: int = Field(3, ge=1)
    coreset_ratio: float = Field(0.1, gt=0, le=1)
    spade_k: int = Field(50, ge=1)
    spade_kappa: int = Field(1, ge=1)

    def build(self, default_layers) -> ScorerConfig:
        kw = self.model_dump()
        kw["layers"] = tuple(self.layers or default_layers)
        return ScorerConfig(**kw)


class EvaluateModel(_Strict):
    study: Optional[Literal["alignment", "hl", "augmentation", "backbone"]] = None  # None -> plain evaluation
    scorers: list[Scorer] = ["padim"]
    # alignment study: variant name -> dataset root
    variants: Optional[dict[Literal["misaligned", "original", "aligned"], Path]] = None
    finetune_dir: Optional[Path] = None  # reuse selected checkpoints from a finetune run
    categories: list[Literal["shape+color", "shape", "color"]] = ["shape+color", "shape", "color"]
    backbones: list[Backbone] = ["compact_cnn"]
    heatmaps: bool = True

    @field_validator("scorers")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one scorer is required")
        return v


class RunConfig(_Strict):
    schema_version: Literal[CONFIG_SCHEMA_VERSION] = CONFIG_SCHEMA_VERSION
    command: Literal["synthesize", "align", "finetune", "evaluate"]
    output_dir: Path
    profile: Literal["serial", "parallel"] = "serial"
    workers: int = Field(2, ge=1)
    seeds: list[int] = [0]
    backbone: Backbone = "compact_cnn"
    pretrained: bool = True
    dataset: DatasetModel = DatasetModel()
    synthesize: SynthesizeModel = SynthesizeModel()
    align: AlignModel = AlignModel()
    finetune: FinetuneModel = FinetuneModel()
    evaluate: EvaluateModel = EvaluateModel()
    scorer: ScorerModel = ScorerModel()

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("seeds must be a nonempty list of distinct integers")
        return v

    @model_validator(mode="after")
    def _command_requirements(self):
        needs_dataset = self.command in ("align", "finetune") or (
            self.command == "synthesize" and self.synthesize.mode == "misaligned"
        ) or (self.command == "evaluate" and self.evaluate.study != "alignment")
        if needs_dataset and self.dataset.root is None:
            raise ValueError(f"{self.command} needs dataset.root")
        if self.command == "synthesize" and self.synthesize.mode == "mvtec" and self.synthesize.mvtec.source is None:
            raise ValueError("mvtec import needs synthesize.mvtec.source")
        if self.command == "align":
            if "train" in self.align.action and not self.align.template_id:
                raise ValueError("align training needs a template id per class (align.template_id)")
            if self.align.action == "apply" and self.align.checkpoint_dir is None:
                raise ValueError("apply-only alignment needs align.checkpoint_dir")
        if self.command == "evaluate" and self.evaluate.study == "alignment":
            if not self.evaluate.variants or "original" not in self.evaluate.variants:
                raise ValueError("the alignment study needs evaluate.variants with at least 'original'")
        return self

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config and apply dotted-key overrides (``{"finetune.shl.iterations": 100}``)."""
    data: dict = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return RunConfig.model_validate(data)


def write_snapshot(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / SNAPSHOT_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.snapshot(), sort_keys=True))
    return path
