"""MVTec-style dataset manifests and image I/O."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
from PIL import Image

from ..geometry import HomographyMatrix

SCHEMA_VERSION = 1

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "variant", "image_size", "classes", "images"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "variant": {"enum": ["original", "misaligned", "aligned"]},
        "image_size": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 2, "maxItems": 2},
        "seed": {"type": ["integer", "null"]},
        "source": {"type": ["string", "null"]},
        "classes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "kind"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "kind": {"enum": ["object", "texture"]},
                    "template": {"type": ["string", "null"]},
                },
            },
        },
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "path", "split", "label", "alignment"],
                "additionalProperties": False,
                "properties": {
                    "class": {"type": "string"},
                    "path": {"type": "string"},
                    "split": {"enum": ["train", "test"]},
                    "label": {"type": "string"},
                    "mask": {"type": ["string", "null"]},
                    "transform": {
                        "type": ["object", "null"],
                        "required": ["homography", "fill"],
                        "additionalProperties": False,
                        "properties": {
                            "homography": {"type": "array", "items": {"type": "number"}, "minItems": 9, "maxItems": 9},
                            "fill": {"enum": ["reflection", "constant"]},
                        },
                    },
                    "alignment": {"enum": ["original", "misaligned", "aligned"]},
                    "flags": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
    },
}


@dataclass
class ClassRecord:
    name: str
    kind: str  # "object" | "texture"
    template: Optional[str] = None


@dataclass
class ImageRecord:
    cls: str
    path: str
    split: str
    label: str
    mask: Optional[str] = None
    transform: Optional[dict] = None
    alignment: str = "original"
    flags: list[str] = field(default_factory=list)

    @property
    def is_anomalous(self) -> bool:
        return self.label != "good"

    @property
    def homography(self) -> HomographyMatrix | None:
        if self.transform is None:
            return None
        return HomographyMatrix.from_list(self.transform["homography"])

    def to_json(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        d = dict(d)
        d["cls"] = d.pop("class")
        return cls(**d)


@dataclass
class DatasetManifest:
    root: Path
    classes: list[ClassRecord]
    images: list[ImageRecord]
    variant: str = "original"
    image_size: tuple[int, int] = (128, 128)
    seed: Optional[int] = None
    source: Optional[str] = None

    def class_record(self, name: str) -> ClassRecord:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def records(self, cls: str | None = None, split: str | None = None) -> list[ImageRecord]:
        return [
            r
            for r in self.images
            if (cls is None or r.cls == cls) and (split is None or r.split == split)
        ]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.images:
            key = "train" if r.split == "train" else ("test_good" if r.label == "good" else "test_defect")
            out.setdefault(r.cls, {"train": 0, "test_good": 0, "test_defect": 0})[key] += 1
        return out

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "source": self.source,
            "classes": [asdict(c) for c in self.classes],
            "images": [r.to_json() for r in self.images],
        }

    def save(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        self.validate()
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        jsonschema.validate(data, MANIFEST_SCHEMA)
        m = cls(
            root=path.parent,
            classes=[ClassRecord(**c) for c in data["classes"]],
            images=[ImageRecord.from_json(r) for r in data["images"]],
            variant=data["variant"],
            image_size=tuple(data["image_size"]),
            seed=data.get("seed"),
            source=data.get("source"),
        )
        m.validate(check_files=False)
        return m

    def validate(self, check_files: bool = False) -> None:
        jsonschema.validate(self.to_json(), MANIFEST_SCHEMA)
        names = {c.name for c in self.classes}
        for r in self.images:
            if r.cls not in names:
                raise ValueError(f"{r.path}: unknown class {r.cls!r}")
            if r.split == "train" and r.label != "good":
                raise ValueError(f"{r.path}: train split may only contain label 'good'")
        if check_files:
            for r in self.images:
                img = load_image(self.root / r.path)
                if r.mask is not None:
                    mask = load_mask(self.root / r.mask)
                    if mask.shape != img.shape[:2]:
                        raise ValueError(f"{r.mask}: mask shape {mask.shape} != image shape {img.shape[:2]}")

    def load_split(self, cls: str, split: str):
        """``(N, H, W, 3)`` float32 images in [0, 1], binary labels, and masks for one class/split."""
        recs = self.records(cls, split)
        images = [load_image(self.root / r.path) for r in recs]
        labels = np.array([int(r.is_anomalous) for r in recs], dtype=np.int64)
        masks = []
        for r, img in zip(recs, images):
            if r.mask is not None:
                masks.append(load_mask(self.root / r.mask) > 0)
            else:
                masks.append(np.zeros(img.shape[:2], dtype=bool))
        images = np.stack(images) if images else np.zeros((0, *self.image_size[::-1], 3), np.float32)
        return images, labels, masks


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def save_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")
