"""Import an MVTec AD directory tree as a resized, manifest-backed dataset."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .manifest import ClassRecord, DatasetManifest, ImageRecord, load_image, load_mask, save_image, save_mask

TEXTURE_CLASSES = ("carpet", "grid", "leather", "tile", "wood")


def _is_class_dir(p: Path) -> bool:
    return (p / "train" / "good").is_dir() and (p / "test").is_dir()


def import_mvtec(src_root, out_dir, classes: Sequence[str] | None = None, size: int = 256) -> DatasetManifest:
    """Resize every image of an MVTec-layout tree to ``size`` x ``size`` and write a manifest.

    Images use area interpolation, masks nearest neighbour. Class kinds come
    from the fixed MVTec texture list.
    """
    src_root, out_dir = Path(src_root), Path(out_dir)
    available = sorted(p.name for p in src_root.iterdir() if p.is_dir() and _is_class_dir(p))
    classes = list(classes) if classes else available
    missing = set(classes) - set(available)
    if missing:
        raise FileNotFoundError(f"{src_root}: no MVTec class directories for {sorted(missing)}")
    records: list[ClassRecord] = []
    images: list[ImageRecord] = []

    def put(src: Path, rel: str, mask: bool = False):
        if mask:
            m = cv2.resize(load_mask(src), (size, size), interpolation=cv2.INTER_NEAREST)
            save_mask(out_dir / rel, m)
        else:
            img = cv2.resize(load_image(src), (size, size), interpolation=cv2.INTER_AREA)
            save_image(out_dir / rel, np.clip(img, 0, 1))

    for cls in classes:
        records.append(ClassRecord(cls, "texture" if cls in TEXTURE_CLASSES else "object"))
        for p in sorted((src_root / cls / "train" / "good").glob("*.png")):
            rel = f"{cls}/train/good/{p.name}"
            put(p, rel)
            images.append(ImageRecord(cls, rel, "train", "good"))
        for label_dir in sorted(d for d in (src_root / cls / "test").iterdir() if d.is_dir()):
            label = label_dir.name
            for p in sorted(label_dir.glob("*.png")):
                rel = f"{cls}/test/{label}/{p.name}"
                put(p, rel)
                mrel = None
                if label != "good":
                    gt = src_root / cls / "ground_truth" / label / f"{p.stem}_mask.png"
                    if not gt.exists():
                        raise FileNotFoundError(f"missing ground-truth mask {gt}")
                    mrel = f"{cls}/ground_truth/{label}/{gt.name}"
                    put(gt, mrel, mask=True)
                images.append(ImageRecord(cls, rel, "test", label, mask=mrel))
    manifest = DatasetManifest(out_dir, records, images, "original", (size, size), None, str(src_root))
    manifest.save()
    return manifest
