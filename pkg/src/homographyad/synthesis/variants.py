"""Random perturbations and aligned / misaligned dataset variants."""
from __future__ import annotations

import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from ..errors import AlignmentFailure, DegenerateCorrespondence, InfeasibleParams, PointAtInfinity
from ..geometry import (
    CornerDisplacement,
    HomographyMatrix,
    ImageFrame,
    apply_homography,
    similarity_matrix,
    warp_image,
)
from .manifest import DatasetManifest, load_image, load_mask, save_image, save_mask

if TYPE_CHECKING:
    from ..alignment import AlignerModel

log = logging.getLogger(__name__)

_MAX_REJECTIONS = 1000


def sample_inward_perturbation(rng: np.random.Generator, rho: float, frame: ImageFrame) -> CornerDisplacement:
    """Uniform corner displacement pointing into the frame, each component in [0, rho]."""
    if not 0 < rho <= min(frame.width, frame.height) / 4:
        raise ValueError(f"rho must lie in (0, min(w, h)/4], got {rho}")
    signs = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    while True:
        d = rng.uniform(0.0, rho, size=(4, 2)) * signs
        if _is_convex(frame.corners + d):
            return CornerDisplacement(d)


def _is_convex(quad: np.ndarray) -> bool:
    cross = np.empty(4)
    for i in range(4):
        a, b, c = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross[i] = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
    return bool(np.all(cross > 0) or np.all(cross < 0))


@dataclass(frozen=True)
class MisalignmentParams:
    max_rotation: float = 30.0  # degrees
    max_translation: float = 0.08  # fraction of the side
    max_scale_delta: float = 0.1
    foreground_margin: float = 0.2  # fraction of the side left around the central foreground square

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.foreground_margin >= 0.5:
            raise ValueError("foreground_margin must be < 0.5")

    def to_dict(self) -> dict:
        return asdict(self)


def foreground_box(frame: ImageFrame, margin: float) -> np.ndarray:
    side = (1.0 - 2.0 * margin) * min(frame.width, frame.height)
    c = frame.center
    h = side / 2.0
    return np.array([[c[0] - h, c[1] - h], [c[0] + h, c[1] - h], [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]])


def sample_misalignment(rng: np.random.Generator, params: MisalignmentParams, frame: ImageFrame) -> HomographyMatrix:
    """Random rotation/translation/isotropic scale keeping the foreground box in frame.

    Resamples until the mapped foreground box lies inside the frame; raises
    ``InfeasibleParams`` after 1000 consecutive rejections.
    """
    box = foreground_box(frame, params.foreground_margin)
    side = min(frame.width, frame.height)
    for _ in range(_MAX_REJECTIONS):
        angle = rng.uniform(-params.max_rotation, params.max_rotation)
        tx, ty = rng.uniform(-params.max_translation, params.max_translation, 2) * side
        scale = 1.0 + rng.uniform(-params.max_scale_delta, params.max_scale_delta)
        H = similarity_matrix(angle, scale, tx, ty, frame)
        mapped = apply_homography(H, box)
        inside = (
            (mapped[:, 0] >= 0) & (mapped[:, 0] <= frame.width - 1)
            & (mapped[:, 1] >= 0) & (mapped[:, 1] <= frame.height - 1)
        )
        if inside.all():
            return H
    raise InfeasibleParams(f"{_MAX_REJECTIONS} consecutive misalignment samples cut the foreground")


def warp_pair(img: np.ndarray, mask: np.ndarray | None, H: HomographyMatrix):
    """Image with bilinear sampling, mask with nearest-neighbor; both reflection-filled."""
    out = warp_image(img, H, fill="reflection")
    out_mask = None
    if mask is not None:
        out_mask = warp_image(mask.astype(np.uint8), H, fill="reflection", interpolation="nearest") > 0
    return out, out_mask


def _copy_or_warp(job):
    src_root, dst_root, rec, H = job
    src_img = Path(src_root) / rec.path
    dst_img = Path(dst_root) / rec.path
    dst_img.parent.mkdir(parents=True, exist_ok=True)
    if H is None or H.is_identity():
        shutil.copyfile(src_img, dst_img)
        if rec.mask is not None:
            (Path(dst_root) / rec.mask).parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(Path(src_root) / rec.mask, Path(dst_root) / rec.mask)
        return None
    img = load_image(src_img)
    mask = load_mask(Path(src_root) / rec.mask) > 0 if rec.mask is not None else None
    out, out_mask = warp_pair(img, mask, H)
    save_image(dst_img, out)
    if out_mask is not None:
        save_mask(Path(dst_root) / rec.mask, out_mask)
    return None


def _run_jobs(jobs, workers: int):
    errors = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_copy_or_warp, j) for j in jobs]
            for j, f in zip(jobs, futures):
                try:
                    f.result()
                except OSError as exc:
                    errors.append((j[2].path, str(exc)))
    else:
        for j in jobs:
            try:
                _copy_or_warp(j)
            except OSError as exc:
                errors.append((j[2].path, str(exc)))
    if errors:
        summary = "; ".join(f"{p}: {e}" for p, e in errors[:10])
        raise OSError(f"{len(errors)} image(s) failed: {summary}")


def build_misaligned_dataset(
    src: DatasetManifest, params: MisalignmentParams, out_dir, seed: int = 0, workers: int = 1
) -> DatasetManifest:
    """Warp every image (and mask) by an independent random similarity transform."""
    out_dir = Path(out_dir)
    frame = ImageFrame(*src.image_size)
    records = []
    jobs = []
    for i, rec in enumerate(src.images):
        rng = np.random.default_rng([seed, 7, i])
        H = sample_misalignment(rng, params, frame)
        new = replace(rec, transform={"homography": H.to_list(), "fill": "reflection"}, alignment="misaligned", flags=list(rec.flags))
        records.append(new)
        jobs.append((str(src.root), str(out_dir), rec, H))
    _run_jobs(jobs, workers)
    m = DatasetManifest(out_dir, list(src.classes), records, "misaligned", src.image_size, seed, str(src.root))
    m.save()
    return m


def build_aligned_dataset(
    src: DatasetManifest,
    aligners: dict[str, "AlignerModel"],
    templates: dict[str, str],
    out_dir,
) -> DatasetManifest:
    """Align every image of each class onto that class's template with its aligner.

    ``templates`` maps class name to the template image path (relative to
    ``src.root``). Classes without an aligner are copied unchanged. The
    template defines the reference pose and is copied with an identity
    transform. Images whose predicted quad is degenerate are copied and
    flagged.
    """
    from ..alignment import align_image

    out_dir = Path(out_dir)
    records = []
    classes = []
    for c in src.classes:
        classes.append(replace(c, template=templates.get(c.name, c.template)))
    template_imgs = {cls: load_image(src.root / rel) for cls, rel in templates.items() if cls in aligners}
    for rec in src.images:
        model = aligners.get(rec.cls)
        if model is None:
            _copy_or_warp((str(src.root), str(out_dir), rec, None))
            records.append(replace(rec, flags=list(rec.flags)))
            continue
        flags = list(rec.flags)
        if rec.path == templates[rec.cls]:
            _copy_or_warp((str(src.root), str(out_dir), rec, None))
            prev = rec.homography
            total = HomographyMatrix.identity() if prev is None else prev
            records.append(
                replace(rec, transform={"homography": total.to_list(), "fill": "reflection"}, alignment="aligned", flags=flags)
            )
            continue
        img = load_image(src.root / rec.path)
        reference = template_imgs[rec.cls] if model.mode == "pairwise_rotation" else None
        try:
            aligned, H, _ = align_image(model, img, reference)
        except (DegenerateCorrespondence, PointAtInfinity) as exc:
            log.warning("%s: %s", rec.path, AlignmentFailure(str(exc)))
            _copy_or_warp((str(src.root), str(out_dir), rec, None))
            records.append(replace(rec, flags=flags + ["alignment_failure"]))
            continue
        save_image(out_dir / rec.path, aligned)
        if rec.mask is not None:
            mask = load_mask(src.root / rec.mask) > 0
            _, out_mask = warp_pair(img, mask, H)
            save_mask(out_dir / rec.mask, out_mask)
        prev = rec.homography
        total = H if prev is None else H @ prev
        records.append(
            replace(rec, transform={"homography": total.to_list(), "fill": "reflection"}, alignment="aligned", flags=flags)
        )
    m = DatasetManifest(out_dir, classes, records, "aligned", src.image_size, src.seed, str(src.root))
    m.save()
    return m
