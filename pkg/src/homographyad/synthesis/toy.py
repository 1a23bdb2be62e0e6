"""Procedural MVTec-like toy dataset.

Object classes render a textured, asymmetric polygon on a noisy background;
texture classes render a tileable woven pattern. Three defect injectors are
available: ``scratch`` (thin polyline), ``spot`` (blob of shifted color) and
``structural`` (a displaced polygon vertex, or a shifted patch for textures).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import InvalidSpec
from .manifest import ClassRecord, DatasetManifest, ImageRecord, save_image, save_mask

DEFECT_TYPES = ("scratch", "spot", "structural")
_SUBPIX = 4  # fixed-point bits for cv2 drawing


@dataclass(frozen=True)
class ToyClassSpec:
    name: str
    kind: str = "object"  # "object" | "texture"
    pose_jitter: float = 0.0  # max |rotation| in degrees applied per image (objects only)
    color: tuple[float, float, float] = (0.80, 0.60, 0.30)
    defects: tuple[str, ...] = DEFECT_TYPES


@dataclass(frozen=True)
class ToySpec:
    classes: tuple[ToyClassSpec, ...] = (
        ToyClassSpec("widget", "object", 0.0, (0.80, 0.60, 0.30)),
        ToyClassSpec("rotor", "object", 30.0, (0.35, 0.65, 0.80)),
        ToyClassSpec("weave", "texture", 0.0, (0.55, 0.50, 0.45)),
    )
    size: int = 128
    n_train: int = 40
    n_test_good: int = 20
    n_test_defect: int = 20
    defect_strength: float = 0.5

    def validate(self) -> None:
        if not self.classes:
            raise InvalidSpec("toy spec needs at least one class")
        kinds = {c.kind for c in self.classes}
        if not kinds <= {"object", "texture"}:
            raise InvalidSpec(f"unknown class kinds {kinds - {'object', 'texture'}}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise InvalidSpec("class names must be unique")
        if self.size < 32:
            raise InvalidSpec("toy images must be at least 32 px")
        if self.n_train < 2 or self.n_test_good < 1 or self.n_test_defect < 1:
            raise InvalidSpec("need >= 2 train images and >= 1 good and defect test image")
        for c in self.classes:
            if not c.defects or not set(c.defects) <= set(DEFECT_TYPES):
                raise InvalidSpec(f"{c.name}: defects must be a nonempty subset of {DEFECT_TYPES}")
            if c.pose_jitter < 0 or c.pose_jitter > 180:
                raise InvalidSpec(f"{c.name}: pose_jitter must lie in [0, 180]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySpec":
        d = dict(d)
        d["classes"] = tuple(
            ToyClassSpec(**{**c, "color": tuple(c.get("color", (0.8, 0.6, 0.3))), "defects": tuple(c.get("defects", DEFECT_TYPES))})
            for c in d.get("classes", [])
        )
        return cls(**d)


def _class_shape(name: str) -> np.ndarray:
    """Canonical polygon (object coordinates, px at 128) fixed per class name."""
    seed = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
    rng = np.random.default_rng(seed)
    n = 11
    angles = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(-0.12, 0.12, n)
    radii = rng.uniform(27.0, 38.0, n)
    radii[0] = 40.0  # a long arm breaks rotational symmetry
    return np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def _coverage(shape_hw, polys, closed=True, thickness=None) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of filled polygons or polylines."""
    canvas = np.zeros(shape_hw, dtype=np.uint8)
    pts = [np.round(np.asarray(p) * (1 << _SUBPIX)).astype(np.int32) for p in polys]
    if thickness is None:
        cv2.fillPoly(canvas, pts, 255, lineType=cv2.LINE_AA, shift=_SUBPIX)
    else:
        cv2.polylines(canvas, pts, closed, 255, thickness=thickness, lineType=cv2.LINE_AA, shift=_SUBPIX)
    return canvas.astype(np.float64) / 255.0


def _ellipse_points(cx, cy, rx, ry, angle, n=32) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    c, s = np.cos(angle), np.sin(angle)
    x = rx * np.cos(t)
    y = ry * np.sin(t)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


def _pose(points: np.ndarray, angle_deg: float, center: np.ndarray) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return points @ r.T + center


def _background(rng, size: int) -> np.ndarray:
    base = 0.22 + rng.uniform(-0.02, 0.02)
    noise = gaussian_filter(rng.standard_normal((size, size)), 3.0) * 0.08
    bg = np.repeat((base + noise)[..., None], 3, axis=2)
    return bg * np.array([1.0, 1.02, 1.05])


def _blend(img, alpha, color):
    a = alpha[..., None]
    return img * (1 - a) + a * np.asarray(color)


def render_object(spec: ToyClassSpec, size: int, rng: np.random.Generator, defect: str | None, strength: float = 1.0):
    """Render one object image; returns ``(image float HxWx3, mask bool HxW)``."""
    scale = size / 128.0
    shape = _class_shape(spec.name) * scale
    shape = shape + rng.normal(0.0, 0.6 * scale, shape.shape)
    center = np.array([(size - 1) / 2.0, (size - 1) / 2.0]) + rng.uniform(-1.5, 1.5, 2) * scale
    angle = rng.uniform(-spec.pose_jitter, spec.pose_jitter) + rng.uniform(-1.5, 1.5)
    color = np.clip(np.asarray(spec.color) + rng.uniform(-0.03, 0.03, 3), 0, 1)

    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=bool)

    poly = shape
    if defect == "structural":
        k = int(rng.integers(len(shape)))
        direction = shape[k] / np.linalg.norm(shape[k])
        amount = rng.uniform(7.0, 10.0) * scale * strength * rng.choice([-1.0, 1.0])
        poly = shape.copy()
        poly[k] = shape[k] + direction * amount
        before = _coverage((size, size), [_pose(shape, angle, center)]) > 0.5
        after = _coverage((size, size), [_pose(poly, angle, center)]) > 0.5
        mask |= before ^ after

    body = _coverage((size, size), [_pose(poly, angle, center)])
    # stripes in object coordinates so the texture turns with the object
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.deg2rad(angle)
    u = np.cos(t) * (xs - center[0]) + np.sin(t) * (ys - center[1])
    v = -np.sin(t) * (xs - center[0]) + np.cos(t) * (ys - center[1])
    stripes = 0.07 * np.sin(2 * np.pi * u / (7.0 * scale)) + 0.03 * np.sin(2 * np.pi * v / (13.0 * scale))
    obj = np.clip(color[None, None, :] * (1.0 + stripes[..., None]), 0, 1)
    img = img * (1 - body[..., None]) + obj * body[..., None]

    # hole and marker (background-colored hole, dark marker) in object coordinates
    hole = _ellipse_points(9.0 * scale, -6.0 * scale, 6.5 * scale, 6.5 * scale, 0.0)
    img = _blend(img, _coverage((size, size), [_pose(hole, angle, center)]), (0.2, 0.2, 0.21))
    marker = np.array([[-20, 8], [-10, 8], [-10, 14], [-20, 14]], dtype=np.float64) * scale
    img = _blend(img, _coverage((size, size), [_pose(marker, angle, center)]), color * 0.35)

    if defect == "scratch":
        n = int(rng.integers(3, 5))
        start = rng.uniform(-16, 16, 2) * scale
        steps = rng.normal(0, 7.0 * scale * strength, (n - 1, 2))
        line = np.vstack([start, start + np.cumsum(steps, axis=0)])
        line = _pose(line, angle, center)
        alpha = _coverage((size, size), [line], closed=False, thickness=max(1, int(round(scale * strength))))
        shade = color * 0.45 if rng.random() < 0.5 else np.clip(color + 0.35, 0, 1)
        img = _blend(img, alpha, shade)
        mask |= alpha > 0.5
    elif defect == "spot":
        cx, cy = rng.uniform(-16, 16, 2) * scale
        r = rng.uniform(3.5, 5.5, 2) * scale * strength
        blob = _pose(_ellipse_points(cx, cy, r[0], r[1], rng.uniform(0, np.pi)), angle, center)
        alpha = _coverage((size, size), [blob])
        shift = np.zeros(3)
        shift[rng.integers(3)] = rng.choice([-1.0, 1.0]) * 0.3
        img = _blend(img, alpha, np.clip(color + shift, 0, 1))
        mask |= alpha > 0.5

    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _weave(size: int, color, phase, rng) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    period = 8.0
    a = np.sin(2 * np.pi * (xs + phase[0]) / period)
    b = np.sin(2 * np.pi * (ys + phase[1]) / period)
    over = (np.sign(np.sin(np.pi * (xs + phase[0]) / period) * np.sin(np.pi * (ys + phase[1]) / period)) + 1) / 2
    pattern = 0.5 + 0.18 * (over * a + (1 - over) * b)
    grain = gaussian_filter(rng.standard_normal((size, size)), 1.0) * 0.04
    return np.clip((pattern + grain)[..., None] * np.asarray(color)[None, None, :] * 1.4, 0, 1)


def render_texture(spec: ToyClassSpec, size: int, rng: np.random.Generator, defect: str | None, strength: float = 1.0):
    scale = size / 128.0
    color = np.clip(np.asarray(spec.color) + rng.uniform(-0.02, 0.02, 3), 0, 1)
    phase = rng.uniform(0, 64, 2)
    img = _weave(size, color, phase, rng)
    mask = np.zeros((size, size), dtype=bool)
    margin = int(20 * scale)
    if defect == "scratch":
        start = rng.uniform(margin, size - margin, 2)
        steps = rng.normal(0, 9.0 * scale * strength, (3, 2))
        line = np.vstack([start, start + np.cumsum(steps, axis=0)])
        alpha = _coverage((size, size), [line], closed=False, thickness=max(1, int(round(scale * strength))))
        img = _blend(img, alpha, color * 0.3)
        mask |= alpha > 0.5
    elif defect == "spot":
        cx, cy = rng.uniform(margin, size - margin, 2)
        r = rng.uniform(4.0, 6.0, 2) * scale * strength
        alpha = _coverage((size, size), [_ellipse_points(cx, cy, r[0], r[1], rng.uniform(0, np.pi))])
        img = _blend(img, alpha, np.clip(color * 1.5, 0, 1))
        mask |= alpha > 0.5
    elif defect == "structural":
        side = int(round(rng.uniform(10, 14) * scale * strength))
        x0, y0 = rng.integers(margin, size - margin - side, 2)
        dx, dy = rng.integers(2, 4, 2) * rng.choice([-1, 1], 2)
        patch = img[y0 + dy : y0 + dy + side, x0 + dx : x0 + dx + side].copy()
        img[y0 : y0 + side, x0 : x0 + side] = patch
        mask[y0 : y0 + side, x0 : x0 + side] = True
    img = img + rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0), mask


def render_sample(spec: ToyClassSpec, size: int, rng: np.random.Generator, defect: str | None = None, strength: float = 1.0):
    if spec.kind == "object":
        return render_object(spec, size, rng, defect, strength)
    return render_texture(spec, size, rng, defect, strength)


def _image_rng(seed: int, class_index: int, split: str, index: int) -> np.random.Generator:
    code = {"train": 0, "test_good": 1, "test_defect": 2}[split]
    return np.random.default_rng([seed, class_index, code, index])


def generate_toy_dataset(spec: ToySpec, out_dir, seed: int = 0) -> DatasetManifest:
    """Render ``spec`` into an MVTec-style tree under ``out_dir`` and write its manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    classes: list[ClassRecord] = []
    images: list[ImageRecord] = []
    for ci, cspec in enumerate(spec.classes):
        classes.append(ClassRecord(cspec.name, cspec.kind))
        jobs = [("train", i, None) for i in range(spec.n_train)]
        jobs += [("test_good", i, None) for i in range(spec.n_test_good)]
        jobs += [("test_defect", i, cspec.defects[i % len(cspec.defects)]) for i in range(spec.n_test_defect)]
        for split, i, defect in jobs:
            rng = _image_rng(seed, ci, split, i)
            img, mask = render_sample(cspec, spec.size, rng, defect, spec.defect_strength)
            while defect is not None and not mask.any():
                img, mask = render_sample(cspec, spec.size, rng, defect, spec.defect_strength)
            if split == "train":
                rel = f"{cspec.name}/train/good/{i:03d}.png"
                rec = ImageRecord(cspec.name, rel, "train", "good")
            elif split == "test_good":
                rel = f"{cspec.name}/test/good/{i:03d}.png"
                rec = ImageRecord(cspec.name, rel, "test", "good")
            else:
                rel = f"{cspec.name}/test/{defect}/{i:03d}.png"
                mrel = f"{cspec.name}/ground_truth/{defect}/{i:03d}_mask.png"
                save_mask(out_dir / mrel, mask)
                rec = ImageRecord(cspec.name, rel, "test", defect, mask=mrel)
            save_image(out_dir / rel, img)
            images.append(rec)
    manifest = DatasetManifest(out_dir, classes, images, "original", (spec.size, spec.size), seed, "toy")
    manifest.save()
    return manifest


def inject_defect(img: np.ndarray, rng: np.random.Generator, kind: str | None = None, margin: float = 0.25, strength: float = 0.5):
    """Class-agnostic synthetic defect (scratch or color spot) inside the central box.

    Used to build validation anomalies from held-out normal images. Returns
    ``(defective_image, bool_mask)``.
    """
    h, w = img.shape[:2]
    kind = kind or ("scratch", "spot")[int(rng.integers(2))]
    lo = np.array([margin * w, margin * h])
    hi = np.array([(1 - margin) * w, (1 - margin) * h])
    out = np.asarray(img, dtype=np.float64).copy()
    if kind == "scratch":
        p0 = rng.uniform(lo, hi)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(0.15, 0.3) * min(h, w)
        mid = p0 + 0.5 * length * np.array([np.cos(ang), np.sin(ang)]) + rng.normal(0, 2, 2)
        end = p0 + length * np.array([np.cos(ang), np.sin(ang)])
        alpha = _coverage((h, w), [np.stack([p0, mid, end])], closed=False, thickness=max(1, round(2 * strength)))
        out = _blend(out, alpha, np.array([0.1, 0.1, 0.1]) if out.mean() > 0.5 else np.array([0.9, 0.9, 0.9]))
    elif kind == "spot":
        c = rng.uniform(lo, hi)
        r = rng.uniform(3.5, 5.5) * strength * min(h, w) / 128 * 2
        alpha = _coverage((h, w), [_ellipse_points(c[0], c[1], r, r * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))])
        shift = np.zeros(3)
        shift[int(rng.integers(3))] = 0.3 * (1 if rng.random() < 0.5 else -1)
        local = (out * alpha[..., None]).sum((0, 1)) / max(alpha.sum(), 1e-9)
        out = _blend(out, alpha, np.clip(local + shift, 0, 1))
    else:
        raise ValueError(f"unknown synthetic defect {kind!r}")
    return np.clip(out, 0, 1).astype(img.dtype), alpha > 0.5
