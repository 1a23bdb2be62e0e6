"""Planar geometry: 4-corner parameterization, DLT solving, and image warping.

Conventions
-----------
* Points are ``(x, y)`` with x to the right and y down; integer coordinates
  address pixel centers, so the corners of a ``w x h`` frame are
  ``(0, 0), (w-1, 0), (w-1, h-1), (0, h-1)``.
* Corner order is always top-left, top-right, bottom-right, bottom-left.
* ``warp_image(img, H)`` uses inverse mapping: ``out[p] = img[H^-1 p]``, so
  content located at ``q`` in the input appears at ``H q`` in the output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateCorrespondence, PointAtInfinity

_H33_EPS = 1e-12
_W_EPS = 1e-12
_COND_MAX = 1e12


class HomographyMatrix:
    """A normalized (h33 == 1), invertible 3x3 projective transform."""

    __slots__ = ("_h",)

    def __init__(self, h):
        h = np.array(h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise DegenerateCorrespondence("homography has non-finite entries")
        if abs(h[2, 2]) < _H33_EPS:
            raise DegenerateCorrespondence(f"|h33| = {abs(h[2, 2]):.3g} is too small to normalize")
        h = h / h[2, 2]
        det = np.linalg.det(h)
        if not np.isfinite(det) or abs(det) < 1e-14:
            raise DegenerateCorrespondence("homography is singular")
        h.setflags(write=False)
        self._h = h

    @property
    def h(self) -> np.ndarray:
        return self._h

    def __array__(self, dtype=None, copy=None):
        return self._h.astype(dtype) if dtype is not None else self._h.copy()

    def __matmul__(self, other: "HomographyMatrix") -> "HomographyMatrix":
        return compose(self, other)

    def __eq__(self, other):
        return isinstance(other, HomographyMatrix) and np.array_equal(self._h, other._h)

    def __hash__(self):
        return hash(self._h.tobytes())

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self._h)
        return f"HomographyMatrix([{rows}])"

    def to_list(self) -> list[float]:
        """Row-major list of the 9 entries."""
        return [float(v) for v in self._h.ravel()]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "HomographyMatrix":
        if len(values) != 9:
            raise ValueError(f"expected 9 values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    @classmethod
    def identity(cls) -> "HomographyMatrix":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "HomographyMatrix":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    def is_identity(self, atol: float = 0.0) -> bool:
        return bool(np.allclose(self._h, np.eye(3), rtol=0.0, atol=atol))


@dataclass(frozen=True)
class ImageFrame:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"frame must be at least 8x8, got {self.width}x{self.height}")

    @classmethod
    def of(cls, img: np.ndarray) -> "ImageFrame":
        return cls(int(img.shape[1]), int(img.shape[0]))

    @property
    def corners(self) -> np.ndarray:
        w, h = self.width - 1, self.height - 1
        return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])


class CornerDisplacement:
    """Displacements (dx, dy) of the four frame corners, TL, TR, BR, BL."""

    __slots__ = ("_d",)

    def __init__(self, deltas):
        d = np.array(deltas, dtype=np.float64).reshape(4, 2)
        if not np.all(np.isfinite(d)):
            raise ValueError("corner displacement must be finite")
        d.setflags(write=False)
        self._d = d

    @property
    def deltas(self) -> np.ndarray:
        return self._d

    def __array__(self, dtype=None, copy=None):
        return self._d.astype(dtype) if dtype is not None else self._d.copy()

    def __eq__(self, other):
        return isinstance(other, CornerDisplacement) and np.array_equal(self._d, other._d)

    def __repr__(self):
        return f"CornerDisplacement({self.to_list()})"

    def to_list(self) -> list[float]:
        return [float(v) for v in self._d.ravel()]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "CornerDisplacement":
        if len(values) != 8:
            raise ValueError(f"expected 8 values, got {len(values)}")
        return cls(values)

    @classmethod
    def zeros(cls) -> "CornerDisplacement":
        return cls(np.zeros((4, 2)))

    def norm(self) -> float:
        return float(np.linalg.norm(self._d))

    def check_bounds(self, frame: ImageFrame) -> None:
        limit = max(frame.width, frame.height)
        if np.any(np.abs(self._d) > limit):
            raise ValueError("corner displacement exceeds the image side length")


HomographyLike = Union[HomographyMatrix, np.ndarray]


def _as_h(H: HomographyLike) -> np.ndarray:
    return H.h if isinstance(H, HomographyMatrix) else np.asarray(H, dtype=np.float64).reshape(3, 3)


def _as_points(pts) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64)
    if p.ndim == 1:
        p = p.reshape(1, 2)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"points must have shape (N, 2), got {p.shape}")
    return p


def _check_no_three_collinear(pts: np.ndarray, name: str) -> None:
    scale = max(float(np.ptp(pts, axis=0).max()), 1.0)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[i], pts[j], pts[k]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) <= 1e-9 * scale * scale:
            raise DegenerateCorrespondence(f"{name} points {i}, {j}, {k} are collinear")


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    s = np.sqrt(2.0) / max(np.sqrt(((pts - c) ** 2).sum(axis=1)).mean(), 1e-300)
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_solve(src, dst) -> HomographyMatrix:
    """Exact homography from four point correspondences.

    Solves the 8x8 linear system with h33 fixed to 1, after translating and
    scaling each point set to unit RMS radius for conditioning.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("dlt_solve needs exactly 4 source and 4 destination points")
    _check_no_three_collinear(src, "source")
    _check_no_three_collinear(dst, "destination")

    t_src = _normalizer(src)
    t_dst = _normalizer(dst)
    s = src @ t_src[:2, :2].T + t_src[:2, 2]
    d = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    A = np.zeros((8, 8))
    b = np.zeros(8)
    for k in range(4):
        x, y = s[k]
        u, v = d[k]
        A[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        A[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * k] = u
        b[2 * k + 1] = v
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > _COND_MAX:
        raise DegenerateCorrespondence(f"DLT system is singular (condition number {cond:.3g})")
    h = np.append(np.linalg.solve(A, b), 1.0).reshape(3, 3)
    H = np.linalg.inv(t_dst) @ h @ t_src
    return HomographyMatrix(H)


def apply_homography(H: HomographyLike, pts) -> np.ndarray:
    """Map ``(N, 2)`` points through ``H``; raises ``PointAtInfinity``."""
    p = _as_points(pts)
    h = _as_h(H)
    q = p @ h[:, :2].T + h[:, 2]
    w = q[:, 2]
    if np.any(np.abs(w) <= _W_EPS):
        raise PointAtInfinity("point maps to infinity")
    return q[:, :2] / w[:, None]


def compose(H1: HomographyLike, H2: HomographyLike) -> HomographyMatrix:
    """Transform applying ``H2`` first, then ``H1``."""
    return HomographyMatrix(_as_h(H1) @ _as_h(H2))


def invert(H: HomographyLike) -> HomographyMatrix:
    h = _as_h(H)
    try:
        inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCorrespondence("homography is not invertible") from exc
    return HomographyMatrix(inv)


def displacement_to_homography(d: CornerDisplacement, frame: ImageFrame) -> HomographyMatrix:
    corners = frame.corners
    return dlt_solve(corners, corners + np.asarray(d, dtype=np.float64))


def homography_to_displacement(H: HomographyLike, frame: ImageFrame) -> CornerDisplacement:
    corners = frame.corners
    return CornerDisplacement(apply_homography(H, corners) - corners)


def rotation_matrix(angle: float, frame: ImageFrame) -> HomographyMatrix:
    """Rotation by ``angle`` degrees about the frame center.

    Positive angles follow ``[[cos, -sin], [sin, cos]]`` in pixel coordinates,
    which appears clockwise on screen because y points down.
    """
    return similarity_matrix(angle, 1.0, 0.0, 0.0, frame)


def similarity_matrix(angle: float, scale: float, tx: float, ty: float, frame: ImageFrame) -> HomographyMatrix:
    """``translation @ rotation_about_center @ isotropic_scale_about_center``."""
    cx, cy = frame.center
    t = np.deg2rad(angle)
    c, s = np.cos(t), np.sin(t)
    a = scale * np.array([[c, -s], [s, c]])
    h = np.eye(3)
    h[:2, :2] = a
    h[:2, 2] = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.array([tx, ty])
    return HomographyMatrix(h)


def rotation_to_displacement(angle: float, frame: ImageFrame) -> CornerDisplacement:
    if not -180.0 < angle <= 180.0:
        raise ValueError(f"angle must lie in (-180, 180], got {angle}")
    corners = frame.corners
    c = frame.center
    t = np.deg2rad(angle)
    r = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    rotated = (corners - c) @ r.T + c
    return CornerDisplacement(rotated - corners)


def displacement_to_rotation(d: CornerDisplacement, frame: ImageFrame) -> float:
    """Least-squares rotation angle (degrees, about the center) explaining ``d``."""
    c = frame.center
    src = frame.corners - c
    dst = frame.corners + np.asarray(d) - c
    dst = dst - dst.mean(axis=0)
    num = np.sum(src[:, 0] * dst[:, 1] - src[:, 1] * dst[:, 0])
    den = np.sum(src[:, 0] * dst[:, 0] + src[:, 1] * dst[:, 1])
    return float(np.rad2deg(np.arctan2(num, den)))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror integer indices into ``[0, n)`` without repeating the edge."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _backproject(h_inv: np.ndarray, width: int, height: int):
    ys, xs = np.mgrid[0:height, 0:width]
    xs = xs.astype(np.float64)
    ys = ys.astype(np.float64)
    u = h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]
    v = h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]
    w = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    at_inf = np.abs(w) <= _W_EPS
    w_safe = np.where(at_inf, 1.0, w)
    return u / w_safe, v / w_safe, at_inf


def warp_image(
    img: np.ndarray,
    H: HomographyLike,
    fill: str = "reflection",
    cval: float = 0.0,
    interpolation: str = "bilinear",
    out_shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Warp ``img`` (H x W or H x W x C) by ``H`` with inverse mapping.

    ``fill`` is ``"reflection"`` or ``"constant"``. Pixels whose
    back-projection is at infinity receive ``cval`` in either mode. Integer
    inputs are rounded and clipped back to their dtype.
    """
    if img.size == 0:
        raise ValueError("cannot warp an empty image")
    if fill not in ("reflection", "constant"):
        raise ValueError(f"unknown fill mode {fill!r}")
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    h_inv = invert(H).h
    src_h, src_w = img.shape[:2]
    out_h, out_w = out_shape if out_shape is not None else (src_h, src_w)
    squeeze = img.ndim == 2
    data = img[..., None] if squeeze else img
    data = data.astype(np.float64)

    x, y, at_inf = _backproject(h_inv, out_w, out_h)

    def gather(ix, iy):
        if fill == "reflection":
            return data[reflect_index(iy, src_h), reflect_index(ix, src_w)]
        inside = (ix >= 0) & (ix < src_w) & (iy >= 0) & (iy < src_h)
        vals = data[np.clip(iy, 0, src_h - 1), np.clip(ix, 0, src_w - 1)]
        return np.where(inside[..., None], vals, cval)

    if interpolation == "nearest":
        out = gather(np.floor(x + 0.5).astype(np.int64), np.floor(y + 0.5).astype(np.int64))
    else:
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = (x - x0)[..., None]
        fy = (y - y0)[..., None]
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        out = (
            gather(x0, y0) * ((1.0 - fx) * (1.0 - fy))
            + gather(x0 + 1, y0) * (fx * (1.0 - fy))
            + gather(x0, y0 + 1) * ((1.0 - fx) * fy)
            + gather(x0 + 1, y0 + 1) * (fx * fy)
        )
    if at_inf.any():
        out[at_inf] = cval

    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    out = out.astype(img.dtype)
    return out[..., 0] if squeeze else out


def perturbed_view(img: np.ndarray, d: CornerDisplacement, fill: str = "reflection") -> np.ndarray:
    """Resample the quad ``corners + d`` of ``img`` onto the full frame.

    With an inward displacement the quad lies inside the image, so no fill is
    needed except for sub-pixel bilinear taps at the border.
    """
    frame = ImageFrame.of(img)
    H = displacement_to_homography(d, frame)
    return warp_image(img, invert(H), fill=fill)

