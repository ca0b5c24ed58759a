"""Pinhole depth lifting and least-squares rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

Bbox = tuple[float, float, float, float]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @staticmethod
    def from_json(obj: dict) -> "Intrinsics":
        return Intrinsics(float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]))


def default_intrinsics(width: float, height: float) -> Intrinsics:
    """Pseudo-depth has no calibration; any fixed pinhole gives a consistent 3D space."""
    f = float(max(width, height))
    return Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)


def validate_bbox(bbox: Bbox) -> None:
    x1, y1, x2, y2 = bbox
    if not (x1 < x2 and y1 < y2):
        raise ValidationError(f"degenerate bbox {bbox}: requires x1 < x2 and y1 < y2")


def lift_centroid(bbox: Bbox, depth: float, intrinsics: Intrinsics) -> np.ndarray:
    """Back-project the bbox center at the given depth to a 3D camera-frame point."""
    validate_bbox(bbox)
    if depth <= 0:
        raise ValidationError(f"depth must be positive, got {depth}")
    u = (bbox[0] + bbox[2]) / 2.0
    v = (bbox[1] + bbox[3]) / 2.0
    x = (u - intrinsics.cx) * depth / intrinsics.fx
    y = (v - intrinsics.cy) * depth / intrinsics.fy
    return np.array([x, y, depth], dtype=np.float64)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) as R @ p + t."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def allclose(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            np.linalg.norm(self.rotation - other.rotation) <= tol
            and np.linalg.norm(self.translation - other.translation) <= tol
        )


def estimate_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid fit R @ src + t ~= dst (Kabsch, reflection-corrected).

    Falls back to the identity when fewer than 3 correspondences are given or
    the centered source points are rank-deficient (alignment underdetermined).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValidationError(f"point lists differ in length: {src.shape[0]} vs {dst.shape[0]}")
    if src.shape[0] < 3:
        return RigidTransform.identity()

    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    a = src - c_src
    b = dst - c_dst
    if np.linalg.matrix_rank(a) < 2:
        return RigidTransform.identity()

    h = a.T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = c_dst - rot @ c_src
    return RigidTransform(rot, trans)
