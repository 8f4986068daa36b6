"""Rigid and affine point transforms about a centre of rotation.

Both map a point ``x`` (mm) to ``L (x - center) + center + translation``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InvalidArgument


def _vec3(v):
    a = np.array(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("transform components must be finite")
    a.flags.writeable = False
    return a


class _PointTransform:
    def apply(self, pts):
        """Map points given as (3, ...) array."""
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(3, -1)
        # offset form keeps the identity exact for any center
        offset = self.center + self.translation - self.matrix @ self.center
        out = self.matrix @ flat + offset[:, None]
        return out.reshape(pts.shape)

    def apply_rows(self, pts):
        """Map points given as (n, 3) rows."""
        return self.apply(np.asarray(pts, dtype=np.float64).T).T

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.center + self.translation - self.matrix @ self.center
        return h

    def to_affine(self) -> AffineTransform:
        return AffineTransform(self.matrix, self.translation, self.center)

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "matrix": self.matrix.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "center": self.center.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RigidTransform(_PointTransform):
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    kind = "rigid"

    def __post_init__(self):
        q = np.array(self.quaternion, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise InvalidArgument("quaternion must be finite and nonzero")
        q = q / n
        if q[3] < 0:
            q = -q
        q.flags.writeable = False
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", _vec3(self.translation))
        object.__setattr__(self, "center", _vec3(self.center))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0, 0, 0), center=(0, 0, 0)):
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat(), translation, center)

    @classmethod
    def from_matrix(cls, matrix, translation=(0, 0, 0), center=(0, 0, 0)):
        return cls(Rotation.from_matrix(np.asarray(matrix, dtype=float)).as_quat(), translation, center)

    @property
    def matrix(self) -> np.ndarray:
        # scalar-last (x, y, z, w) quaternion, as scipy
        return Rotation.from_quat(self.quaternion).as_matrix()

    @property
    def rotvec(self) -> np.ndarray:
        return Rotation.from_quat(self.quaternion).as_rotvec()

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.rotvec))

    def inverse(self) -> RigidTransform:
        # x = R (y - c) + c + t  =>  y = R^T (x - c - t) + c
        rinv = self.matrix.T
        return RigidTransform.from_matrix(rinv, -(rinv @ self.translation), self.center)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self`` applied after ``other``."""
        h = self.homogeneous() @ other.homogeneous()
        c = other.center
        return RigidTransform.from_matrix(h[:3, :3], h[:3, :3] @ c + h[:3, 3] - c, c)


@dataclass(frozen=True, eq=False)
class AffineTransform(_PointTransform):
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    kind = "affine"

    def __post_init__(self):
        lin = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(lin)):
            raise InvalidArgument("affine matrix must be finite")
        if np.linalg.det(lin) <= 0:
            raise InvalidArgument("affine matrix must have positive determinant")
        lin.flags.writeable = False
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", _vec3(self.translation))
        object.__setattr__(self, "center", _vec3(self.center))

    @property
    def matrix(self) -> np.ndarray:
        return self.linear

    def inverse(self) -> AffineTransform:
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -(inv @ self.translation), self.center)

    def recentered(self, center) -> AffineTransform:
        """Same point map expressed about another centre."""
        center = np.asarray(center, dtype=np.float64)
        t = self.linear @ (center - self.center) + self.center + self.translation - center
        return AffineTransform(self.linear, t, center)

    def compose(self, other) -> AffineTransform:
        """``self`` applied after ``other``."""
        h = self.homogeneous() @ other.homogeneous()
        c = other.center
        return AffineTransform(h[:3, :3], h[:3, :3] @ c + h[:3, 3] - c, c)


def identity_affine(center=(0, 0, 0)) -> AffineTransform:
    return AffineTransform(np.eye(3), np.zeros(3), center)


def transform_from_dict(d: dict):
    kind = d.get("type")
    matrix = np.asarray(d["matrix"], dtype=float).reshape(3, 3)
    if kind == "rigid":
        return RigidTransform.from_matrix(matrix, d["translation"], d["center"])
    if kind == "affine":
        return AffineTransform(matrix, d["translation"], d["center"])
    raise InvalidArgument(f"unknown transform type {kind!r}")
