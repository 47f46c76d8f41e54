"""Rigid-transform algebra, 6D rotation encoding, and point-set alignment.

Reference numerics for the motion codec: everything here is numpy float64.
Composition follows standard function notation, ``compose(T1, T2)(x) =
T1(T2(x))``; relative palm motions are therefore body-frame quantities
(``a_prev ∘ a_cur^{-1}`` for world->template alignments ``a``), which keeps
them invariant to a global rigid transform of the scene.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguousRotation, DegenerateInput, ShapeMismatch

_EPS = 1e-9


def rot6d_to_matrix(v6: np.ndarray) -> np.ndarray:
    """Decode a 6D rotation (first two matrix columns) via Gram-Schmidt.

    Accepts a trailing dimension of 6 with arbitrary batch shape and returns
    matching (..., 3, 3) rotation matrices with det +1.
    """
    v6 = np.asarray(v6, dtype=np.float64)
    if v6.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dim 6, got {v6.shape}")
    a1, a2 = v6[..., :3], v6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS):
        raise DegenerateInput("first 6D column has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS):
        raise DegenerateInput("6D columns are parallel or second column is near-zero")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(matrix: np.ndarray) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as their first two columns (..., 6)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {matrix.shape}")
    return np.concatenate([matrix[..., :, 0], matrix[..., :, 1]], axis=-1)


def rotation_about_axis(axis: np.ndarray, angle: np.ndarray | float) -> np.ndarray:
    """Rodrigues rotation matrices for unit axes (..., 3) and angles (...)."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(n < _EPS):
        raise DegenerateInput("rotation axis has near-zero norm")
    x, y, z = np.moveaxis(axis / n, -1, 0)
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + s * k + (1.0 - c) * (k @ k)


def rotation_angle(matrix: np.ndarray) -> np.ndarray:
    """Rotation angle(s) in [0, pi] of matrices (..., 3, 3)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    tr = np.trace(matrix, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def axis_angle_of(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis (unit 3-vector) and angle of a single rotation matrix.

    Raises AmbiguousRotation if the angle is within 1e-6 of pi, where the
    axis sign is undefined.
    """
    angle = float(rotation_angle(matrix))
    if abs(angle - np.pi) < 1e-6:
        raise AmbiguousRotation("rotation angle at pi; axis is ill-defined")
    if angle < 1e-12:
        return np.array([0.0, 0.0, 1.0]), 0.0
    w = np.array(
        [
            matrix[2, 1] - matrix[1, 2],
            matrix[0, 2] - matrix[2, 0],
            matrix[1, 0] - matrix[0, 1],
        ]
    )
    return w / (2.0 * np.sin(angle)), angle


@dataclass(frozen=True)
class RigidTransform:
    """A rotation + translation acting on 3D points (millimeters)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ShapeMismatch("RigidTransform expects a 3x3 rotation and a 3-vector")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points with trailing dimension 3."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def as_vector9(self) -> np.ndarray:
        """Flatten as [6D rotation | translation]."""
        return np.concatenate([matrix_to_rot6d(self.rotation), self.translation])

    @classmethod
    def from_vector9(cls, vec: np.ndarray) -> "RigidTransform":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (9,):
            raise ShapeMismatch(f"expected 9-vector, got {vec.shape}")
        return cls(rot6d_to_matrix(vec[:6]), vec[6:])


def compose(first: RigidTransform, second: RigidTransform) -> RigidTransform:
    """Functional alias for ``first.compose(second)``."""
    return first.compose(second)


def invert(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


def umeyama_align(points: np.ndarray, template: np.ndarray) -> RigidTransform:
    """Least-squares rigid alignment mapping ``points`` onto ``template``.

    Rotation-plus-translation only (no similarity scale); scale normalization
    is handled separately by palm-bone statistics. Requires K >= 3
    non-collinear correspondences; raises DegenerateInput when the centered
    covariance has rank < 2.
    """
    points = np.asarray(points, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    if points.shape != template.shape or points.ndim != 2 or points.shape[1] != 3:
        raise ShapeMismatch(f"expected matching K x 3 arrays, got {points.shape} vs {template.shape}")
    if points.shape[0] < 3:
        raise DegenerateInput("need at least 3 points for rigid alignment")

    mu_p = points.mean(axis=0)
    mu_t = template.mean(axis=0)
    cov = (points - mu_p).T @ (template - mu_t)
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= max(s[0], 1.0) * 1e-12 + 1e-12:
        raise DegenerateInput("points are collinear or coincident (covariance rank < 2)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, mu_t - rot @ mu_p)


def geodesic_interpolate(transform: RigidTransform, fraction: float) -> RigidTransform:
    """Interpolate toward ``transform``: linear translation, axis-angle-scaled rotation.

    fraction 0 -> identity, 1 -> transform. Raises AmbiguousRotation at
    rotation angle pi (ill-defined axis).
    """
    axis, angle = axis_angle_of(transform.rotation)
    if angle == 0.0:
        rot = np.eye(3)
    else:
        rot = rotation_about_axis(axis, fraction * angle)
    return RigidTransform(rot, fraction * transform.translation)
