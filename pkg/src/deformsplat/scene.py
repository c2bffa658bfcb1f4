"""Core scene data types: Gaussian cloud, camera, video frames, render buffers.

All heavy math lives elsewhere; this module owns the containers, their
invariants, and validation helpers that report violations instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

QUAT_NORM_TOL = 1e-6
ROT_ORTHO_TOL = 1e-6


def sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable on both tails
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: float | np.ndarray) -> float | np.ndarray:
    return np.log(y) - np.log1p(-y)


@dataclass
class GaussianSet:
    """Canonical-space Gaussian cloud.

    positions      (N, 3) world-space centers
    log_scales     (N, 3) per-axis scale is exp(log_scales)
    rotations      (N, 4) unit quaternions, (w, x, y, z), Hamilton convention
    opacity_logits (N,)   opacity is sigmoid(opacity_logits)
    colors         (N, 3) RGB in [0, 1]
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
        )

    def astype(self, dtype) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            rotations=self.rotations.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            colors=self.colors.astype(dtype),
        )

    def renormalize_rotations(self) -> None:
        """Project stored quaternions back to unit norm (post-optimizer-step)."""
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, norms, out=self.rotations)


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, extrinsics world->camera (4x4)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: np.ndarray = field(
        default_factory=lambda: np.eye(4, dtype=np.float64)
    )

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "extrinsics": np.asarray(self.extrinsics, dtype=np.float64)
            .reshape(-1)
            .tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            extrinsics=np.asarray(d["extrinsics"], dtype=np.float64).reshape(4, 4),
        )


@dataclass
class FrameRecord:
    """One timestep of the input video.

    image (H, W, 3) RGB in [0, 1]; depth (H, W) world units with 0 = invalid;
    mask (H, W) with 1 = occluder (tool) pixel; time normalized to [0, 1].
    """

    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    time: float
    index: int = 0


@dataclass
class RenderOutput:
    """Composited buffers plus the intermediates needed by the backward pass."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W) accumulated weight in [0, 1]
    backward_cache: Any = None


def validate_gaussian_set(gset: GaussianSet) -> list[str]:
    """Check every GaussianSet invariant; returns one message per violation.

    Never raises: validation is diagnostic, the caller decides what is fatal.
    """
    violations: list[str] = []
    n = gset.positions.shape[0] if gset.positions.ndim == 2 else -1
    fields = {
        "positions": (gset.positions, (3,)),
        "log_scales": (gset.log_scales, (3,)),
        "rotations": (gset.rotations, (4,)),
        "opacity_logits": (gset.opacity_logits, ()),
        "colors": (gset.colors, (3,)),
    }
    for name, (arr, trailing) in fields.items():
        want = (n,) + trailing
        if arr.shape != want:
            violations.append(
                f"{name} has shape {arr.shape}, expected {want} "
                f"(length mismatch with positions)"
            )
    if violations:
        return violations
    if n < 1:
        violations.append("empty set: N must be >= 1")
        return violations

    norms = np.linalg.norm(gset.rotations, axis=1)
    for i in np.nonzero(np.abs(norms - 1.0) > QUAT_NORM_TOL)[0]:
        violations.append(f"non-unit quaternion at {i} (norm {norms[i]:.6g})")
    bad_scale = ~np.isfinite(gset.log_scales).all(axis=1)
    for i in np.nonzero(bad_scale)[0]:
        violations.append(f"non-finite log-scale at {i}")
    bad_logit = ~np.isfinite(gset.opacity_logits)
    for i in np.nonzero(bad_logit)[0]:
        violations.append(f"non-finite opacity logit at {i}")
    bad_pos = ~np.isfinite(gset.positions).all(axis=1)
    for i in np.nonzero(bad_pos)[0]:
        violations.append(f"non-finite position at {i}")
    bad_color = (
        ~np.isfinite(gset.colors).all(axis=1)
        | (gset.colors < 0.0).any(axis=1)
        | (gset.colors > 1.0).any(axis=1)
    )
    for i in np.nonzero(bad_color)[0]:
        violations.append(f"color outside [0, 1] at {i}")
    return violations


def validate_camera(cam: Camera) -> list[str]:
    violations: list[str] = []
    if cam.fx <= 0 or cam.fy <= 0:
        violations.append(f"focal lengths must be positive (fx={cam.fx}, fy={cam.fy})")
    if not (0 < cam.cx < cam.width):
        violations.append(f"cx={cam.cx} outside (0, {cam.width})")
    if not (0 < cam.cy < cam.height):
        violations.append(f"cy={cam.cy} outside (0, {cam.height})")
    ext = np.asarray(cam.extrinsics)
    if ext.shape != (4, 4):
        violations.append(f"extrinsics shape {ext.shape}, expected (4, 4)")
        return violations
    r = ext[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > ROT_ORTHO_TOL:
        violations.append("extrinsics rotation block is not orthonormal")
    elif np.linalg.det(r) < 0:
        violations.append("extrinsics rotation block has negative determinant")
    if np.abs(ext[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 0:
        violations.append("extrinsics bottom row must be (0, 0, 0, 1)")
    return violations


def validate_frame(frame: FrameRecord) -> list[str]:
    violations: list[str] = []
    img, dep, msk = frame.image, frame.depth, frame.mask
    if img.ndim != 3 or img.shape[2] != 3:
        violations.append(f"image shape {img.shape}, expected (H, W, 3)")
        return violations
    h, w = img.shape[:2]
    if dep.shape != (h, w):
        violations.append(f"depth shape {dep.shape} does not match image {(h, w)}")
    if msk.shape != (h, w):
        violations.append(f"mask shape {msk.shape} does not match image {(h, w)}")
    if violations:
        return violations
    if not (0.0 <= frame.time <= 1.0):
        violations.append(f"time {frame.time} outside [0, 1]")
    if img.min() < 0.0 or img.max() > 1.0:
        violations.append("image values outside [0, 1]")
    if (dep < 0.0).any():
        violations.append("negative depth values (use 0 for invalid)")
    vals = np.unique(msk)
    if not np.isin(vals, (0, 1)).all():
        violations.append("mask is not binary (expected 0/1)")
    return violations
