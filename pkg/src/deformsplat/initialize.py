"""Seeding the canonical Gaussian cloud from depth maps and occluder masks.

Frame 0 is refined by harvesting pixels that are occluded early but become
visible in a later frame; the remaining always-occluded region is the
intersection mask. Refined tissue pixels with valid depth are backprojected
through the camera to a colored point cloud, which seeds positions and colors;
scales come from local point spacing, rotations start at identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import Camera, FrameRecord, GaussianSet, inverse_sigmoid

DEFAULT_SEED_OPACITY = 0.1


@dataclass
class RefinedFrame:
    """Refined first-frame buffers.

    mask is the intersection of all frame masks: 1 marks pixels occluded in
    every frame. Where the refined mask is 0 but frame 0 was occluded, image
    and depth hold values copied from the earliest frame that sees the pixel.
    """

    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    mask: np.ndarray   # (H, W) uint8


@dataclass
class SeededCloud:
    """Backprojected tissue pixels with their colors and source coordinates."""

    points: np.ndarray  # (P, 3) world
    colors: np.ndarray  # (P, 3)
    pixels: np.ndarray  # (P, 2) source (u, v) = (col, row)


def build_refined_frame(frames: list[FrameRecord]) -> RefinedFrame:
    """Fill occluded frame-0 pixels from the first frame where they are tissue."""
    if not frames:
        raise ValueError("need at least one frame")
    h, w = frames[0].mask.shape
    for f in frames:
        if f.mask.shape != (h, w):
            raise ValueError("frames have mismatched resolutions")

    image = frames[0].image.copy()
    depth = frames[0].depth.copy()
    mask = frames[0].mask.astype(np.uint8).copy()
    for f in frames[1:]:
        newly = (mask != 0) & (f.mask == 0)
        if newly.any():
            image[newly] = f.image[newly]
            depth[newly] = f.depth[newly]
            mask[newly] = 0
    return RefinedFrame(image=image, depth=depth, mask=mask)


def backproject(rf: RefinedFrame, cam: Camera) -> SeededCloud:
    """Unproject tissue pixels with valid depth to world space.

    Pixel (row v, col u) with depth d maps to camera space
    ((u - cx) d / fx, (v - cy) d / fy, d), then through the inverse extrinsics.
    """
    usable = (rf.mask == 0) & (rf.depth > 0)
    if not usable.any():
        raise ValueError("empty initialization: every pixel is masked or depthless")
    vv, uu = np.nonzero(usable)
    d = rf.depth[vv, uu].astype(np.float64)
    x = (uu - cam.cx) * d / cam.fx
    y = (vv - cam.cy) * d / cam.fy
    pts_cam = np.stack([x, y, d], axis=1)
    points = cam.camera_to_world(pts_cam)
    return SeededCloud(
        points=points,
        colors=rf.image[vv, uu].astype(np.float64),
        pixels=np.stack([uu, vv], axis=1),
    )


def median_neighbor_spacing(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return 1.0
    dist, _ = cKDTree(points).query(points, k=2)
    return float(np.median(dist[:, 1]))


def voxel_downsample(
    points: np.ndarray, colors: np.ndarray, voxel: float
) -> tuple[np.ndarray, np.ndarray]:
    """Average points/colors per voxel cell; deterministic ordering."""
    cells = np.floor((points - points.min(axis=0)) / voxel).astype(np.int64)
    _, inverse, counts = np.unique(
        cells, axis=0, return_inverse=True, return_counts=True
    )
    n_cells = counts.shape[0]
    pts = np.zeros((n_cells, 3))
    cols = np.zeros((n_cells, 3))
    np.add.at(pts, inverse, points)
    np.add.at(cols, inverse, colors)
    return pts / counts[:, None], cols / counts[:, None]


def seed_gaussians(
    cloud: SeededCloud,
    voxel_size: float | None = None,
    voxel_scale: float = 1.0,
    opacity: float = DEFAULT_SEED_OPACITY,
    scale_neighbor: int = 3,
    dtype=np.float32,
) -> GaussianSet:
    """Canonical GaussianSet from a seeded cloud.

    Optionally voxel-downsamples (voxel defaults to the median nearest-neighbor
    spacing times voxel_scale); per-Gaussian isotropic scale is the distance to
    the `scale_neighbor`-th nearest neighbor; rotations identity, opacity flat.
    """
    if cloud.points.shape[0] < 1:
        raise ValueError("empty initialization: no points to seed from")
    points, colors = cloud.points, cloud.colors
    if voxel_size is None:
        voxel_size = median_neighbor_spacing(points) * voxel_scale
    if voxel_size > 0 and points.shape[0] > 1:
        points, colors = voxel_downsample(points, colors, voxel_size)

    n = points.shape[0]
    if n > scale_neighbor:
        dist, _ = cKDTree(points).query(points, k=scale_neighbor + 1)
        scale = np.maximum(dist[:, scale_neighbor], 1e-12)
    else:
        scale = np.full(n, max(voxel_size, 1e-12))

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(
        positions=points.astype(dtype),
        log_scales=np.log(np.repeat(scale[:, None], 3, axis=1)).astype(dtype),
        rotations=rot.astype(dtype),
        opacity_logits=np.full(n, inverse_sigmoid(opacity), dtype=dtype),
        colors=np.clip(colors, 0.0, 1.0).astype(dtype),
    )
