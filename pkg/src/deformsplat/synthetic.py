"""Synthetic deforming-scene generator with exact per-pixel ground truth.

The surface is a depth graph over pixel rays: depth(u, v, t) is an analytic
function, and color samples a procedural texture at analytically displaced
material coordinates, so image and depth are exact without any renderer in
the loop. A rectangular occluder sweeps across the image (plus an optional
static never-visible patch); occluded pixels get the tool color and invalid
(zero) depth. A sidecar container stores the exact displacement fields.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import save_container
from .dataset import (
    DatasetManifest,
    FrameEntry,
    quantize_depth16,
    quantize_rgb8,
    save_depth16,
    save_mask,
    save_rgb8,
)
from .scene import Camera

SIDECAR_NAME = "displacement.bin"


@dataclass
class SyntheticSceneSpec:
    width: int = 128
    height: int = 128
    n_frames: int = 20
    seed: int = 0

    surface: str = "plane"       # "plane" | "cylinder"
    base_depth: float = 2.0
    plane_tilt_u: float = 0.0    # depth slope across the image, world units
    plane_tilt_v: float = 0.0
    cylinder_sag: float = 0.3    # edge-to-center depth bow for "cylinder"

    texture: str = "noise"       # "noise" | "checker"
    checker_cells: int = 8
    noise_components: int = 8
    noise_max_freq: float = 3.0
    noise_contrast: float = 0.35

    deform_amplitude_z: float = 0.05   # depth displacement, world units
    deform_amplitude_uv: float = 0.01  # lateral material shift, texture units
    deform_freq_u: float = 1.0
    deform_freq_v: float = 1.0
    deform_freq_t: float = 1.0
    deform_phase: float = 0.0

    occluder_width: int = 28
    occluder_height: int = 20
    occluder_start: tuple[float, float] = (0.18, 0.5)  # center, fraction of W/H
    occluder_end: tuple[float, float] = (0.82, 0.5)
    occluder_color: tuple[float, float, float] = (0.35, 0.33, 0.38)
    never_rect: tuple[int, int, int, int] | None = None  # x, y, w, h in pixels

    fx: float = 160.0
    fy: float = 160.0
    depth_scale: float = 1e-4
    holdout_every: int = 8
    holdout_offset: int = 4

    def camera(self) -> Camera:
        return Camera(
            fx=self.fx, fy=self.fy,
            cx=(self.width - 1) / 2.0, cy=(self.height - 1) / 2.0,
            width=self.width, height=self.height,
        )

    def holdout_indices(self) -> list[int]:
        if self.holdout_every <= 0:
            return []
        return [
            i for i in range(self.n_frames)
            if i % self.holdout_every == self.holdout_offset
        ]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("occluder_start", "occluder_end", "occluder_color", "never_rect"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class _NoiseTexture:
    """Seeded sum of random sinusoids, one set per channel, range-bounded."""

    def __init__(self, spec: SyntheticSceneSpec):
        rng = np.random.default_rng(spec.seed)
        k = spec.noise_components
        self.freq = rng.uniform(0.5, spec.noise_max_freq, size=(3, k, 2))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, k))
        amp = rng.uniform(0.4, 1.0, size=(3, k)) / (
            1.0 + np.linalg.norm(self.freq, axis=2)
        )
        self.amp = amp / amp.sum(axis=1, keepdims=True) * spec.noise_contrast

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.empty(a.shape + (3,), dtype=np.float64)
        for c in range(3):
            ang = (
                2.0 * np.pi
                * (self.freq[c, :, 0] * a[..., None] + self.freq[c, :, 1] * b[..., None])
                + self.phase[c]
            )
            out[..., c] = 0.5 + (self.amp[c] * np.sin(ang)).sum(axis=-1)
        return out


class _CheckerTexture:
    def __init__(self, spec: SyntheticSceneSpec):
        rng = np.random.default_rng(spec.seed)
        self.cells = spec.checker_cells
        self.colors = rng.uniform(0.2, 0.9, size=(2, 3))

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        parity = (
            np.floor(a * self.cells).astype(np.int64)
            + np.floor(b * self.cells).astype(np.int64)
        ) % 2
        return self.colors[parity]


def _texture(spec: SyntheticSceneSpec):
    if spec.texture == "noise":
        return _NoiseTexture(spec)
    if spec.texture == "checker":
        return _CheckerTexture(spec)
    raise ValueError(f"unknown texture program '{spec.texture}'")


def _base_depth(spec: SyntheticSceneSpec, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    un = uu / max(spec.width - 1, 1)
    vn = vv / max(spec.height - 1, 1)
    if spec.surface == "plane":
        return (
            spec.base_depth
            + spec.plane_tilt_u * (un - 0.5)
            + spec.plane_tilt_v * (vn - 0.5)
        )
    if spec.surface == "cylinder":
        return spec.base_depth + spec.cylinder_sag * (2.0 * (un - 0.5)) ** 2
    raise ValueError(f"unknown surface '{spec.surface}'")


def frame_time(spec: SyntheticSceneSpec, i: int) -> float:
    return i / (spec.n_frames - 1) if spec.n_frames > 1 else 0.0


def displacement_field(
    spec: SyntheticSceneSpec, i: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (depth displacement, lateral material shift) grids for frame i."""
    uu, vv = np.meshgrid(
        np.arange(spec.width, dtype=np.float64),
        np.arange(spec.height, dtype=np.float64),
        indexing="xy",
    )
    un = uu / max(spec.width - 1, 1)
    vn = vv / max(spec.height - 1, 1)
    t = frame_time(spec, i)
    wave = np.sin(
        2.0 * np.pi
        * (spec.deform_freq_u * un + spec.deform_freq_v * vn + spec.deform_freq_t * t)
        + spec.deform_phase
    )
    dz = spec.deform_amplitude_z * wave
    lateral = np.stack(
        [spec.deform_amplitude_uv * wave, 0.6 * spec.deform_amplitude_uv * wave],
        axis=-1,
    )
    return dz, lateral


def occluder_mask(spec: SyntheticSceneSpec, i: int) -> np.ndarray:
    t = frame_time(spec, i)
    cx = (
        spec.occluder_start[0] + t * (spec.occluder_end[0] - spec.occluder_start[0])
    ) * spec.width
    cy = (
        spec.occluder_start[1] + t * (spec.occluder_end[1] - spec.occluder_start[1])
    ) * spec.height
    uu, vv = np.meshgrid(
        np.arange(spec.width), np.arange(spec.height), indexing="xy"
    )
    mask = (np.abs(uu - cx) <= spec.occluder_width / 2.0) & (
        np.abs(vv - cy) <= spec.occluder_height / 2.0
    )
    if spec.never_rect is not None:
        x, y, w, h = spec.never_rect
        mask |= (uu >= x) & (uu < x + w) & (vv >= y) & (vv < y + h)
    return mask.astype(np.uint8)


def render_frame(
    spec: SyntheticSceneSpec, i: int, texture=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact (image, depth, mask) for frame i, before disk quantization."""
    texture = texture or _texture(spec)
    uu, vv = np.meshgrid(
        np.arange(spec.width, dtype=np.float64),
        np.arange(spec.height, dtype=np.float64),
        indexing="xy",
    )
    un = uu / max(spec.width - 1, 1)
    vn = vv / max(spec.height - 1, 1)
    dz, lateral = displacement_field(spec, i)
    depth = _base_depth(spec, uu, vv) + dz
    image = np.clip(texture(un - lateral[..., 0], vn - lateral[..., 1]), 0.0, 1.0)
    mask = occluder_mask(spec, i)
    occluded = mask != 0
    image[occluded] = np.asarray(spec.occluder_color)
    depth[occluded] = 0.0
    return image, depth, mask


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str) -> DatasetManifest:
    """Write a full dataset tree plus the exact-displacement sidecar.

    Images are quantized to 8-bit and depth to 16-bit at write time; the
    sidecar keeps float64 displacement grids. Same spec (same seed) produces
    byte-identical output.
    """
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    texture = _texture(spec)
    entries = []
    dz_all = np.empty((spec.n_frames, spec.height, spec.width), dtype=np.float64)
    lat_all = np.empty((spec.n_frames, spec.height, spec.width, 2), dtype=np.float64)
    for i in range(spec.n_frames):
        image, depth, mask = render_frame(spec, i, texture)
        dz_all[i], lat_all[i] = displacement_field(spec, i)
        names = FrameEntry(
            image=f"frames/color_{i:04d}.png",
            depth=f"frames/depth_{i:04d}.png",
            mask=f"frames/mask_{i:04d}.png",
        )
        save_rgb8(os.path.join(out_dir, names.image), quantize_rgb8(image))
        save_depth16(
            os.path.join(out_dir, names.depth),
            quantize_depth16(depth, spec.depth_scale),
            spec.depth_scale,
        )
        save_mask(os.path.join(out_dir, names.mask), mask)
        entries.append(names)

    save_container(
        os.path.join(out_dir, SIDECAR_NAME),
        {"kind": "deformsplat-displacement", "spec": spec.to_dict()},
        {"depth_displacement": dz_all, "lateral_displacement": lat_all},
    )
    manifest = DatasetManifest(
        root=out_dir,
        camera=spec.camera(),
        depth_scale=spec.depth_scale,
        frames=entries,
        holdout=spec.holdout_indices(),
    )
    manifest.save()
    return manifest
