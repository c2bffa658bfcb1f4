"""Dataset manifest plus image/depth/mask/point-cloud file formats.

On disk a dataset is a JSON manifest naming per-frame 8-bit RGB images,
16-bit grayscale depth maps (world units = raw value * depth_scale), and
binary masks (white = occluder). Frame order defines the normalized time
t = i / T. The manifest may list held-out frame indices.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .scene import Camera, FrameRecord

MANIFEST_NAME = "manifest.json"


# -- pixel formats -----------------------------------------------------------

def quantize_rgb8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_rgb8(path: str, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else quantize_rgb8(img)
    Image.fromarray(arr, mode="RGB").save(path)


def load_rgb(path: str, dtype=np.float32) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=dtype)
    return arr / dtype(255.0) if np.issubdtype(dtype, np.floating) else arr


def quantize_depth16(depth: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(depth / scale), 0, 65535).astype(np.uint16)


def save_depth16(path: str, depth: np.ndarray, scale: float) -> None:
    arr = depth if depth.dtype == np.uint16 else quantize_depth16(depth, scale)
    Image.fromarray(arr).save(path)


def load_depth16(path: str, scale: float, dtype=np.float32) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise ValueError(f"{path}: unsupported depth pixel type {arr.dtype}")
    return (arr.astype(dtype)) * dtype(scale)


def save_mask(path: str, mask: np.ndarray) -> None:
    Image.fromarray((mask != 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_ply(path: str, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII point cloud with uchar RGB."""
    rgb = quantize_rgb8(colors) if colors.dtype != np.uint8 else colors
    lines = [
        "ply", "format ascii 1.0", f"element vertex {points.shape[0]}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    body = [
        f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g} {c[0]} {c[1]} {c[2]}"
        for p, c in zip(points, rgb)
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines + body) + "\n")


# -- manifest ----------------------------------------------------------------

@dataclass
class FrameEntry:
    image: str
    depth: str
    mask: str


@dataclass
class DatasetManifest:
    root: str
    camera: Camera
    depth_scale: float
    frames: list[FrameEntry]
    holdout: list[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def train_indices(self) -> list[int]:
        held = set(self.holdout)
        return [i for i in range(self.n_frames) if i not in held]

    def to_dict(self) -> dict:
        return {
            "camera": self.camera.to_dict(),
            "depth_scale": float(self.depth_scale),
            "frames": [
                {"image": f.image, "depth": f.depth, "mask": f.mask}
                for f in self.frames
            ],
            "holdout": list(self.holdout),
        }

    def save(self, path: str | None = None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path) as fh:
            d = json.load(fh)
        return cls(
            root=os.path.dirname(os.path.abspath(path)),
            camera=Camera.from_dict(d["camera"]),
            depth_scale=float(d["depth_scale"]),
            frames=[FrameEntry(**e) for e in d["frames"]],
            holdout=[int(i) for i in d.get("holdout", [])],
        )


def load_dataset(
    path: str, dtype=np.float32
) -> tuple[list[FrameRecord], Camera, DatasetManifest]:
    """Decode every frame listed in a manifest.

    Raises with the offending frame index on missing files or resolution
    mismatches. Times are i / T for T + 1 frames (a single frame gets t = 0).
    """
    manifest = DatasetManifest.load(path)
    n = manifest.n_frames
    if n == 0:
        raise ValueError(f"{path}: manifest lists no frames")
    frames: list[FrameRecord] = []
    shape = None
    for i, entry in enumerate(manifest.frames):
        paths = {
            "image": os.path.join(manifest.root, entry.image),
            "depth": os.path.join(manifest.root, entry.depth),
            "mask": os.path.join(manifest.root, entry.mask),
        }
        for kind, p in paths.items():
            if not os.path.exists(p):
                raise FileNotFoundError(f"frame {i}: missing {kind} file {p}")
        try:
            image = load_rgb(paths["image"], dtype=dtype)
            depth = load_depth16(paths["depth"], manifest.depth_scale, dtype=dtype)
            mask = load_mask(paths["mask"])
        except (OSError, ValueError) as exc:
            raise ValueError(f"frame {i}: unreadable image data ({exc})") from exc
        if shape is None:
            shape = image.shape[:2]
        if image.shape[:2] != shape or depth.shape != shape or mask.shape != shape:
            raise ValueError(
                f"frame {i}: resolution mismatch "
                f"(expected {shape}, image {image.shape[:2]}, "
                f"depth {depth.shape}, mask {mask.shape})"
            )
        t = i / (n - 1) if n > 1 else 0.0
        frames.append(FrameRecord(image=image, depth=depth, mask=mask, time=t, index=i))
    return frames, manifest.camera, manifest
