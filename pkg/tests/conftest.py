import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from deformsplat.scene import Camera, FrameRecord, GaussianSet


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_frame(image, depth, mask, time=0.0, index=0) -> FrameRecord:
    return FrameRecord(
        image=np.asarray(image, dtype=np.float64),
        depth=np.asarray(depth, dtype=np.float64),
        mask=np.asarray(mask, dtype=np.uint8),
        time=time,
        index=index,
    )


def single_gaussian(
    position=(0.0, 0.0, 2.0),
    scale=0.05,
    color=(0.8, 0.3, 0.2),
    opacity_logit=2.0,
    dtype=np.float64,
) -> GaussianSet:
    return GaussianSet(
        positions=np.array([position], dtype=dtype),
        log_scales=np.log(np.full((1, 3), scale, dtype=dtype)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]], dtype=dtype),
        opacity_logits=np.array([opacity_logit], dtype=dtype),
        colors=np.array([color], dtype=dtype),
    )


def centered_camera(size=32, f=100.0) -> Camera:
    return Camera(
        fx=f, fy=f, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
        width=size, height=size,
    )


def synthetic_frames(spec):
    """Exact in-memory frames for a SyntheticSceneSpec (no disk round trip)."""
    from deformsplat.synthetic import _texture, frame_time, render_frame

    tex = _texture(spec)
    frames = []
    for i in range(spec.n_frames):
        image, depth, mask = render_frame(spec, i, tex)
        frames.append(
            FrameRecord(image=image, depth=depth, mask=mask,
                        time=frame_time(spec, i), index=i)
        )
    return frames, spec.camera()
