import json
import os

import numpy as np
import pytest

from deformsplat.checkpoint import load_container
from deformsplat.dataset import (
    DatasetManifest,
    load_dataset,
    load_depth16,
    load_mask,
    load_rgb,
    quantize_depth16,
    quantize_rgb8,
    save_depth16,
    save_mask,
    save_ply,
    save_rgb8,
)
from deformsplat.synthetic import (
    SIDECAR_NAME,
    SyntheticSceneSpec,
    displacement_field,
    generate_synthetic,
    render_frame,
)


def small_spec(**overrides):
    base = dict(width=20, height=16, n_frames=3, seed=7, fx=50.0, fy=50.0,
                occluder_width=5, occluder_height=4, holdout_every=0)
    base.update(overrides)
    return SyntheticSceneSpec(**base)


def test_rgb_roundtrip_exact(tmp_path, rng):
    img = rng.uniform(0, 1, (10, 12, 3))
    path = str(tmp_path / "c.png")
    save_rgb8(path, img)
    loaded = load_rgb(path, dtype=np.float64)
    assert np.array_equal(loaded, quantize_rgb8(img) / 255.0)


def test_depth_roundtrip_and_scale(tmp_path):
    depth = np.array([[1.5, 0.0], [3.0, 0.15]])
    path = str(tmp_path / "d.png")
    save_depth16(path, depth, scale=0.001)
    loaded = load_depth16(path, scale=0.001, dtype=np.float64)
    assert np.allclose(loaded, quantize_depth16(depth, 0.001) * 0.001)
    # raw 1500 with scale 0.001 -> 1.5 world units
    assert loaded[0, 0] == 1.5


def test_mask_roundtrip(tmp_path, rng):
    mask = (rng.uniform(size=(9, 9)) < 0.5).astype(np.uint8)
    path = str(tmp_path / "m.png")
    save_mask(path, mask)
    assert np.array_equal(load_mask(path), mask)


def test_generate_then_load_exact(tmp_path):
    spec = small_spec()
    out = str(tmp_path / "scene")
    manifest = generate_synthetic(spec, out)
    frames, cam, _ = load_dataset(out, dtype=np.float64)
    assert len(frames) == 3
    assert [f.time for f in frames] == [0.0, 0.5, 1.0]
    for i, f in enumerate(frames):
        image, depth, mask = render_frame(spec, i)
        assert np.array_equal(f.image, quantize_rgb8(image) / 255.0)
        assert np.array_equal(
            f.depth, quantize_depth16(depth, spec.depth_scale) * spec.depth_scale
        )
        assert np.array_equal(f.mask, mask)
    assert cam.fx == spec.fx and cam.width == spec.width


def test_two_frame_times():
    spec = small_spec(n_frames=2)
    from conftest import synthetic_frames

    frames, _ = synthetic_frames(spec)
    assert [f.time for f in frames] == [0.0, 1.0]


def test_same_seed_byte_identical_dataset(tmp_path):
    spec = small_spec()
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    generate_synthetic(spec, a)
    generate_synthetic(spec, b)
    for root, _, files in os.walk(a):
        for name in files:
            pa = os.path.join(root, name)
            pb = pa.replace(a, b, 1)
            assert open(pa, "rb").read() == open(pb, "rb").read(), name


def test_missing_depth_file_error_names_frame(tmp_path):
    spec = small_spec()
    out = str(tmp_path / "scene")
    generate_synthetic(spec, out)
    os.remove(os.path.join(out, "frames", "depth_0001.png"))
    with pytest.raises(FileNotFoundError, match="frame 1"):
        load_dataset(out)


def test_resolution_mismatch_error_names_frame(tmp_path):
    spec = small_spec()
    out = str(tmp_path / "scene")
    generate_synthetic(spec, out)
    save_rgb8(
        os.path.join(out, "frames", "color_0002.png"),
        np.zeros((4, 4, 3)),
    )
    with pytest.raises(ValueError, match="frame 2"):
        load_dataset(out)


def test_zero_amplitude_frames_static_outside_occluder(tmp_path):
    spec = small_spec(deform_amplitude_z=0.0, deform_amplitude_uv=0.0)
    img0, dep0, m0 = render_frame(spec, 0)
    img2, dep2, m2 = render_frame(spec, 2)
    free = (m0 == 0) & (m2 == 0)
    assert np.array_equal(img0[free], img2[free])
    assert np.array_equal(dep0[free], dep2[free])


def test_sidecar_exact_amplitude(tmp_path):
    # stationary unit-phase wave: displacement is exactly the amplitude
    spec = small_spec(
        deform_amplitude_z=0.07, deform_freq_u=0.0, deform_freq_v=0.0,
        deform_freq_t=0.0, deform_phase=np.pi / 2,
    )
    out = str(tmp_path / "scene")
    generate_synthetic(spec, out)
    meta, arrays = load_container(os.path.join(out, SIDECAR_NAME))
    assert meta["kind"] == "deformsplat-displacement"
    assert (arrays["depth_displacement"] == 0.07).all()
    dz, lat = displacement_field(spec, 0)
    assert (dz == 0.07).all()


def test_occluder_mask_exact_footprint():
    spec = small_spec(never_rect=(2, 3, 4, 3))
    _, _, mask = render_frame(spec, 1)
    from deformsplat.synthetic import occluder_mask

    assert np.array_equal(mask, occluder_mask(spec, 1))
    assert mask[3:6, 2:6].all()  # never-visible rect present in every frame


def test_holdout_defaults():
    spec = SyntheticSceneSpec(n_frames=20)
    assert spec.holdout_indices() == [4, 12]


def test_manifest_roundtrip(tmp_path):
    spec = small_spec(holdout_every=2, holdout_offset=1)
    out = str(tmp_path / "scene")
    manifest = generate_synthetic(spec, out)
    loaded = DatasetManifest.load(out)
    assert loaded.holdout == manifest.holdout == [1]
    assert loaded.train_indices() == [0, 2]
    assert loaded.depth_scale == spec.depth_scale


def test_ply_dump(tmp_path, rng):
    pts = rng.normal(size=(5, 3))
    cols = rng.uniform(0, 1, (5, 3))
    path = str(tmp_path / "p.ply")
    save_ply(path, pts, cols)
    lines = open(path).read().strip().splitlines()
    assert lines[0] == "ply"
    assert "element vertex 5" in lines[2]
    assert len(lines) == 10 + 5
    first = lines[10].split()
    assert np.allclose([float(v) for v in first[:3]], pts[0], atol=1e-6)


def test_unreadable_image_error(tmp_path):
    spec = small_spec()
    out = str(tmp_path / "scene")
    generate_synthetic(spec, out)
    with open(os.path.join(out, "frames", "color_0000.png"), "wb") as fh:
        fh.write(b"not a png")
    with pytest.raises(ValueError, match="frame 0"):
        load_dataset(out)


def test_manifest_no_frames_error(tmp_path):
    path = str(tmp_path / "manifest.json")
    cam = SyntheticSceneSpec().camera()
    with open(path, "w") as fh:
        json.dump({"camera": cam.to_dict(), "depth_scale": 1e-4, "frames": []}, fh)
    with pytest.raises(ValueError, match="no frames"):
        load_dataset(path)
