import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from mvp.camera import (BehindCamera, Camera, load_scene, make_posed_image, plucker_map,
                        project_point, save_scene, splat_blobs, split_posed_image, synth_scene)
from mvp.tensor import DimensionError


def cam_identity(origin=(0.0, 0.0, 0.0), W=8, H=8, f=10.0):
    return Camera(np.eye(3), np.array(origin), f, f, W / 2, H / 2, W, H)


def test_axis_ray_at_principal_point():
    cam = Camera(np.eye(3), np.zeros(3), 10.0, 10.0, 4.5, 4.5, 9, 9)
    r = plucker_map(cam)[4, 4]
    assert np.allclose(r, [0, 0, 0, 0, 0, 1, 0, 0, 0], atol=1e-15)


def test_moment_by_hand():
    cam = Camera(np.eye(3), np.array([1.0, 0, 0]), 10.0, 10.0, 4.5, 4.5, 9, 9)
    r = plucker_map(cam)[4, 4]
    assert np.allclose(r[3:6], [0, 0, 1]) and np.allclose(r[6:], [0, -1, 0])


@given(st.integers(0, 2**32 - 1))
def test_ray_invariants(seed):
    rng = np.random.default_rng(seed)
    R = Rotation.random(random_state=seed).as_matrix()
    cam = Camera(R, rng.normal(size=3), 20.0, 25.0, 5.0, 3.0, 10, 6)
    r = plucker_map(cam)
    d = r[..., 3:6]
    assert np.abs(np.linalg.norm(d, axis=-1) - 1).max() < 1e-9
    assert np.abs(np.sum(r[..., 6:] * d, axis=-1)).max() < 1e-9
    assert np.array_equal(r[..., 6:], np.cross(r[..., :3], d))


def test_focal_scaling_halves_corner_tangent():
    a = plucker_map(cam_identity(f=10.0))[0, 0, 3:6]
    b = plucker_map(cam_identity(f=20.0))[0, 0, 3:6]
    assert np.isclose(b[0] / b[2], 0.5 * a[0] / a[2], rtol=1e-12)


def test_posed_image_layout():
    cam = cam_identity()
    rays = plucker_map(cam)
    img = np.zeros((8, 8, 3))
    posed = make_posed_image(img, rays)
    assert posed.shape[-1] == 12 and not posed[..., :3].any()
    a, b = split_posed_image(posed)
    assert np.array_equal(a, img) and np.array_equal(b, rays)
    with pytest.raises(DimensionError):
        make_posed_image(np.zeros((4, 8, 3)), rays)


def test_project_point():
    cam = Camera(np.eye(3), np.zeros(3), 100.0, 100.0, 50.0, 50.0, 100, 100)
    assert project_point(cam, [0, 0, 2]) == (50.0, 50.0, 2.0)
    assert project_point(cam, [1, 0, 1]) == (150.0, 50.0, 1.0)
    with pytest.raises(BehindCamera):
        project_point(cam, [0, 0, -1])


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.ones((3, 3)), np.zeros(3), 1, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), -1, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), 1, 1, 5, 1, 4, 4)


def test_scene_determinism_and_background():
    a, b = synth_scene(7, 2, 16, 16, 5), synth_scene(7, 2, 16, 16, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    empty = synth_scene(1, 2, 16, 16, 0, background=(0.2, 0.3, 0.4))
    assert np.allclose(empty.images[0], [0.2, 0.3, 0.4])
    with pytest.raises(DimensionError):
        synth_scene(0, 2, 20, 20, 3, divisor=32)


def test_every_view_sees_primitives():
    scene = synth_scene(3, 4, 32, 32, 12)
    assert all(img.max() > 0.05 for img in scene.images)


def test_rigid_motion_consistency():
    scene = synth_scene(2, 2, 16, 16, 6)
    R = Rotation.from_euler("xyz", [0.3, -0.2, 0.5]).as_matrix()
    t = np.array([0.5, -1.0, 2.0])
    blobs = scene.blobs.transformed(R, t)
    for cam, img in zip(scene.cameras, scene.images):
        moved = splat_blobs(cam.transformed(R, t), blobs)
        assert np.abs(moved - img).max() < 1e-6


def test_scene_round_trip(tmp_path):
    scene = synth_scene(5, 3, 16, 16, 4)
    save_scene(scene, tmp_path / "s.bin")
    back = load_scene(tmp_path / "s.bin")
    assert (tmp_path / "s.json").exists()
    assert back.seed == 5 and len(back.blobs) == 4
    for a, b in zip(scene.images, back.images):
        assert np.array_equal(a, b)
    for a, b in zip(scene.cameras, back.cameras):
        assert np.array_equal(a.rotation, b.rotation) and a.fx == b.fx
    assert (tmp_path / "s.bin").read_bytes() == _resave(back, tmp_path)


def _resave(scene, d):
    save_scene(scene, d / "t.bin")
    return (d / "t.bin").read_bytes()
