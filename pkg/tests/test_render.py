import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvp import tensor as T
from mvp.camera import COV_FLOOR, Camera
from mvp.gaussians import SH_C0, GaussianSet
from mvp.gradcheck import check_gradients
from mvp.render import load_png, project, psnr, render, save_png, ssim, to_uint8
from mvp.tensor import DimensionError

RED = (1.0, 0.0, 0.0)
BG = (0.2, 0.4, 0.6)


def pinhole(W=9, H=9, f=10.0):
    return Camera(np.eye(3), np.zeros(3), f, f, W / 2, H / 2, W, H)


def splats(means, scales, opacity, colors, quats=None):
    """GaussianSet with view-independent colour/opacity given in activated units."""
    means = np.asarray(means, np.float64).reshape(-1, 3)
    G = len(means)
    scales = np.broadcast_to(np.asarray(scales, np.float64), (G, 3)).copy()
    quats = np.tile([1.0, 0, 0, 0], (G, 1)) if quats is None else np.asarray(quats, np.float64)
    op = np.broadcast_to(np.asarray(opacity, np.float64), (G,))
    alpha = np.zeros((G, 9))
    alpha[:, 0] = np.log(op / (1 - op)) / SH_C0
    col = np.broadcast_to(np.asarray(colors, np.float64), (G, 3))
    csh = np.zeros((G, 3, 4))
    csh[:, :, 0] = np.where(col >= 1, 200.0, np.where(col <= 0, -200.0,
                                                      np.log(np.clip(col, 1e-9, 1 - 1e-9)
                                                             / np.clip(1 - col, 1e-9, 1)))) / SH_C0
    return GaussianSet(T.Tensor(means), T.Tensor(scales), T.Tensor(quats), T.Tensor(alpha),
                       T.Tensor(csh.reshape(G, 12)), np.zeros((G, 3), int))


def random_gaussians(G, seed, spread=1.0, W=8):
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-spread, spread, (G, 2)), rng.uniform(3, 6, G)])
    q = rng.normal(size=(G, 4))
    P = T.parameter
    return GaussianSet(P(means), P(rng.uniform(0.1, 0.4, (G, 3))),
                       P(q / np.linalg.norm(q, axis=1, keepdims=True)), P(rng.normal(size=(G, 9))),
                       P(rng.normal(size=(G, 12))), np.zeros((G, 3), int))


def test_single_splat_centre():
    gs = splats([0, 0, 5.0], 0.1, 0.9, RED)
    img = render(gs, pinhole(), background=BG).data
    assert np.allclose(img[4, 4], 0.9 * np.array(RED) + 0.1 * np.array(BG), atol=1e-6)


def test_two_coincident_splats_cover_three_quarters():
    gs = splats([[0, 0, 5.0], [0, 0, 5.0]], 0.1, 0.5, RED)
    _, alpha = render(gs, pinhole(), return_alpha=True)
    assert abs(alpha[4, 4] - 0.75) < 1e-12


def test_no_gaussians_gives_background():
    gs = splats(np.zeros((0, 3)), 0.1, 0.5, RED)
    img = render(gs, pinhole(), background=BG).data
    assert np.array_equal(img, np.broadcast_to(BG, (9, 9, 3)))


def test_permutation_invariance():
    gs = random_gaussians(15, 0)
    perm = np.random.default_rng(1).permutation(15)
    cam = pinhole(8, 8, 8.0)
    a = render(gs, cam).data
    b = render(gs.subset(perm), cam).data
    assert np.allclose(a, b, atol=1e-14)


def test_on_axis_projection_is_isotropic():
    cam = pinhole(W=16, H=12)
    sp = project(splats([0, 0, 4.0], 0.3, 0.5, RED), cam)
    a, b, c = sp.cov.data[0]
    assert np.allclose(sp.means2d.data[0], [cam.cx, cam.cy])
    assert abs(a - c) < 1e-12 and abs(b) < 1e-12
    assert np.isclose(a - COV_FLOOR, (10.0 * 0.3 / 4.0) ** 2)


def test_doubling_depth_halves_std():
    cam = pinhole(W=32, H=32, f=30.0)
    near = project(splats([0, 0, 3.0], 0.2, 0.5, RED), cam).cov.data[0, 0] - COV_FLOOR
    far = project(splats([0, 0, 6.0], 0.2, 0.5, RED), cam).cov.data[0, 0] - COV_FLOOR
    assert np.isclose(np.sqrt(near), 2 * np.sqrt(far), rtol=1e-12)


def test_behind_camera_is_culled():
    gs = splats([[0, 0, -2.0], [0, 0, 0.005], [0, 0, 3.0]], 0.2, 0.5, RED)
    sp = project(gs, pinhole())
    assert list(sp.index) == [2]


def dense_oracle(gs, cam, bg):
    """Every splat on every pixel, no truncation, sorted by depth."""
    sp = project(gs, cam)
    order = np.lexsort((np.arange(len(sp.depth)), sp.depth))
    ys, xs = np.mgrid[0:cam.height, 0:cam.width] + 0.5
    img = np.zeros((cam.height, cam.width, 3))
    t = np.ones((cam.height, cam.width))
    m, q, col, op = sp.means2d.data, sp.conics.data, sp.colors.data, sp.opacities.data
    for i in order:
        dx, dy = xs - m[i, 0], ys - m[i, 1]
        a = op[i] * np.exp(-0.5 * (q[i, 0] * dx * dx + 2 * q[i, 1] * dx * dy + q[i, 2] * dy * dy))
        img += (a * t)[..., None] * col[i]
        t *= 1 - a
    return img + t[..., None] * np.asarray(bg)


def test_matches_dense_oracle():
    cam = Camera.look_at((0.3, -0.2, -1.0), (0, 0, 4.5), 32, 32, focal=30.0)
    gs = random_gaussians(60, 4, spread=1.5)
    assert psnr(render(gs, cam, background=BG).data, dense_oracle(gs, cam, BG)) > 40


@given(st.integers(0, 10_000))
def test_alpha_in_unit_interval(seed):
    gs = random_gaussians(20, seed, spread=2.0)
    gs.alpha_sh.data[:] *= 5
    _, alpha = render(gs, pinhole(12, 12, 10.0), return_alpha=True)
    assert alpha.min() >= 0 and alpha.max() <= 1


def test_render_gradients():
    gs = random_gaussians(16, 7)
    cam = pinhole(8, 8, 8.0)
    probe = np.random.default_rng(3).normal(size=(8, 8, 3))

    def loss():
        return T.tsum(render(gs, cam, background=BG) * probe)

    params = [gs.means, gs.scales, gs.quats, gs.alpha_sh, gs.color_sh]
    assert check_gradients(loss, params, n_samples=60, seed=1) < 1e-4


# ------------------------------------------------------------------ metrics


def test_psnr_examples():
    a, b = np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)
    assert np.isclose(psnr(a, b), 20.0)
    assert psnr(a, a) == 99.0
    with pytest.raises(DimensionError):
        psnr(a, np.zeros((4, 5, 3)))


def test_ssim_properties():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(24, 24, 3)), rng.uniform(size=(24, 24, 3))
    assert np.isclose(ssim(a, a), 1.0)
    assert np.isclose(ssim(a, b), ssim(b, a), atol=1e-15)
    assert ssim(a, b) < 0.5
    small = rng.uniform(size=(6, 6, 3))
    assert np.isclose(ssim(small, small), 1.0)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(5, 7, 3))
    save_png(img, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.array_equal(to_uint8(back), to_uint8(img))
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
