import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import sph_harm_y

from mvp import tensor as T
from mvp.camera import Camera, plucker_map
from mvp.gaussians import (CH_QUAT, N_CHANNELS, PLY_FIELDS, SH_C0, PyramidFusion, decode_gaussians,
                           eval_sh, export_ply, head_outputs, opacity_at, pfa, read_ply, sh_basis)
from mvp.gradcheck import check_gradients
from mvp.nn import Linear
from mvp.tensor import DimensionError
from mvp.tokenizer import TokenSet

DEGREE_M = [(0, 0), (1, -1), (1, 0), (1, 1), (2, -2), (2, -1), (2, 0), (2, 1), (2, 2)]


def sphere_quadrature(n_theta=12, n_phi=24):
    x, w = np.polynomial.legendre.leggauss(n_theta)  # cos(theta)
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st_ = np.sqrt(1 - ct ** 2)
    dirs = np.stack([st_ * np.cos(ph), st_ * np.sin(ph), ct], -1).reshape(-1, 3)
    weights = np.repeat(w, n_phi) * 2 * np.pi / n_phi
    return dirs, weights, np.arccos(ct).reshape(-1), ph.reshape(-1)


def test_sh_basis_is_orthonormal():
    dirs, w, _, _ = sphere_quadrature()
    B = sh_basis(dirs, 2)
    gram = (B * w[:, None]).T @ B
    assert np.allclose(gram, np.eye(9), atol=1e-12)


def test_sh_basis_matches_complex_harmonics():
    # real SH magnitudes follow from the complex ones: |Y_l0| and sqrt(2)|Re/Im Y_l|m||
    dirs, _, theta, phi = sphere_quadrature(5, 7)
    B = sh_basis(dirs, 2)
    for k, (l, m) in enumerate(DEGREE_M):
        Y = sph_harm_y(l, abs(m), theta, phi)
        ref = Y.real if m == 0 else np.sqrt(2) * (Y.imag if m < 0 else Y.real)
        assert np.allclose(np.abs(B[:, k]), np.abs(ref), atol=1e-12)


def test_sh_constants():
    assert abs(SH_C0 - 0.282095) < 1e-6
    d = np.array([[0.3, -0.5, 0.81]])
    coeff = np.zeros(9)
    coeff[0] = 2.0
    assert np.isclose(eval_sh(coeff, 2, d / np.linalg.norm(d))[0], 2 * 0.282095, atol=1e-6)
    c1 = np.zeros(4)
    c1[2] = 1.0  # Y_10
    up, down = eval_sh(c1, 1, np.array([[0, 0, 1.0]])), eval_sh(c1, 1, np.array([[0, 0, -1.0]]))
    assert up[0] == -down[0] and up[0] > 0
    assert eval_sh(np.zeros(9), 2, d)[0] == 0
    with pytest.raises(DimensionError):
        eval_sh(np.zeros(4), 2, d)
    with pytest.raises(ValueError):
        sh_basis(d, 3)


@given(arrays(np.float64, 9, elements=st.floats(-3, 3)), arrays(np.float64, 9, elements=st.floats(-3, 3)),
       st.floats(-2, 2))
def test_sh_linear_in_coefficients(a, b, s):
    d = np.array([[0.48, 0.6, 0.64]])
    assert np.isclose(eval_sh(a + s * b, 2, d), eval_sh(a, 2, d) + s * eval_sh(b, 2, d), atol=1e-10)


def test_sh_tensor_path_matches_numpy():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(sh_basis(T.Tensor(d), 2).data, sh_basis(d, 2), atol=1e-15)


# ---------------------------------------------------------------- fusion


def tokens(n, grid, dim, value=None, seed=0):
    rng = np.random.default_rng(seed)
    s = np.full((n, grid[0] * grid[1], dim), value) if value is not None else rng.normal(
        size=(n, grid[0] * grid[1], dim))
    return TokenSet(T.Tensor(s), T.Tensor(np.zeros((n, 4, dim))), grid)


def fusion(seed=0, use_pfa=True):
    return PyramidFusion([8, 16, 32], 8, np.random.default_rng(seed), use_pfa)


def test_pfa_output_grid():
    out = pfa(tokens(2, (8, 8), 8), tokens(2, (4, 4), 16), tokens(2, (2, 2), 32), fusion())
    assert out.shape == (2, 8, 8, 8)
    out = pfa(tokens(2, (8, 8), 8), tokens(2, (4, 4), 16), tokens(2, (2, 2), 32), fusion(use_pfa=False))
    assert out.shape == (2, 8, 8, 8)


def test_pfa_zero_coarse_identity_fuse_is_projected_fine():
    w = fusion()
    for blk in w.fuse:
        blk.conv2.weight.data[:] = 0
        blk.conv2.bias.data[:] = 0
    for c in w.lateral + w.up:
        c.bias.data[:] = 0
    F1 = tokens(1, (8, 8), 8)
    out = pfa(F1, tokens(1, (4, 4), 16, 0.0), tokens(1, (2, 2), 32, 0.0), w)
    lateral = w.lateral[0]
    ref = np.einsum("oc,nchw->nohw", lateral.weight.data[:, :, 0, 0],
                    F1.spatial.data.reshape(1, 8, 8, 8).transpose(0, 3, 1, 2))
    assert np.allclose(out.data, ref, atol=1e-12)


def test_pfa_constant_in_constant_out():
    w = fusion(3)
    for mod in [*w.lateral, *w.up, *(c for b in w.fuse for c in (b.conv1, b.conv2))]:
        mod.bias.data[:] = 0
    out = pfa(tokens(1, (8, 8), 8, 0.7), tokens(1, (4, 4), 16, -0.2), tokens(1, (2, 2), 32, 1.1), w).data
    assert np.allclose(out, out[:, :, :1, :1], atol=1e-12)


def test_pfa_rejects_unrelated_grids():
    with pytest.raises(DimensionError):
        pfa(tokens(1, (8, 8), 8), tokens(1, (3, 3), 16), tokens(1, (2, 2), 32), fusion())


# -------------------------------------------------------------- decoding


def cams(n=2, H=4, W=4):
    return [Camera.look_at((np.sin(i), 0.2, -3.0), (0, 0, 0), W, H, focal=5.0 + i) for i in range(n)]


def decode(raw, cs, near=0.5, far=4.5):
    rays = np.stack([plucker_map(c) for c in cs])
    return decode_gaussians(T.Tensor(raw), rays, [c.fx for c in cs], near, far), rays


def test_decode_midpoint_on_ray():
    cs = cams()
    raw = np.zeros((2, 4, 4, N_CHANNELS))
    raw[..., CH_QUAT.start] = 1.0
    gs, rays = decode(raw, cs)
    assert len(gs) == 2 * 4 * 4
    o, d = rays[..., :3].reshape(-1, 3), rays[..., 3:6].reshape(-1, 3)
    assert np.allclose(gs.means.data, o + 2.5 * d, atol=1e-12)
    view, u, v = gs.source[5]
    assert (view, u, v) == (0, 1, 1)


def test_decode_scales_positive_and_quats_unit():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(2, 4, 4, N_CHANNELS)) * 3
    raw[0, 0, 0, CH_QUAT] = 0.7  # equal quaternion logits
    gs, _ = decode(raw, cams())
    assert np.all(gs.scales.data > 0)
    assert np.allclose(np.linalg.norm(gs.quats.data, axis=1), 1, atol=1e-12)
    assert np.allclose(gs.quats.data[0], 0.5)


def test_decode_validates():
    with pytest.raises(DimensionError):
        decode(np.zeros((2, 4, 4, 28)), cams())
    with pytest.raises(DimensionError):
        decode(np.zeros((2, 4, 4, N_CHANNELS)), cams(2, 4, 8))


def test_opacity_range():
    rng = np.random.default_rng(2)
    gs, _ = decode(rng.normal(size=(1, 4, 4, N_CHANNELS)) * 20, cams(1))
    dirs = rng.normal(size=(16, 3))
    a = opacity_at(gs, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)).data
    assert np.all((a >= 0) & (a <= 1))
    gs.alpha_sh.data[:] = 0
    assert np.all(opacity_at(gs, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)).data == 0.5)


def test_head_output_layout():
    head = Linear(8, 4 * N_CHANNELS, np.random.default_rng(0))
    out = head_outputs(T.Tensor(np.random.default_rng(1).normal(size=(2, 8, 3, 3))), head, 2)
    assert out.shape == (2, 6, 6, N_CHANNELS)
    with pytest.raises(DimensionError):
        head_outputs(T.Tensor(np.zeros((1, 8, 3, 3))), head, 3)


def test_decoder_gradients():
    cs = cams()
    rays = np.stack([plucker_map(c) for c in cs])
    rng = np.random.default_rng(0)
    fused = T.Tensor(rng.normal(size=(2, 8, 2, 2)))
    head = Linear(8, 4 * N_CHANNELS, rng, std=0.3)
    probe = rng.normal(size=(32, 3))

    def loss():
        gs = decode_gaussians(head_outputs(fused, head, 2), rays, [c.fx for c in cs], 0.5, 4.5)
        return T.tsum(gs.means * probe) + T.tsum(gs.scales * probe) + T.tsum(gs.quats[:, :3] * probe) \
            + T.tsum(opacity_at(gs, np.tile([0.0, 0.0, 1.0], (32, 1))))

    assert check_gradients(loss, [head.weight, head.bias], n_samples=40) < 1e-6


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    gs, _ = decode(rng.normal(size=(1, 4, 4, N_CHANNELS)), cams(1))
    export_ply(gs, tmp_path / "g.ply")
    back = read_ply(tmp_path / "g.ply")
    assert list(back) == PLY_FIELDS and len(back["x"]) == 16
    assert np.allclose(back["x"], gs.means.data[:, 0], atol=1e-6)
    assert np.allclose(np.exp(back["scale_1"]), gs.scales.data[:, 1], rtol=1e-6)
    dc = 1 / (1 + np.exp(-SH_C0 * gs.color_sh.data[:, 0]))
    assert np.allclose(0.5 + SH_C0 * back["f_dc_0"], dc, atol=1e-6)
