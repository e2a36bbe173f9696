"""Pyramidal feature aggregation and the per-pixel Gaussian decoder.

Head output channel layout (29 per pixel)::

    0        ray distance logit
    1:4      scale logits
    4:8      quaternion (w, x, y, z), unnormalised
    8:17     opacity SH, degree 2 (9 coefficients)
    17:29    colour SH, degree 1, channel-major: r0..r3 g0..g3 b0..b3
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module
from .tensor import DimensionError, Tensor
from .tokenizer import TokenSet, unpatchify

N_CHANNELS = 29
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)

CH_DIST = slice(0, 1)
CH_SCALE = slice(1, 4)
CH_QUAT = slice(4, 8)
CH_ALPHA = slice(8, 17)
CH_COLOR = slice(17, 29)


# -------------------------------------------------------- spherical harmonics


def sh_basis(dirs, degree: int):
    """Real SH basis up to ``degree`` (<= 2) at unit directions [..., 3] -> [..., (d+1)^2].

    Numpy in, numpy out; Tensor in, Tensor out.
    """
    if degree not in (0, 1, 2):
        raise ValueError(f"SH degree {degree} unsupported")
    if isinstance(dirs, Tensor):
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        one = T.Tensor(np.ones(x.shape))
        cols = [one * SH_C0]
        if degree >= 1:
            cols += [y * (-SH_C1), z * SH_C1, x * (-SH_C1)]
        if degree >= 2:
            cols += [x * y * SH_C2[0], y * z * SH_C2[1], (z * z * 2.0 - x * x - y * y) * SH_C2[2],
                     x * z * SH_C2[3], (x * x - y * y) * SH_C2[4]]
        return T.stack(cols, axis=-1)
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    cols = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * z * z - x * x - y * y),
                 SH_C2[3] * x * z, SH_C2[4] * (x * x - y * y)]
    return np.stack(cols, axis=-1)


def eval_sh(coeffs, degree: int, dirs):
    """Sum of coefficient * basis over the last axis."""
    k = (degree + 1) ** 2
    if coeffs.shape[-1] != k:
        raise DimensionError(f"degree {degree} needs {k} coefficients, got {coeffs.shape[-1]}")
    basis = sh_basis(dirs, degree)
    if isinstance(coeffs, Tensor) or isinstance(basis, Tensor):
        return T.tsum(coeffs * basis, axis=-1)
    return np.sum(coeffs * basis, axis=-1)


# ----------------------------------------------------------------- fusion


class FuseBlock(Module):
    """x + conv3(gelu(conv3(x)))."""

    def __init__(self, c: int, rng):
        self.conv1 = Conv2d(c, c, 3, rng, same=True, pad_mode="edge")
        self.conv2 = Conv2d(c, c, 3, rng, same=True, pad_mode="edge")

    def __call__(self, x):
        return x + self.conv2(T.gelu(self.conv1(x)))


class PyramidFusion(Module):
    """Lateral 1x1 projections, nearest x2 + 3x3 'up' convs, residual fuse blocks.

    The 3x3 convs replicate borders so constant maps stay constant.
    """

    def __init__(self, stage_dims: list[int], c_f: int, rng, use_pfa: bool = True):
        self.use_pfa = use_pfa
        self.c_f = c_f
        if use_pfa:
            self.lateral = [Conv2d(d, c_f, 1, rng) for d in stage_dims]
            self.up = [Conv2d(c_f, c_f, 3, rng, same=True, pad_mode="edge") for _ in range(2)]
            self.fuse = [FuseBlock(c_f, rng) for _ in range(2)]
        else:
            self.lateral = [Conv2d(stage_dims[-1], c_f, 1, rng)]


def token_map(t: TokenSet) -> Tensor:
    """Spatial tokens [N, h*w, d] -> channel-first map [N, d, h, w]; registers dropped."""
    h, w = t.grid
    return t.spatial.reshape(t.views, h, w, t.dim).transpose(0, 3, 1, 2)


def pfa(F1: TokenSet, F2: TokenSet, F3: TokenSet, weights: PyramidFusion) -> Tensor:
    """Top-down fusion to the finest grid: fuse(up(fuse(up(P_c) + P_m)) + P_f).

    Stages are ordered by grid size, so reversed hierarchies fuse the same way.
    Returns [N, C_f, h_f, w_f].
    """
    feats = [F1, F2, F3]
    if not weights.use_pfa:
        finest = max(feats, key=lambda t: t.grid[0])
        x = weights.lateral[0](token_map(F3))
        f = finest.grid[0] // F3.grid[0]
        if finest.grid[1] // F3.grid[1] != f:
            raise DimensionError("non-uniform upsampling factor")
        return T.upsample_bilinear(x, f)
    order = sorted(range(3), key=lambda i: -feats[i].grid[0])  # stable: fine -> coarse
    fine, mid, coarse = (feats[i] for i in order)
    for a, b in ((fine, mid), (mid, coarse)):
        if a.grid[0] * b.grid[1] != a.grid[1] * b.grid[0] or a.grid[0] % b.grid[0]:
            raise DimensionError(f"grids {a.grid} and {b.grid} are not related by an integer factor")
    P = {i: weights.lateral[i](token_map(feats[i])) for i in order}
    x = weights.up[0](T.upsample_nearest(P[order[2]], mid.grid[0] // coarse.grid[0])) + P[order[1]]
    x = weights.fuse[0](x)
    x = weights.up[1](T.upsample_nearest(x, fine.grid[0] // mid.grid[0])) + P[order[0]]
    return weights.fuse[1](x)


# ----------------------------------------------------------------- decoding


@dataclass
class GaussianSet:
    means: Tensor  # [G, 3] world
    scales: Tensor  # [G, 3] > 0
    quats: Tensor  # [G, 4] unit, (w, x, y, z)
    alpha_sh: Tensor  # [G, 9]
    color_sh: Tensor  # [G, 12], channel-major
    source: np.ndarray  # [G, 3] int (view, u, v)

    def __len__(self):
        return self.means.shape[0]

    def subset(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(T.gather_rows(self.means, idx), T.gather_rows(self.scales, idx),
                           T.gather_rows(self.quats, idx), T.gather_rows(self.alpha_sh, idx),
                           T.gather_rows(self.color_sh, idx), self.source[idx])


def head_outputs(fused: Tensor, head: Linear, patch: int) -> Tensor:
    """[N, C_f, h, w] -> per-pixel raw vectors [N, h*p, w*p, 29]."""
    N, C, h, w = fused.shape
    tok = fused.transpose(0, 2, 3, 1).reshape(N, h * w, C)
    out = head(tok)
    if out.shape[-1] != patch * patch * N_CHANNELS:
        raise DimensionError(f"head emits {out.shape[-1]} channels, expected {patch * patch * N_CHANNELS}")
    return unpatchify(out, patch, (h, w))


def decode_gaussians(raw: Tensor, rays: np.ndarray, focals, near: float, far: float) -> GaussianSet:
    """Activate raw per-pixel head outputs into world-space Gaussians.

    raw  : [N, H, W, 29]
    rays : [N, H, W, 9] Plücker maps of the source views
    """
    N, H, W, C = raw.shape
    if C != N_CHANNELS:
        raise DimensionError(f"expected {N_CHANNELS} channels, got {C}")
    if rays.shape[:3] != (N, H, W):
        raise DimensionError(f"ray maps {rays.shape} do not match head output {raw.shape}")
    G = N * H * W
    flat = raw.reshape(G, C)
    o = rays[..., 0:3].reshape(G, 3)
    d = rays[..., 3:6].reshape(G, 3)
    t = T.sigmoid(flat[:, CH_DIST]) * (far - near) + near  # [G, 1]
    means = t * d + o
    focal = np.repeat(np.asarray(focals, dtype=np.float64), H * W)[:, None]
    scales = T.softplus(flat[:, CH_SCALE]) * (t / focal)
    q = flat[:, CH_QUAT]
    quats = q / T.sqrt(T.tsum(q * q, axis=-1, keepdims=True) + 1e-24)  # eps: all-zero logits
    view, v, u = np.meshgrid(np.arange(N), np.arange(H), np.arange(W), indexing="ij")
    source = np.stack([view.reshape(-1), u.reshape(-1), v.reshape(-1)], axis=1)
    return GaussianSet(means, scales, quats, flat[:, CH_ALPHA], flat[:, CH_COLOR], source)


def opacity_at(gs: GaussianSet, dirs) -> Tensor:
    """sigmoid of the degree-2 opacity SH at unit directions [G, 3]."""
    return T.sigmoid(eval_sh(gs.alpha_sh, 2, dirs))


# -------------------------------------------------------------- PLY export
#
# Binary little-endian PLY, one vertex per Gaussian, float32 properties in
# this order: x y z, nx ny nz (zero), f_dc_0..2, f_rest_0..8 (degree-1 colour
# SH grouped per channel), opacity (logit of the DC opacity), scale_0..2
# (log), rot_0..3 (w x y z), alpha_sh_0..8 (raw opacity SH). f_dc is chosen
# so that 0.5 + SH_C0 * f_dc equals the sigmoid DC colour used here.
PLY_FIELDS = (["x", "y", "z", "nx", "ny", "nz"] + [f"f_dc_{i}" for i in range(3)]
              + [f"f_rest_{i}" for i in range(9)] + ["opacity"]
              + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
              + [f"alpha_sh_{i}" for i in range(9)])


def export_ply(gs: GaussianSet, path) -> None:
    G = len(gs)
    c = gs.color_sh.data.reshape(G, 3, 4)
    dc = 1.0 / (1.0 + np.exp(-SH_C0 * c[:, :, 0]))
    cols = [gs.means.data, np.zeros((G, 3)), (dc - 0.5) / SH_C0, c[:, :, 1:].reshape(G, 9),
            (SH_C0 * gs.alpha_sh.data[:, :1]), np.log(gs.scales.data), gs.quats.data,
            gs.alpha_sh.data]
    table = np.concatenate(cols, axis=1).astype("<f4")
    header = "ply\nformat binary_little_endian 1.0\n" + f"element vertex {G}\n"
    header += "".join(f"property float {f}\n" for f in PLY_FIELDS) + "end_header\n"
    Path(path).write_bytes(header.encode("ascii") + table.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    end = buf.index(b"end_header\n") + len(b"end_header\n")
    lines = buf[:end].decode("ascii").splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    names = [l.split()[-1] for l in lines if l.startswith("property")]
    data = np.frombuffer(buf, dtype="<f4", count=n * len(names), offset=end).reshape(n, len(names))
    return {k: data[:, i] for i, k in enumerate(names)}
