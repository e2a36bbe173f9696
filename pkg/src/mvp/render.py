"""Differentiable Gaussian splatting, image metrics, and PNG I/O.

Projection and shading run as tape ops; the per-pixel compositing is one
numba primitive with a hand-written backward pass. Pixel (u, v) has its
centre at (u + 0.5, v + 0.5). PNGs store linear values as 8-bit with no
gamma curve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

from . import tensor as T
from .camera import COV_FLOOR, Camera
from .gaussians import SH_C0, GaussianSet, eval_sh, sh_basis
from .tensor import DimensionError, Tensor

NEAR_CULL = 0.01
PSNR_CAP = 99.0


# ---------------------------------------------------------------- rasterizer


@numba.njit(cache=True)
def _bin(means, radii, order, H, W):
    """CSR pixel lists of splat ids, each list in depth order."""
    counts = np.zeros(H * W + 1, np.int64)
    boxes = np.zeros((len(order), 4), np.int64)
    for k in range(len(order)):
        i = order[k]
        r = radii[i]
        x0 = max(int(np.floor(means[i, 0] - r)), 0)
        x1 = min(int(np.ceil(means[i, 0] + r)), W)
        y0 = max(int(np.floor(means[i, 1] - r)), 0)
        y1 = min(int(np.ceil(means[i, 1] + r)), H)
        boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3] = x0, x1, y0, y1
        for y in range(y0, y1):
            for x in range(x0, x1):
                counts[y * W + x + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for k in range(len(order)):
        x0, x1, y0, y1 = boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3]
        for y in range(y0, y1):
            for x in range(x0, x1):
                p = y * W + x
                ids[fill[p]] = order[k]
                fill[p] += 1
    return offsets, ids


@numba.njit(cache=True)
def _composite(means, conics, colors, opac, offsets, ids, H, W, bg):
    img = np.empty((H, W, 3), means.dtype)
    trans = np.empty((H, W), means.dtype)
    for y in range(H):
        py = y + 0.5
        for x in range(W):
            px = x + 0.5
            p = y * W + x
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for j in range(offsets[p], offsets[p + 1]):
                i = ids[j]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                power = -0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy
                                + conics[i, 2] * dy * dy)
                a = opac[i] * np.exp(power)
                w = a * t
                c0 += colors[i, 0] * w
                c1 += colors[i, 1] * w
                c2 += colors[i, 2] * w
                t *= 1.0 - a
            img[y, x, 0] = c0 + t * bg[0]
            img[y, x, 1] = c1 + t * bg[1]
            img[y, x, 2] = c2 + t * bg[2]
            trans[y, x] = t
    return img, trans


@numba.njit(cache=True)
def _composite_grad(g, means, conics, colors, opac, offsets, ids, H, W, bg):
    """Reverse pass; pixels in row-major order so accumulation is deterministic."""
    G = means.shape[0]
    dmeans = np.zeros((G, 2), means.dtype)
    dconics = np.zeros((G, 3), means.dtype)
    dcolors = np.zeros((G, 3), means.dtype)
    dopac = np.zeros(G, means.dtype)
    maxlen = 0
    for p in range(H * W):
        maxlen = max(maxlen, offsets[p + 1] - offsets[p])
    ts = np.empty(maxlen, means.dtype)
    alphas = np.empty(maxlen, means.dtype)
    gauss = np.empty(maxlen, means.dtype)
    for y in range(H):
        py = y + 0.5
        for x in range(W):
            px = x + 0.5
            p = y * W + x
            start = offsets[p]
            n = offsets[p + 1] - start
            if n == 0:
                continue
            t = 1.0
            for k in range(n):
                i = ids[start + k]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                e = np.exp(-0.5 * (conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy
                                   + conics[i, 2] * dy * dy))
                ts[k] = t
                gauss[k] = e
                alphas[k] = opac[i] * e
                t *= 1.0 - alphas[k]
            # colour seen behind the current splat, starting from the background
            s0, s1, s2 = bg[0], bg[1], bg[2]
            g0, g1, g2 = g[y, x, 0], g[y, x, 1], g[y, x, 2]
            for k in range(n - 1, -1, -1):
                i = ids[start + k]
                a = alphas[k]
                ti = ts[k]
                dcolors[i, 0] += g0 * a * ti
                dcolors[i, 1] += g1 * a * ti
                dcolors[i, 2] += g2 * a * ti
                da = ti * (g0 * (colors[i, 0] - s0) + g1 * (colors[i, 1] - s1)
                           + g2 * (colors[i, 2] - s2))
                s0 = colors[i, 0] * a + (1.0 - a) * s0
                s1 = colors[i, 1] * a + (1.0 - a) * s1
                s2 = colors[i, 2] * a + (1.0 - a) * s2
                dopac[i] += da * gauss[k]
                dpow = da * a
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                dconics[i, 0] += -0.5 * dx * dx * dpow
                dconics[i, 1] += -dx * dy * dpow
                dconics[i, 2] += -0.5 * dy * dy * dpow
                dmeans[i, 0] += (conics[i, 0] * dx + conics[i, 1] * dy) * dpow
                dmeans[i, 1] += (conics[i, 1] * dx + conics[i, 2] * dy) * dpow
    return dmeans, dconics, dcolors, dopac


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Front-to-back order; equal depths fall back to primitive index."""
    return np.lexsort((np.arange(len(depth)), depth))


def rasterize(means2d, conics, colors, opacities, depth: np.ndarray, radii: np.ndarray,
              H: int, W: int, background=(0.0, 0.0, 0.0)):
    """Alpha-composite screen-space splats. Returns (image Tensor [H,W,3], transmittance [H,W]).

    ``conics`` holds the inverse screen covariance as (A, B, C) for
    [[A, B], [B, C]]. Splats only touch pixels inside their square of
    half-width ``radii``.
    """
    dtype = T.get_default_dtype()
    md, cd, kd, od = (np.ascontiguousarray(T._d(v), dtype=dtype)
                      for v in (means2d, conics, colors, opacities))
    bg = np.asarray(background, dtype=dtype)
    order = depth_order(np.asarray(depth))
    offsets, ids = _bin(md, np.asarray(radii, np.float64), order, H, W)
    img, trans = _composite(md, cd, kd, od, offsets, ids, H, W, bg)

    def vjp(g):
        gm, gc, gk, go = _composite_grad(np.ascontiguousarray(g, dtype=dtype), md, cd, kd, od,
                                         offsets, ids, H, W, bg)
        return gm, gc, gk, go

    return T.record("rasterize", (means2d, conics, colors, opacities), img, vjp), trans


# ---------------------------------------------------------------- projection


@dataclass
class Splats:
    means2d: Tensor  # [S, 2] pixels
    conics: Tensor  # [S, 3]
    cov: Tensor  # [S, 3] screen covariance (a, b, c), floor included
    colors: Tensor  # [S, 3] in [0, 1]
    opacities: Tensor  # [S] in (0, 1)
    depth: np.ndarray  # [S]
    radii: np.ndarray  # [S] pixels, 3 sigma
    index: np.ndarray  # [S] rows of the source GaussianSet


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit (w, x, y, z) quaternions [G, 4] -> rotation matrices [G, 3, 3]."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        [1.0 - (y * y + z * z) * 2.0, (x * y - w * z) * 2.0, (x * z + w * y) * 2.0],
        [(x * y + w * z) * 2.0, 1.0 - (x * x + z * z) * 2.0, (y * z - w * x) * 2.0],
        [(x * z - w * y) * 2.0, (y * z + w * x) * 2.0, 1.0 - (x * x + y * y) * 2.0],
    ]
    return T.stack([T.stack(r, axis=-1) for r in rows], axis=-2)


def _unit(v: Tensor) -> Tensor:
    return v / T.sqrt(T.tsum(v * v, axis=-1, keepdims=True))


def shade(gs: GaussianSet, centre: np.ndarray):
    """View-dependent (colour [G,3] clipped to [0,1], opacity [G]) seen from ``centre``."""
    dirs = _unit(gs.means - centre)
    G = len(gs)
    c = gs.color_sh.reshape(G, 3, 4)
    basis = sh_basis(dirs, 1)  # [G, 4]
    higher = T.tsum(c[:, :, 1:] * basis[:, 1:].reshape(G, 1, 3), axis=-1)
    color = T.clip(T.sigmoid(c[:, :, 0] * SH_C0) + higher, 0.0, 1.0)
    opacity = T.sigmoid(eval_sh(gs.alpha_sh, 2, dirs))
    return color, opacity


def project(gs: GaussianSet, cam: Camera) -> Splats:
    """EWA projection of world Gaussians; drops those at depth <= 0.01."""
    cam_R = cam.rotation  # columns are camera axes in world coordinates
    z_all = (gs.means.data - cam.translation) @ cam_R[:, 2]
    keep = np.flatnonzero(z_all > NEAR_CULL)
    sub = gs.subset(keep) if len(keep) < len(gs) else gs
    pc = T.matmul(sub.means - cam.translation, cam_R)  # [S, 3]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    u = x * inv_z * cam.fx + cam.cx
    v = y * inv_z * cam.fy + cam.cy
    zero = Tensor(np.zeros(len(keep), dtype=pc.data.dtype))
    J = T.stack([T.stack([inv_z * cam.fx, zero, -(x * inv_z * inv_z) * cam.fx], axis=-1),
                 T.stack([zero, inv_z * cam.fy, -(y * inv_z * inv_z) * cam.fy], axis=-1)], axis=-2)
    M = quat_to_rotmat(sub.quats) * sub.scales.reshape(-1, 1, 3)  # R(q) diag(s)
    K = T.matmul(T.matmul(J, cam_R.T), M)  # [S, 2, 3]
    cov = T.matmul(K, K.transpose(0, 2, 1))
    a = cov[:, 0, 0] + COV_FLOOR
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_FLOOR
    det = a * c - b * b
    conics = T.stack([c / det, -b / det, a / det], axis=-1)
    ad, bd, cd = a.data, b.data, c.data
    mid = 0.5 * (ad + cd)
    lam = mid + np.sqrt(np.maximum(mid * mid - (ad * cd - bd * bd), 0.0))
    radii = np.ceil(3.0 * np.sqrt(lam))
    color, opacity = shade(sub, cam.center)
    return Splats(T.stack([u, v], axis=-1), conics, T.stack([a, b, c], axis=-1), color, opacity,
                  z.data.copy(), radii, keep)


def render(gs: GaussianSet, cam: Camera, H: int | None = None, W: int | None = None,
           background=(0.0, 0.0, 0.0), return_alpha: bool = False):
    """Image [H, W, 3] of ``gs`` seen by ``cam``; optionally also accumulated alpha [H, W]."""
    H = cam.height if H is None else H
    W = cam.width if W is None else W
    dtype = gs.means.data.dtype
    if len(gs) == 0:
        img = Tensor(np.broadcast_to(np.asarray(background, dtype), (H, W, 3)).copy())
        return (img, np.zeros((H, W))) if return_alpha else img
    sp = project(gs, cam)
    img, trans = rasterize(sp.means2d, sp.conics, sp.colors, sp.opacities, sp.depth, sp.radii,
                           H, W, background)
    return (img, 1.0 - trans) if return_alpha else img


# ------------------------------------------------------------------ metrics


def _check_pair(img, ref):
    img, ref = np.asarray(img, np.float64), np.asarray(ref, np.float64)
    if img.shape != ref.shape:
        raise DimensionError(f"image extents differ: {img.shape} vs {ref.shape}")
    return img, ref


def psnr(img, ref) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images report 99."""
    img, ref = _check_pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim(img, ref, data_range: float = 1.0) -> float:
    """Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Statistics are taken over 'valid' window positions when the image is
    at least 11 px on each side, otherwise with reflected borders.
    """
    img, ref = _check_pair(img, ref)
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    win = _gauss_window()
    H, W = img.shape[:2]

    def filt(a):
        a = correlate1d(a, win, axis=0, mode="reflect")
        a = correlate1d(a, win, axis=1, mode="reflect")
        if H >= 11 and W >= 11:
            a = a[5:H - 5, 5:W - 5]
        return a

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = filt(img), filt(ref)
    sxx = filt(img * img) - mx * mx
    syy = filt(ref * ref) - my * my
    sxy = filt(img * ref) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------- PNG


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
