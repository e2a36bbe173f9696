"""Patchify posed images into tokens and the inverse per-pixel layout.

Patch layout (bit-exact): patches are numbered row-major over the
``(H/p, W/p)`` grid; inside a patch the flat feature index is
``c * p * p + row * p + col`` (channel-major, then row-major pixels).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class TokenSet:
    spatial: Tensor  # [N, h*w, dim]
    registers: Tensor  # [N, R, dim]
    grid: tuple[int, int]
    stage_tag: int = 1

    @property
    def views(self) -> int:
        return self.spatial.shape[0]

    @property
    def dim(self) -> int:
        return self.spatial.shape[-1]

    @property
    def n_registers(self) -> int:
        return self.registers.shape[1]

    @property
    def tokens_per_view(self) -> int:
        return self.grid[0] * self.grid[1] + self.n_registers

    def joined(self) -> Tensor:
        """[N, h*w + R, dim], spatial tokens first."""
        return T.concat([self.spatial, self.registers], axis=1)

    def with_joined(self, x: Tensor, **kw) -> "TokenSet":
        hw = self.grid[0] * self.grid[1]
        return replace(self, spatial=x[:, :hw], registers=x[:, hw:], **kw)


def patchify(img, p: int):
    """[..., H, W, C] -> [..., (H/p)(W/p), C*p*p]. Works on arrays and Tensors."""
    *lead, H, W, C = img.shape
    if H % p or W % p:
        raise DimensionError(f"image {H}x{W} is not divisible by patch size {p}")
    h, w = H // p, W // p
    n = len(lead)
    x = img.reshape(*lead, h, p, w, p, C)
    axes = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    return x.transpose(axes).reshape(*lead, h * w, C * p * p)


def unpatchify(features, p_out: int, grid: tuple[int, int]):
    """[..., h*w, C] -> [..., h*p, w*p, C/p^2]; exact inverse of ``patchify``."""
    *lead, L, C = features.shape
    h, w = grid
    if h * w != L:
        raise DimensionError(f"{L} tokens do not form a {h}x{w} grid")
    if C % (p_out * p_out):
        raise DimensionError(f"{C} channels not divisible by p^2 = {p_out * p_out}")
    c = C // (p_out * p_out)
    n = len(lead)
    x = features.reshape(*lead, h, w, c, p_out, p_out)
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    return x.transpose(axes).reshape(*lead, h * p_out, w * p_out, c)


def embed(patches, weight, bias, registers, grid: tuple[int, int]) -> TokenSet:
    """Linear projection of [N, L, 12p^2] patches plus shared register tokens."""
    pd = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if pd.shape[-1] != weight.shape[0]:
        raise DimensionError(f"patch length {pd.shape[-1]} does not match projection {weight.shape}")
    if registers.shape[-1] != weight.shape[1]:
        raise DimensionError("register width differs from the embedding width")
    n = pd.shape[0]
    spatial = T.matmul(patches, weight) + bias
    regs = registers.reshape(1, *registers.shape)
    regs = regs + T.Tensor(np.zeros((n, 1, 1)))  # broadcast to every view
    return TokenSet(spatial, regs, grid, stage_tag=1)
