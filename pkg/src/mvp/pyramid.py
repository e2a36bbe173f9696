"""Three-stage dual hierarchy: widening view scopes, coarsening token grids.

A frame-scope block is a single attention block. A group- or global-scope
block is a pair: frame-wise attention followed by attention over the wider
unit, so a global block is the alternating-attention pattern and
``group(N)`` reproduces it exactly.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import tensor as T
from .attention import AttentionBlock, attend
from .config import ModelConfig, Scope, StageConfig
from .nn import Conv2d, Linear, Module
from .tensor import DimensionError
from .tokenizer import TokenSet, embed, patchify


class Stage(Module):
    def __init__(self, cfg: StageConfig, head_dim: int, rng, mlp_ratio: int = 4):
        self.frame_blocks = [AttentionBlock(cfg.dim, head_dim, rng, mlp_ratio)
                             for _ in range(cfg.n_blocks)]
        if cfg.scope == "frame":
            self.wide_blocks = []
        else:
            self.wide_blocks = [AttentionBlock(cfg.dim, head_dim, rng, mlp_ratio)
                                for _ in range(cfg.n_blocks)]


class TokenReduce(Module):
    """2x2 stride-2 conv on the token grid (dim -> 2 dim); registers by a linear map."""

    def __init__(self, dim: int, rng):
        self.conv = Conv2d(dim, 2 * dim, 2, rng, stride=2)
        self.reg_proj = Linear(dim, 2 * dim, rng)

    def __call__(self, t: TokenSet) -> TokenSet:
        return reduce_tokens(t, self.conv, self.reg_proj)


class TokenExpand(Module):
    """Inverse direction for reversed hierarchies: per-token linear to a 2x2 block of dim/2."""

    def __init__(self, dim: int, rng):
        self.lin = Linear(dim, 2 * dim, rng)
        self.reg_proj = Linear(dim, dim // 2, rng)

    def __call__(self, t: TokenSet) -> TokenSet:
        h, w = t.grid
        c = t.dim // 2
        x = self.lin(t.spatial).reshape(t.views, h, w, 2, 2, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(t.views, 4 * h * w, c)
        return TokenSet(x, self.reg_proj(t.registers), (2 * h, 2 * w), t.stage_tag + 1)


def reduce_tokens(t: TokenSet, conv: Conv2d, reg_proj: Linear) -> TokenSet:
    h, w = t.grid
    if h % 2 or w % 2:
        raise DimensionError(f"token grid {h}x{w} has an odd extent")
    x = t.spatial.reshape(t.views, h, w, t.dim).transpose(0, 3, 1, 2)
    y = conv(x)  # [N, 2d, h/2, w/2]
    d2 = y.shape[1]
    y = y.transpose(0, 2, 3, 1).reshape(t.views, (h // 2) * (w // 2), d2)
    return TokenSet(y, reg_proj(t.registers), (h // 2, w // 2), t.stage_tag + 1)


def run_stage(cfg: StageConfig, t: TokenSet, blocks: Stage, group_size: int = 4,
              pose_rope: str = "intra2d", unit_log: list | None = None, hook=None) -> TokenSet:
    """Apply a stage's blocks; ``hook(kind, index, block, tokens_in, scope)`` sees every sub-block."""
    if t.dim != cfg.dim:
        raise DimensionError(f"stage expects width {cfg.dim}, tokens have {t.dim}")
    wide = cfg.resolve_scope(group_size)
    frame = Scope.frame()
    for i in range(cfg.n_blocks):
        fb = blocks.frame_blocks[i]
        if hook is not None:
            hook("frame", i, fb, t, frame)
        t = attend(fb, t, frame, pose_rope, unit_log)
        if cfg.scope != "frame":
            wb = blocks.wide_blocks[i]
            if hook is not None:
                hook(cfg.scope, i, wb, t, wide)
            t = attend(wb, t, wide, pose_rope, unit_log)
    return t


def make_transition(a: StageConfig, b: StageConfig, rng):
    if b.patch == 2 * a.patch:
        return TokenReduce(a.dim, rng)
    if 2 * b.patch == a.patch:
        return TokenExpand(a.dim, rng)
    return None


def mvp_forward(model, posed_images: np.ndarray, unit_log: list | None = None, hook=None,
                stop_after: int | None = None) -> list[TokenSet]:
    """Stage outputs [F1, F2, F3] for posed images [N, H, W, 12].

    ``hook(stage, kind, index, block, tokens_in, scope)`` observes every sub-block.
    """
    cfg: ModelConfig = model.cfg
    N, H, W, C = posed_images.shape
    if C != 12:
        raise DimensionError(f"posed images need 12 channels, got {C}")
    if (H, W) != (cfg.height, cfg.width):
        raise DimensionError(f"input {H}x{W} does not match the configured {cfg.height}x{cfg.width}")
    p = cfg.stages[0].patch
    patches = patchify(posed_images.astype(T.get_default_dtype(), copy=False), p)
    t = embed(patches, model.embed.weight, model.embed.bias, model.registers, (H // p, W // p))
    feats = []
    for s, scfg in enumerate(cfg.stages):
        if s > 0:
            trans = model.transitions[s - 1]
            if trans is not None:
                t = trans(t)
            else:
                t = replace(t, stage_tag=t.stage_tag + 1)
        stage_hook = None if hook is None else (lambda *a, _s=s: hook(_s, *a))
        t = run_stage(scfg, t, model.stages[s], cfg.group_size, cfg.pose_rope, unit_log, stage_hook)
        feats.append(t)
        if stop_after is not None and s >= stop_after:
            break
    return feats
