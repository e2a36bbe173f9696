"""Pre-norm attention blocks and the frame / group / global scopes.

An attention *unit* is the token set one softmax ranges over: a single
view, ``M`` consecutive views, or every view. Registers travel with their
view and take part in every unit that contains it. When ``N % M != 0`` the
last group simply holds fewer views.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .config import Scope
from .nn import Linear, Module
from .tensor import DimensionError, Tensor
from .tokenizer import TokenSet

ROPE_BASE = 100.0
# no-record attention over more score entries than this is evaluated head by head
CHUNK_ENTRIES = 1 << 24


class AttentionBlock(Module):
    """LayerNorm -> MHSA with QK RMSNorm -> residual; LayerNorm -> GELU MLP -> residual."""

    def __init__(self, dim: int, head_dim: int, rng: np.random.Generator, mlp_ratio: int = 4):
        if dim % head_dim:
            raise DimensionError(f"dim {dim} not divisible by head_dim {head_dim}")
        self.dim = dim
        self.head_dim = head_dim
        self.heads = dim // head_dim
        self.ln1_g = T.parameter(np.ones(dim))
        self.ln1_b = T.parameter(np.zeros(dim))
        self.qkv = Linear(dim, 3 * dim, rng)
        self.q_norm = T.parameter(np.ones(head_dim))
        self.k_norm = T.parameter(np.ones(head_dim))
        self.proj = Linear(dim, dim, rng)
        self.ln2_g = T.parameter(np.ones(dim))
        self.ln2_b = T.parameter(np.zeros(dim))
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def qk_v(self, x: Tensor, rope=None):
        """Normalised, rotated queries and keys plus values, each [U, H, L, hd]."""
        U, L, d = x.shape
        h = T.layer_norm(x, self.ln1_g, self.ln1_b)
        qkv = self.qkv(h).reshape(U, L, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q = T.rms_norm(qkv[0], self.q_norm)
        k = T.rms_norm(qkv[1], self.k_norm)
        if rope is not None:
            q, k = apply_rope(q, rope), apply_rope(k, rope)
        return q, k, qkv[2]

    def probs(self, x: Tensor, rope=None) -> Tensor:
        q, k, _ = self.qk_v(x, rope)
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        return T.softmax_lastdim(scores)

    def __call__(self, x: Tensor, rope=None) -> Tensor:
        U, L, d = x.shape
        if x.shape[-1] != self.dim:
            raise DimensionError(f"token width {x.shape[-1]} != block width {self.dim}")
        q, k, v = self.qk_v(x, rope)
        scale = 1.0 / np.sqrt(self.head_dim)
        if not T.recording() and U * self.heads * L * L > CHUNK_ENTRIES:
            out = _attend_chunked(q, k, v, scale)
        else:
            attn = T.softmax_lastdim(T.matmul(q, k.transpose(0, 1, 3, 2)) * scale)
            out = T.matmul(attn, v)
        out = out.transpose(0, 2, 1, 3).reshape(U, L, d)
        x = x + self.proj(out)
        h = T.layer_norm(x, self.ln2_g, self.ln2_b)
        return x + self.fc2(T.gelu(self.fc1(h)))


def _attend_chunked(q, k, v, scale) -> Tensor:
    # forward-only, one (unit, head) at a time to bound the score buffer
    qd, kd, vd = q.data, k.data, v.data
    out = np.empty_like(qd)
    U, H, L, hd = qd.shape
    for u in range(U):
        for h in range(H):
            s = T.matmul(qd[u, h], kd[u, h].T).data * scale
            a = T.softmax_lastdim(s).data
            out[u, h] = T.matmul(a, vd[u, h]).data
    return Tensor(out)


# ------------------------------------------------------------- rotary phases


@dataclass(frozen=True)
class Rope:
    cos: np.ndarray  # [L, hd]
    sin: np.ndarray  # [L, hd], sign of the rotate-half folded in
    perm: np.ndarray  # [hd]


@lru_cache(maxsize=64)
def rope_tables(grid: tuple[int, int], n_registers: int, head_dim: int, n_views: int = 1,
                dtype=np.float64) -> Rope:
    """2-D rotary phases over intra-view patch coordinates; registers get none.

    Half of each head rotates with the patch row, the other half with the column.
    """
    h, w = grid
    half = head_dim // 2
    quarter = half // 2
    freqs = ROPE_BASE ** (-np.arange(quarter) / quarter)
    rows, cols = np.divmod(np.arange(h * w), w)
    ang = np.zeros((h * w + n_registers, head_dim))
    for start, pos in ((0, rows), (half, cols)):
        a = pos[:, None] * freqs[None, :]
        ang[: h * w, start:start + quarter] = a
        ang[: h * w, start + quarter:start + half] = a
    perm = np.arange(head_dim)
    sign = np.ones(head_dim)
    for start in (0, half):
        lo = np.arange(start, start + quarter)
        perm[lo], perm[lo + quarter] = lo + quarter, lo
        sign[lo] = -1.0
    ang = np.tile(ang, (n_views, 1))
    return Rope(np.cos(ang).astype(dtype), (np.sin(ang) * sign).astype(dtype), perm)


def apply_rope(x: Tensor, rope: Rope) -> Tensor:
    return x * rope.cos + T.permute_lastdim(x, rope.perm) * rope.sin


# ------------------------------------------------------------------ scopes


def group_views(n_views, M: int) -> list[range]:
    """Consecutive index ranges of at most M views."""
    n = n_views.views if isinstance(n_views, TokenSet) else int(n_views)
    if M < 1:
        raise ValueError("group size must be >= 1")
    return [range(s, min(s + M, n)) for s in range(0, n, M)]


def _units(x: Tensor, g: int) -> list[tuple[Tensor, int]]:
    """Split [N, Lv, d] into batches of equal-size units: (units [U, g*Lv, d], views per unit)."""
    N, Lv, d = x.shape
    full, rem = divmod(N, g)
    out = []
    if full:
        head = x if rem == 0 else x[: full * g]
        out.append((head.reshape(full, g * Lv, d), g))
    if rem:
        out.append((x[full * g:].reshape(1, rem * Lv, d), rem))
    return out


def attend(block: AttentionBlock, t: TokenSet, scope: Scope, pose_rope: str = "intra2d",
           unit_log: list | None = None) -> TokenSet:
    """One block applied independently inside every unit of ``scope``."""
    if t.dim != block.dim:
        raise DimensionError(f"token width {t.dim} != block width {block.dim}")
    x = t.joined()
    N, Lv, d = x.shape
    g = scope.group_size(N)
    outs = []
    for ux, views in _units(x, g):
        rope = None
        if pose_rope == "intra2d":
            rope = rope_tables(tuple(t.grid), t.n_registers, block.head_dim, views,
                               x.data.dtype.type)
        if unit_log is not None:
            unit_log.extend([ux.shape[1]] * ux.shape[0])
        outs.append(block(ux, rope).reshape(ux.shape[0] * views, Lv, d))
    y = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    return t.with_joined(y)


def attention_map(block: AttentionBlock, t: TokenSet, scope: Scope, query: tuple[int, int],
                  pose_rope: str = "intra2d"):
    """Head-averaged attention weights of one query over its unit.

    Returns ``(indices, weights)`` with ``indices`` an [L, 2] array of
    (view, token) pairs; token ids below h*w are spatial, the rest registers.
    """
    view, tok = query
    N = t.views
    if not (0 <= view < N and 0 <= tok < t.tokens_per_view):
        raise IndexError(f"query {query} outside the token set")
    g = scope.group_size(N)
    start = (view // g) * g
    members = list(range(start, min(start + g, N)))
    x = t.joined()
    Lv = x.shape[1]
    ux = x[start:members[-1] + 1].reshape(1, len(members) * Lv, t.dim)
    rope = None
    if pose_rope == "intra2d":
        rope = rope_tables(tuple(t.grid), t.n_registers, block.head_dim, len(members),
                           x.data.dtype.type)
    with T.no_record():
        p = block.probs(ux, rope).data[0]  # [H, L, L]
    row = (view - start) * Lv + tok
    weights = p[:, row, :].mean(axis=0)
    idx = np.array([(members[i // Lv], i % Lv) for i in range(len(members) * Lv)])
    return idx, weights
