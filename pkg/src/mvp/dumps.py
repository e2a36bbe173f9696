"""Attention dumps for a single query token, with PNG overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import attention_map
from .pyramid import mvp_forward
from .render import save_png


@dataclass
class AttentionDump:
    stage: int  # 1-based
    kind: str  # sub-block scope: frame | group | global
    block: int
    query: tuple[int, int]  # (view, token)
    members: list[int]  # views sharing the query's unit
    indices: np.ndarray  # [L, 2] (view, token)
    weights: np.ndarray  # [L]
    grid: tuple[int, int]
    tokens_per_view: int

    def top(self, k: int = 3) -> list[tuple[int, int, float]]:
        # stable order: weight descending, then position in the unit
        order = np.lexsort((np.arange(len(self.weights)), -self.weights))[:k]
        return [(int(self.indices[i, 0]), int(self.indices[i, 1]), float(self.weights[i]))
                for i in order]

    def view_map(self, view: int) -> np.ndarray:
        """Weights on the spatial tokens of one view, [h, w]."""
        h, w = self.grid
        sel = (self.indices[:, 0] == view) & (self.indices[:, 1] < h * w)
        out = np.zeros(h * w)
        out[self.indices[sel, 1]] = self.weights[sel]
        return out.reshape(h, w)

    def to_dict(self, k: int = 3) -> dict:
        return {"stage": self.stage, "kind": self.kind, "block": self.block,
                "query": list(self.query), "members": self.members, "grid": list(self.grid),
                "tokens_per_view": self.tokens_per_view,
                "top": [list(t) for t in self.top(k)],
                "weights": self.weights.tolist()}


def dump_attention(model, posed: np.ndarray, stage: int, query: tuple[int, int],
                   kind: str | None = None, block: int = -1) -> AttentionDump:
    """Weights of ``query`` in one block of ``stage`` (1-based).

    ``kind`` picks the frame sub-block or the stage's wider one (the default).
    """
    cfg = model.cfg
    scfg = cfg.stages[stage - 1]
    kind = kind or scfg.scope
    if kind not in ("frame", scfg.scope):
        raise ValueError(f"stage {stage} has no {kind} sub-block")
    idx = block % scfg.n_blocks
    seen = {}

    def hook(s, k, i, blk, tokens, scope):
        if s == stage - 1 and k == kind and i == idx:
            seen["args"] = (blk, tokens, scope)

    with T.no_record():
        mvp_forward(model, posed, hook=hook, stop_after=stage - 1)
        blk, tokens, scope = seen["args"]
        indices, weights = attention_map(blk, tokens, scope, query, cfg.pose_rope)
    members = sorted({int(v) for v in indices[:, 0]})
    return AttentionDump(stage, kind, idx, tuple(query), members, indices, weights,
                         tuple(tokens.grid), tokens.tokens_per_view)


def overlay(image: np.ndarray, weights: np.ndarray, vmax: float) -> np.ndarray:
    """Red heat overlay of token weights [h, w] upsampled onto image [H, W, 3]."""
    H, W = image.shape[:2]
    h, w = weights.shape
    heat = np.kron(weights, np.ones((H // h, W // w))) / max(vmax, 1e-12)
    heat = np.clip(heat, 0.0, 1.0)[..., None]
    red = np.array([1.0, 0.0, 0.0])
    return (1.0 - 0.6 * heat) * 0.6 * image + 0.6 * heat * red


def write_dump(d: AttentionDump, images, out_dir) -> list[Path]:
    """dump.json plus one overlay PNG per member view; the query patch is outlined."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dump.json").write_text(json.dumps(d.to_dict(), indent=1))
    vmax = max(d.view_map(v).max() for v in d.members)
    paths = []
    h, w = d.grid
    for v in d.members:
        img = overlay(np.asarray(images[v], np.float64), d.view_map(v), vmax)
        if v == d.query[0] and d.query[1] < h * w:
            H, W = img.shape[:2]
            ph, pw = H // h, W // w
            r, c = divmod(d.query[1], w)
            box = img[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw]
            box[[0, -1], :] = (0.0, 1.0, 0.0)
            box[:, [0, -1]] = (0.0, 1.0, 0.0)
        p = out / f"stage{d.stage}_view{v:03d}.png"
        save_png(img, p)
        paths.append(p)
    return paths
