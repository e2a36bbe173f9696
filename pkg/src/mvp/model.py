"""The full network: tokenizer, three stages, fusion, and Gaussian head."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .camera import plucker_map
from .config import ModelConfig
from .gaussians import N_CHANNELS, GaussianSet, PyramidFusion, decode_gaussians, head_outputs, pfa
from .nn import Linear, Module
from .pyramid import Stage, make_transition, mvp_forward


class MVPModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        s0 = cfg.stages[0]
        self.embed = Linear(12 * s0.patch ** 2, s0.dim, rng)
        self.registers = T.parameter(rng.normal(0.0, 0.02, size=(cfg.n_registers, s0.dim)))
        self.stages = [Stage(s, cfg.head_dim, rng, cfg.mlp_ratio) for s in cfg.stages]
        self.transitions = [make_transition(a, b, rng) for a, b in zip(cfg.stages, cfg.stages[1:])]
        self.fusion = PyramidFusion([s.dim for s in cfg.stages], cfg.fused_dim, rng, cfg.use_pfa)
        pf = cfg.stages[cfg.finest_stage].patch
        self.head = Linear(cfg.fused_dim, pf * pf * N_CHANNELS, rng)

    @property
    def head_patch(self) -> int:
        return self.cfg.stages[self.cfg.finest_stage].patch

    def features(self, posed_images, unit_log=None, hook=None):
        return mvp_forward(self, posed_images, unit_log, hook)

    def raw_outputs(self, posed_images, unit_log=None) -> T.Tensor:
        """Network forward up to the per-pixel head output [N, H, W, 29]."""
        F1, F2, F3 = self.features(posed_images, unit_log)
        fused = pfa(F1, F2, F3, self.fusion)
        return head_outputs(fused, self.head, self.head_patch)

    def predict(self, images, cameras) -> GaussianSet:
        """Gaussians for N views (images [N, H, W, 3], matching cameras)."""
        rays = np.stack([plucker_map(c) for c in cameras])
        posed = np.concatenate([np.asarray(images), rays], axis=-1)
        raw = self.raw_outputs(posed)
        return decode_gaussians(raw, rays, [c.fx for c in cameras], self.cfg.near, self.cfg.far)

    # ------------------------------------------------------------ checkpoints
    #
    # <dir>/manifest.json : {"schema": 1, "config": {...}, "params":
    #                        [{"name", "shape", "offset", "nbytes"}]}
    # <dir>/params.bin    : concatenated little-endian float64 blobs

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model {p.shape}")
            p.data = np.asarray(state[k], dtype=p.data.dtype).copy()

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries, blobs, off = [], [], 0
        for k, p in self.named_parameters():
            b = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            entries.append({"name": k, "shape": list(p.shape), "offset": off, "nbytes": len(b)})
            blobs.append(b)
            off += len(b)
        (d / "params.bin").write_bytes(b"".join(blobs))
        manifest = {"schema": 1, "config": self.cfg.to_dict(), "params": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "MVPModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        model = cls(ModelConfig.from_dict(manifest["config"]))
        buf = (d / "params.bin").read_bytes()
        state = {e["name"]: np.frombuffer(buf, "<f8", int(np.prod(e["shape"])), e["offset"])
                 .reshape(e["shape"]) for e in manifest["params"]}
        model.load_state(state)
        return model
