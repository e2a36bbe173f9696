"""Losses, AdamW, and the single-scene overfit harness.

The perceptual term is replaced by a feature loss over a fixed, randomly
initialised three-layer conv stack (no pretrained network is available).
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .camera import SyntheticScene
from .gaussians import GaussianSet, opacity_at
from .render import psnr, render
from .tensor import DimensionError, Tensor

LAMBDA = 0.2
GAMMA = 0.001
CSV_HEADER = ("step", "mse", "feat", "reg", "total", "psnr_train")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# ------------------------------------------------------------------- losses


class FeatureNet:
    """Frozen random conv stack: 3x3 3->8, 3x3/2 8->16, 3x3/2 16->16, GELU between."""

    def __init__(self, seed: int = 1234):
        rng = np.random.default_rng(seed)
        shapes = [(8, 3, 3, 3), (16, 8, 3, 3), (16, 16, 3, 3)]
        self.strides = (1, 2, 2)
        self.weights = [rng.normal(0.0, math.sqrt(2.0 / (s[1] * 9)), size=s) for s in shapes]

    def __call__(self, img) -> list:
        """[H, W, 3] image -> three feature maps."""
        x = img.transpose(2, 0, 1) if isinstance(img, Tensor) else np.asarray(img).transpose(2, 0, 1)
        feats = []
        for i, (w, s) in enumerate(zip(self.weights, self.strides)):
            if i:
                x = T.gelu(x)
            x = T.conv2d(x, w, stride=s, padding=1)
            feats.append(x)
        return feats


_FEATURE_NETS: dict[int, FeatureNet] = {}


def feature_net(seed: int = 1234) -> FeatureNet:
    if seed not in _FEATURE_NETS:
        _FEATURE_NETS[seed] = FeatureNet(seed)
    return _FEATURE_NETS[seed]


def _mse(a, b) -> Tensor:
    d = a - b
    return T.mean(d * d)


def feature_loss(pred, gt, net: FeatureNet | None = None) -> Tensor:
    """Mean over layers of the MSE between feature responses."""
    net = net or feature_net()
    fp, fg = net(pred), net(gt)
    total = _mse(fp[0], fg[0])
    for a, b in zip(fp[1:], fg[1:]):
        total = total + _mse(a, b)
    return total * (1.0 / len(fp))


def image_loss(preds, gts, lam: float = LAMBDA, net: FeatureNet | None = None):
    """Mean over views of MSE + lam * feature loss; returns (loss, mse, feat, per-view mse)."""
    if len(preds) != len(gts) or not preds:
        raise DimensionError(f"{len(preds)} predictions for {len(gts)} targets")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    mses, feats, per_view = [], [], []
    for p, g in zip(preds, gts):
        if tuple(p.shape) != tuple(np.shape(g)):
            raise DimensionError(f"prediction {p.shape} vs target {np.shape(g)}")
        m = _mse(p, g)
        mses.append(m)
        per_view.append(float(m.data))
        feats.append(feature_loss(p, g, net) if lam else None)
    k = 1.0 / len(preds)
    mse = T.tsum(T.stack(mses)) * k
    feat = T.tsum(T.stack(feats)) * k if lam else Tensor(0.0)
    return mse + feat * lam, mse, feat, per_view


def sample_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform unit vectors on the sphere, [n, 3]."""
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def opacity_reg(gs: GaussianSet, rng) -> Tensor:
    """Mean sigmoid opacity at one random view direction per primitive."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    dirs = sample_directions(rng, len(gs))
    return T.mean(T.absolute(opacity_at(gs, dirs)))


@dataclass
class LossReport:
    mse: float
    feat: float
    reg: float
    total: float
    per_view: list[float] = field(default_factory=list)
    tensor: Tensor | None = field(default=None, repr=False)


def total_loss(preds, gts, gs: GaussianSet, lam: float = LAMBDA, gamma: float = GAMMA,
               rng=0, net: FeatureNet | None = None) -> LossReport:
    img, mse, feat, per_view = image_loss(preds, gts, lam, net)
    reg = opacity_reg(gs, rng)
    total = img + reg * gamma
    return LossReport(float(mse.data), float(feat.data), float(reg.data), float(total.data),
                      per_view, total)


# ---------------------------------------------------------------- optimiser


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices and kernels, never to norms or biases."""
    return p.ndim >= 2


class AdamW:
    def __init__(self, named_params, lr: float = 3e-4, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if self.wd and decays(name, p):
                p.data -= lr * self.wd * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warmup to ``base`` then cosine decay towards 0 at ``total``."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min((step - warmup) / span, 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))


# ------------------------------------------------------------------ overfit


@dataclass
class TrainRow:
    step: int
    mse: float
    feat: float
    reg: float
    total: float
    psnr_train: float

    def cells(self) -> list[str]:
        return [str(self.step)] + [repr(float(x)) for x in
                                   (self.mse, self.feat, self.reg, self.total, self.psnr_train)]


def rows_to_csv(rows: list[TrainRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def train_step(model, scene: SyntheticScene, inputs, targets, rng, lam=LAMBDA, gamma=GAMMA):
    """Forward + backward; returns (LossReport, grads, rendered targets)."""
    images = np.stack([scene.images[i] for i in inputs])
    cams = [scene.cameras[i] for i in inputs]
    with T.Tape() as tape:
        gs = model.predict(images, cams)
        preds = [render(gs, scene.cameras[j], background=scene.background) for j in targets]
        rep = total_loss(preds, [scene.images[j] for j in targets], gs, lam, gamma, rng)
    grads = T.backward(tape, rep.tensor)
    return rep, grads, [p.data for p in preds]


def overfit(model, scene: SyntheticScene, steps: int, lr: float = 1e-3, seed: int = 0,
            warmup: int = 50, inputs=None, targets=None, out=None, log_every: int = 0,
            callback=None) -> list[TrainRow]:
    """Train ``model`` on one scene; row k holds the loss before update k.

    Writes ``train.csv`` and the final checkpoint under ``out`` when given.
    """
    inputs = list(range(scene.n_views)) if inputs is None else list(inputs)
    targets = list(inputs) if targets is None else list(targets)
    rng = np.random.default_rng(seed)
    opt = AdamW(model.named_parameters(), lr=lr)
    rows: list[TrainRow] = []
    for step in range(steps):
        rep, grads, preds = train_step(model, scene, inputs, targets, rng)
        if not np.isfinite(rep.total):
            raise TrainingDiverged(step)
        p = float(np.mean([psnr(im, scene.images[j]) for im, j in zip(preds, targets)]))
        rows.append(TrainRow(step, rep.mse, rep.feat, rep.reg, rep.total, p))
        if log_every and step % log_every == 0:
            print(f"step {step:5d} total {rep.total:.6f} psnr {p:.2f}", flush=True)
        if callback is not None:
            callback(rows[-1])
        opt.step(grads, cosine_lr(step, steps, lr, warmup))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "train.csv", rows_to_csv(rows))
        model.save(out / "ckpt")
    return rows
