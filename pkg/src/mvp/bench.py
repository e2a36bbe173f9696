"""Closed-form multiplication counts, ablation variants, and the timing harness.

Counts cover every matmul-class op of a network forward (posed images to
per-pixel head outputs) and match ``tensor.counting()`` exactly.
"""
from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import CHUNK_ENTRIES, group_views
from .camera import synth_scene
from .config import ConfigError, ModelConfig, StageConfig

BENCH_HEADER = ("variant", "N", "median_s", "mults", "peak_bytes")
ABLATIONS = ("baseline", "no_pfa", "group_as_frame", "group_as_global", "no_inter", "no_intra",
             "no_dual_p8", "no_dual_p16", "reversed")
DEFAULT_BUDGET = 3 * 1024 ** 3
WARMUP, REPEATS = 3, 5


# ------------------------------------------------------------------ variants


def make_variant(cfg: ModelConfig, spec: str) -> ModelConfig:
    """Ablation ``spec`` applied to a baseline-shaped config (patches p/2p/4p, widths d/2d/4d)."""
    if spec not in ABLATIONS:
        raise ConfigError(f"unknown ablation {spec!r}; choose from {', '.join(ABLATIONS)}")
    if spec == "baseline":
        return cfg
    s1, s2, s3 = cfg.stages
    p, d = s1.patch, s1.dim
    if (s2.patch, s3.patch, s2.dim, s3.dim) != (2 * p, 4 * p, 2 * d, 4 * d):
        raise ConfigError("ablations are defined relative to a baseline pyramid config")
    b = [s.n_blocks for s in cfg.stages]
    name = f"{cfg.name}/{spec}"
    if spec == "no_pfa":
        return replace(cfg, use_pfa=False, name=name)
    if spec in ("group_as_frame", "group_as_global"):
        kind = spec.split("_")[-1]
        return replace(cfg, stages=(s1, replace(s2, scope=kind), s3), name=name)
    if spec == "no_inter":
        return replace(cfg, stages=tuple(replace(s, scope="global") for s in cfg.stages), name=name)
    if spec == "no_intra":
        return replace(cfg, stages=tuple(StageConfig(s.scope, s.n_blocks, 4 * d, p)
                                         for s in cfg.stages), name=name)
    if spec in ("no_dual_p8", "no_dual_p16"):
        pp = p if spec == "no_dual_p8" else 2 * p
        return replace(cfg, stages=tuple(StageConfig("global", n, 4 * d, pp) for n in b), name=name)
    # reversed: widest scope on the coarsest grid first, then expand
    return replace(cfg, stages=(StageConfig("global", b[2], 4 * d, 4 * p),
                                StageConfig("group", b[1], 2 * d, 2 * p),
                                StageConfig("frame", b[0], d, p)), name=name)


# ---------------------------------------------------------------- cost model


@dataclass
class StageCost:
    stage: int
    scope: str
    dim: int
    grid: tuple[int, int]
    units: int  # attention units of the stage's widest sub-block
    unit_length: int  # longest unit length L of that sub-block
    frame_length: int
    score_mults: int  # Q K^T over all sub-blocks
    av_mults: int
    proj_mults: int  # qkv and output projections
    mlp_mults: int
    transition_mults: int  # token reduction/expansion into this stage

    @property
    def total(self) -> int:
        return (self.score_mults + self.av_mults + self.proj_mults + self.mlp_mults
                + self.transition_mults)


@dataclass
class CostBreakdown:
    views: int
    stages: list[StageCost] = field(default_factory=list)
    embed_mults: int = 0
    pfa_mults: int = 0
    head_mults: int = 0

    @property
    def attention_score_mults(self) -> int:
        return sum(s.score_mults for s in self.stages)

    @property
    def total(self) -> int:
        return self.embed_mults + self.pfa_mults + self.head_mults + sum(s.total for s in self.stages)


def _unit_lengths(scope: str, group_size: int, n: int, per_view: int) -> list[int]:
    if scope == "frame":
        return [per_view] * n
    m = n if scope == "global" else group_size
    return [len(r) * per_view for r in group_views(n, m)]


def flop_count(cfg: ModelConfig, N: int) -> CostBreakdown:
    """Exact forward multiplication counts for ``N`` views."""
    R = cfg.n_registers
    out = CostBreakdown(N)
    p1 = cfg.stages[0].patch
    h, w = cfg.grid(0)
    out.embed_mults = N * h * w * 12 * p1 * p1 * cfg.stages[0].dim
    prev = None
    for i, s in enumerate(cfg.stages):
        h, w = cfg.grid(i)
        hw, d = h * w, s.dim
        trans = 0
        if prev is not None:
            if s.patch == 2 * prev.patch:  # 2x2/2 conv d->2d on the previous grid + register map
                trans = N * (hw * 4) * prev.dim * s.dim + N * R * prev.dim * s.dim
            elif 2 * s.patch == prev.patch:  # per-token linear d -> 4 * d/2 + register map
                trans = N * (hw // 4) * prev.dim * 4 * s.dim + N * R * prev.dim * s.dim
        per_view = hw + R
        tokens = N * per_view
        frame_units = [per_view] * N
        wide_units = frame_units if s.scope == "frame" else _unit_lengths(s.scope, cfg.group_size,
                                                                          N, per_view)
        sub_blocks = [frame_units] if s.scope == "frame" else [frame_units, wide_units]
        scores = s.n_blocks * sum(sum(L * L * d for L in u) for u in sub_blocks)
        n_sub = s.n_blocks * len(sub_blocks)
        out.stages.append(StageCost(
            stage=i + 1, scope=s.scope, dim=d, grid=(h, w), units=len(wide_units),
            unit_length=max(wide_units), frame_length=per_view, score_mults=scores,
            av_mults=scores, proj_mults=n_sub * 4 * tokens * d * d,
            mlp_mults=n_sub * 2 * cfg.mlp_ratio * tokens * d * d, transition_mults=trans))
        prev = s
    c_f = cfg.fused_dim
    grids = [cfg.grid(i) for i in range(3)]
    if cfg.use_pfa:
        out.pfa_mults = sum(N * g[0] * g[1] * c_f * s.dim for g, s in zip(grids, cfg.stages))
        fine, mid = sorted(grids, key=lambda g: -g[0])[:2]
        for g in (mid, fine):  # one up conv and two fuse convs, all 3x3 same
            out.pfa_mults += 3 * N * g[0] * g[1] * 9 * c_f * c_f
    else:
        g3 = grids[2]
        out.pfa_mults = N * g3[0] * g3[1] * c_f * cfg.stages[2].dim
    fs = cfg.finest_stage
    hf, wf = grids[fs]
    pf = cfg.stages[fs].patch
    out.head_mults = N * hf * wf * c_f * pf * pf * 29
    return out


def counted_mults(cfg: ModelConfig, N: int, seed: int = 0) -> int:
    """Instrumented count from a real forward on a seeded random input."""
    from .model import MVPModel

    model = MVPModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    posed = rng.normal(size=(N, cfg.height, cfg.width, 12))
    with T.no_record(), T.counting() as c:
        model.raw_outputs(posed)
    return c.count


# ------------------------------------------------------------ memory estimate


def peak_bytes(cfg: ModelConfig, N: int, itemsize: int | None = None) -> int:
    """Analytic peak of live forward activations (no tape).

    Per attention sub-block: the token stream, q/k/v, the attention output,
    the MLP hidden layer, and the score buffer (per head once chunked), plus
    the posed-image input.
    """
    itemsize = itemsize or np.dtype(T.get_default_dtype()).itemsize
    R = cfg.n_registers
    worst = 0
    for i, s in enumerate(cfg.stages):
        h, w = cfg.grid(i)
        per_view = h * w + R
        tokens = N * per_view
        heads = s.dim // cfg.head_dim
        units = [[per_view] * N]
        if s.scope != "frame":
            units.append(_unit_lengths(s.scope, cfg.group_size, N, per_view))
        for u in units:
            entries = sum(heads * L * L for L in u)
            if entries > CHUNK_ENTRIES:
                entries = max(u) ** 2
            live = tokens * s.dim * (2 + 3 + 1 + cfg.mlp_ratio) + 2 * entries
            worst = max(worst, live)
    inputs = N * cfg.height * cfg.width * 12
    return int((worst + inputs) * itemsize)


# ----------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    variant: str
    N: int
    median_s: float | None  # None: OOM
    mults: int
    peak_bytes: int

    def cells(self) -> list[str]:
        t = "OOM" if self.median_s is None else f"{self.median_s:.6f}"
        return [self.variant, str(self.N), t, str(self.mults), str(self.peak_bytes)]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(BENCH_HEADER)
    for r in rows:
        wr.writerow(r.cells())
    return buf.getvalue()


def time_forward(cfg: ModelConfig, N: int, warmup: int = WARMUP, repeats: int = REPEATS,
                 seed: int = 0) -> float:
    """Median wall-clock seconds of a no-tape network forward on a seeded scene."""
    from .model import MVPModel

    model = MVPModel(cfg, seed=seed)
    scene = synth_scene(seed, N, cfg.height, cfg.width, 16)
    posed = scene.posed_images()
    times = []
    with T.no_record():
        for k in range(warmup + repeats):
            t0 = time.perf_counter()
            model.raw_outputs(posed)
            if k >= warmup:
                times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_benchmark(cfg: ModelConfig, view_counts, variants=("baseline",), repeats: int = REPEATS,
                  warmup: int = WARMUP, budget: int = DEFAULT_BUDGET, seed: int = 0,
                  out=None, progress=None) -> list[BenchRow]:
    """One row per (variant, N). Runs over ``budget`` bytes, or that raise
    MemoryError, become OOM rows. ``out`` is rewritten atomically after every row."""
    view_counts = list(view_counts)
    if view_counts != sorted(view_counts):
        raise ValueError("view counts must be ascending")
    rows = []
    for name in variants:
        vcfg = make_variant(cfg, name)
        for n in view_counts:
            mults = flop_count(vcfg, n).total
            peak = peak_bytes(vcfg, n)
            median = None
            if peak <= budget:
                try:
                    median = time_forward(vcfg, n, warmup, repeats, seed)
                except MemoryError:
                    median = None
            rows.append(BenchRow(name, n, median, mults, peak))
            if progress is not None:
                progress(rows[-1])
            if out is not None:
                _write_atomic(out, rows_to_csv(rows))
    return rows


def _write_atomic(path, text: str) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def flops_csv(cfg: ModelConfig, view_counts, variants=("baseline",)) -> str:
    """Analytic table: variant, N, per-stage unit lengths, score mults, total mults."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(("variant", "N", "L1", "L2", "L3", "score_mults", "total_mults"))
    for name in variants:
        vcfg = make_variant(cfg, name)
        for n in view_counts:
            c = flop_count(vcfg, n)
            wr.writerow([name, n] + [s.unit_length for s in c.stages]
                        + [c.attention_score_mults, c.total])
    return buf.getvalue()
