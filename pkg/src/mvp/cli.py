"""Command-line entry point: ``python -m mvp <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import difflib
import os
import re
import sys
from pathlib import Path


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """Raises on usage errors and suggests the closest known flag or command."""

    def error(self, message):
        bad = re.findall(r"'([^']*)'", message)
        if "unrecognized arguments:" in message:
            bad += message.split("unrecognized arguments:")[1].split()
        known = _vocabulary(self._root or self)
        hint = ""
        for w in bad:
            close = difflib.get_close_matches(w.split("=")[0], known, n=1)
            if close:
                hint = f" (did you mean {close[0]}?)"
                break
        raise UsageError(f"{self.prog}: error: {message}{hint}")

    _root = None


def _vocabulary(parser) -> list[str]:
    """Every flag and subcommand name reachable from ``parser``."""
    words = []
    for a in parser._actions:
        words += a.option_strings
        if isinstance(a, argparse._SubParsersAction):
            for name, sp in a.choices.items():
                words.append(name)
                words += _vocabulary(sp)
    return words


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _names(s: str) -> list[str]:
    return [x for x in s.split(",") if x]


def build_parser() -> Parser:
    p = Parser(prog="mvp", description="Multi-view pyramid transformer toolkit.")
    p.add_argument("--threads", type=int, default=int(os.environ.get("MVP_THREADS", "1")),
                   help="BLAS worker threads (default: $MVP_THREADS or 1)")
    sub = p.add_subparsers(dest="cmd", parser_class=Parser, required=True)

    scene = sub.add_parser("scene", help="synthetic scenes").add_subparsers(
        dest="action", parser_class=Parser, required=True)
    g = scene.add_parser("gen", help="generate a seeded synthetic scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=4)
    g.add_argument("--size", type=int, help="square images of this size (sets height and width)")
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--prims", type=int, default=24)
    g.add_argument("--divisor", type=int, default=32, help="H and W must be multiples of this")
    g.add_argument("--out", required=True)
    g.add_argument("--png-dir", help="also write the views as PNGs here")

    train = sub.add_parser("train", help="training").add_subparsers(
        dest="action", parser_class=Parser, required=True)
    t = train.add_parser("overfit", help="overfit one scene")
    t.add_argument("--config", default="desk", help="profile name or JSON path")
    t.add_argument("--scene", required=True)
    t.add_argument("--steps", type=int, default=1000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--warmup", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--out", required=True)

    r = sub.add_parser("render", help="render a scene view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--inputs", type=_ints, help="input views (default: all)")
    r.add_argument("--out", required=True)
    r.add_argument("--ply", help="also export the Gaussians as PLY")

    attn = sub.add_parser("attn", help="attention inspection").add_subparsers(
        dest="action", parser_class=Parser, required=True)
    a = attn.add_parser("dump", help="attention weights of one query token")
    src = a.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--config", default="desk")
    a.add_argument("--scene", required=True)
    a.add_argument("--stage", type=int, default=2, choices=(1, 2, 3))
    a.add_argument("--kind", choices=("frame", "group", "global"))
    a.add_argument("--view", type=int, default=0, help="query view")
    a.add_argument("--token", type=int, default=0, help="query token (spatial tokens first, then registers)")
    a.add_argument("--top", type=int, default=3)
    a.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="benchmarks and cost model").add_subparsers(
        dest="action", parser_class=Parser, required=True)
    from .bench import ABLATIONS, DEFAULT_BUDGET, REPEATS, WARMUP

    b = bench.add_parser("run", help="timed forwards over view counts")
    b.add_argument("--config", default="desk")
    b.add_argument("--views", type=_ints, default=[2, 4, 8, 16])
    b.add_argument("--variants", type=_names, default=["baseline"])
    b.add_argument("--warmup", type=int, default=WARMUP)
    b.add_argument("--repeats", type=int, default=REPEATS)
    b.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="bytes; larger runs are OOM rows")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default: stdout)")
    f = bench.add_parser("flops", help="analytic multiplication counts as CSV")
    f.add_argument("--config", default="desk")
    f.add_argument("--views", type=_ints, default=[2, 4, 8, 16])
    f.add_argument("--variants", type=_names, default=["baseline"])

    ab = sub.add_parser("ablate", help="emit an ablation variant config as JSON")
    ab.add_argument("--spec", required=True, choices=ABLATIONS)
    ab.add_argument("--config", default="desk")
    ab.add_argument("--out")

    ev = sub.add_parser("eval", help="image metrics").add_subparsers(
        dest="action", parser_class=Parser, required=True)
    e = ev.add_parser("psnr", help="PSNR/SSIM between matching PNGs of two directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    return p


def set_threads(n: int) -> None:
    """Cap BLAS/OpenMP pools; the rasterizer kernels are single-threaded."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=max(1, n))


# ------------------------------------------------------------------ commands


def cmd_scene_gen(args) -> int:
    from .camera import save_scene, synth_scene
    from .render import save_png

    if args.size:
        args.height = args.width = args.size
    scene = synth_scene(args.seed, args.views, args.height, args.width, args.prims, args.divisor)
    save_scene(scene, args.out)
    if args.png_dir:
        d = Path(args.png_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(scene.images):
            save_png(img, d / f"view{i:03d}.png")
    print(f"wrote {args.out} ({scene.n_views} views, {args.height}x{args.width})")
    return 0


def cmd_train_overfit(args) -> int:
    from .camera import load_scene
    from .config import load_config
    from .model import MVPModel
    from .training import overfit

    cfg = load_config(args.config)
    scene = load_scene(args.scene)
    H, W = scene.images[0].shape[:2]
    if (H, W) != (cfg.height, cfg.width):
        cfg = cfg.with_resolution(H, W)
    model = MVPModel(cfg, seed=args.seed)
    rows = overfit(model, scene, args.steps, args.lr, args.seed, args.warmup, out=args.out,
                   log_every=args.log_every)
    last = rows[-1]
    print(f"final total {last.total:.6g} psnr {last.psnr_train:.2f} -> {args.out}")
    return 0


def cmd_render(args) -> int:
    import numpy as np

    from .camera import load_scene
    from .gaussians import export_ply
    from .model import MVPModel
    from .render import psnr, render, save_png
    from . import tensor as T

    model = MVPModel.load(args.ckpt)
    scene = load_scene(args.scene)
    if not 0 <= args.view < scene.n_views:
        raise ValueError(f"view {args.view} outside 0..{scene.n_views - 1}")
    inputs = args.inputs or list(range(scene.n_views))
    with T.no_record():
        gs = model.predict(np.stack([scene.images[i] for i in inputs]),
                           [scene.cameras[i] for i in inputs])
        img = render(gs, scene.cameras[args.view], background=scene.background).data
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(img, args.out)
    if args.ply:
        export_ply(gs, args.ply)
    print(f"view {args.view}: PSNR {psnr(img, scene.images[args.view]):.2f} dB -> {args.out}")
    return 0


def cmd_attn_dump(args) -> int:
    from .camera import load_scene
    from .config import load_config
    from .dumps import dump_attention, write_dump
    from .model import MVPModel

    scene = load_scene(args.scene)
    if args.ckpt:
        model = MVPModel.load(args.ckpt)
    else:
        cfg = load_config(args.config)
        H, W = scene.images[0].shape[:2]
        model = MVPModel(cfg.with_resolution(H, W))
    d = dump_attention(model, scene.posed_images(), args.stage, (args.view, args.token), args.kind)
    paths = write_dump(d, scene.images, args.out)
    for v, tok, wgt in d.top(args.top):
        print(f"view {v} token {tok} weight {wgt:.6f}")
    print(f"wrote {len(paths)} overlays to {args.out}")
    return 0


def cmd_bench_run(args) -> int:
    from .bench import rows_to_csv, run_benchmark
    from .config import load_config

    cfg = load_config(args.config)
    rows = run_benchmark(cfg, args.views, args.variants, args.repeats, args.warmup, args.budget,
                         args.seed, out=args.out,
                         progress=lambda r: print(",".join(r.cells()), file=sys.stderr))
    if not args.out:
        sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_bench_flops(args) -> int:
    from .bench import flops_csv
    from .config import load_config

    sys.stdout.write(flops_csv(load_config(args.config), args.views, args.variants))
    return 0


def cmd_ablate(args) -> int:
    from .bench import make_variant
    from .config import load_config

    text = make_variant(load_config(args.config), args.spec).to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval_psnr(args) -> int:
    import numpy as np

    from .render import load_png, psnr, ssim

    pred, gt = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred.glob("*.png"))
    if not names:
        raise ValueError(f"no PNGs in {pred}")
    missing = [n for n in names if not (gt / n).exists()]
    if missing:
        raise ValueError(f"missing ground truth for {', '.join(missing)}")
    ps, ss = [], []
    print(f"{'image':<24} {'psnr':>8} {'ssim':>8}")
    for n in names:
        a, b = load_png(pred / n), load_png(gt / n)
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
        print(f"{n:<24} {ps[-1]:8.3f} {ss[-1]:8.4f}")
    print(f"{'mean':<24} {np.mean(ps):8.3f} {np.mean(ss):8.4f}")
    return 0


COMMANDS = {
    ("scene", "gen"): cmd_scene_gen,
    ("train", "overfit"): cmd_train_overfit,
    ("render", None): cmd_render,
    ("attn", "dump"): cmd_attn_dump,
    ("bench", "run"): cmd_bench_run,
    ("bench", "flops"): cmd_bench_flops,
    ("ablate", None): cmd_ablate,
    ("eval", "psnr"): cmd_eval_psnr,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    Parser._root = parser
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    set_threads(args.threads)
    handler = COMMANDS[(args.cmd, getattr(args, "action", None))]
    try:
        return handler(args)
    except Exception as e:  # noqa: BLE001 - reported, not raised
        print(f"mvp {args.cmd}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
