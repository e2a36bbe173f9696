"""Overfit the desk profile on a seeded 4-view synthetic scene and report the curve.

    python3 scripts/overfit_desk.py --steps 1000 --out runs/overfit
"""
import argparse
from pathlib import Path

import numpy as np

from mvp import tensor as T
from mvp.camera import save_scene, synth_scene
from mvp.config import desk_profile
from mvp.model import MVPModel
from mvp.render import psnr, render, save_png
from mvp.training import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = synth_scene(args.seed, 4, 64, 64, 24)
    save_scene(scene, out / "scene.bin")
    model = MVPModel(desk_profile(), seed=args.seed)
    rows = overfit(model, scene, args.steps, args.lr, args.seed, out=out, log_every=50)

    first, last = rows[0], rows[-1]
    print(f"total loss {first.total:.5f} -> {last.total:.5f} ({first.total / last.total:.1f}x)")
    print(f"best train PSNR {max(r.psnr_train for r in rows):.2f} dB")
    with T.no_record():
        gs = model.predict(np.stack(scene.images), scene.cameras)
        for i, cam in enumerate(scene.cameras):
            img = render(gs, cam, background=scene.background).data
            save_png(np.concatenate([img, scene.images[i]], axis=1), out / f"view{i}_pred_gt.png")
            print(f"view {i}: {psnr(img, scene.images[i]):.2f} dB")


if __name__ == "__main__":
    main()
