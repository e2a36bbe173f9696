"""Stage-2 attention of a patch on a bright landmark after a short overfit.

Qualitative check: once trained, the query should attend to the same blob
in the other views of its group. Writes overlays and prints the top tokens.

    python3 scripts/attention_landmark.py --steps 200 --out runs/landmark
"""
import argparse
from pathlib import Path

import numpy as np

from mvp.camera import project_point, synth_scene
from mvp.config import desk_profile
from mvp.dumps import dump_attention, write_dump
from mvp.model import MVPModel
from mvp.training import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/landmark")
    args = ap.parse_args()

    scene = synth_scene(args.seed, 4, 64, 64, 24)
    model = MVPModel(desk_profile(), seed=args.seed)
    if args.steps:
        overfit(model, scene, args.steps, seed=args.seed, log_every=50)

    # landmark: the most opaque, largest blob; its patch in view 0 is the query
    b = scene.blobs
    k = int(np.argmax(b.opacities * b.scales))
    cam = scene.cameras[0]
    u, v, _ = project_point(cam, b.positions[k])
    patch = model.cfg.stages[1].patch
    grid_w = 64 // patch

    def token_at(u, v):
        r, c = (int(np.clip(x // patch, 0, grid_w - 1)) for x in (v, u))
        return r * grid_w + c

    token = token_at(u, v)

    d = dump_attention(model, scene.posed_images(), 2, (0, token))
    write_dump(d, scene.images, Path(args.out))
    print(f"landmark blob {k}, query view 0 token {token}")
    for view in range(1, scene.n_views):
        uu, vv, _ = project_point(scene.cameras[view], b.positions[k])
        expect = token_at(uu, vv)
        m = d.view_map(view)
        got = int(np.argmax(m))
        print(f"view {view}: landmark token {expect}, most attended token {got} "
              f"(weight {m.max():.4f})")
    print(f"overlays in {args.out}")


if __name__ == "__main__":
    main()
