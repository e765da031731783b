"""One-step fidelity of a trained world model against the true PointMass2D dynamics.

    python scripts/fidelity.py --steps 50000 [--checkpoint wm.ckpt] [--save wm.ckpt]
"""

import argparse
import time

import numpy as np

from dawm import pipeline as P
from dawm.data import extract_segment_arrays
from dawm.diffusion import WorldModel
from dawm.envs import make_env, rng_stream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--steps", type=int, default=50_000, help="world-model training steps")
    ap.add_argument("--checkpoint", help="load this world model instead of training one")
    ap.add_argument("--save", help="write the trained world model here")
    ap.add_argument("--anchors", type=int, default=4000)
    args = ap.parse_args()

    cfg = P.load_config(None, [f"diffusion.steps={args.steps}"], seed=args.seed)
    ds = P.build_dataset_for(cfg)
    if args.checkpoint:
        wm = WorldModel.load(args.checkpoint)
    else:
        t0 = time.perf_counter()
        wm = P.fit_world_model(cfg, ds)
        print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f} s")
        if args.save:
            wm.save(args.save)

    seg = extract_segment_arrays(ds, wm.horizon, cfg.diffusion.gamma)
    idx = rng_stream(args.seed, "fidelity").choice(len(seg), min(args.anchors, len(seg)), replace=False)
    s, a, g = seg.states[idx], seg.actions[idx], seg.rtg[idx]
    env = make_env(cfg.env)
    s1, r1 = env.step(s, a)
    disp = np.linalg.norm(s1 - s, axis=1).mean()
    print(f"mean one-step displacement {disp:.4f}")
    print("n_steps omega  state err/disp  reward err")
    for n_steps in (3, wm.schedule.K):
        for omega in (0.0, 1.0):
            x, _ = wm.sample(s, a, wm.guidance(omega=omega, n_steps=n_steps), rng_stream(args.seed, "fidelity-sample"),
                             rtg=g)
            err = np.linalg.norm(x[:, 0, :env.d_s] - s1, axis=1).mean()
            rerr = np.abs(x[:, 0, env.d_s] - r1).mean()
            print(f"{n_steps:7d} {omega:5.1f}  {err / disp:14.3f}  {rerr:10.4f}")


if __name__ == "__main__":
    main()
