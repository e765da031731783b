"""Wall-clock synthesis cost against sampler steps and anchor count.

Timing does not depend on the weight values, so an untrained full-size model is used
unless --checkpoint is given.

    python scripts/synthesis_timing.py --steps 1,2,3,5 --anchors 100,1000,5000
"""

import argparse
import math

from dawm import pipeline as P
from dawm.diffusion import WorldModel, train_world_model
from dawm.envs import rng_stream
from dawm.idm import IdmModel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--checkpoint", help="world-model checkpoint")
    ap.add_argument("--steps", default="1,2,3")
    ap.add_argument("--anchors", default="100,1000")
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    cfg = P.RunConfig(seed=args.seed)
    ds = P.build_dataset_for(cfg)
    if args.checkpoint:
        wm = WorldModel.load(args.checkpoint)
    else:
        wm, _ = train_world_model(ds, cfg.synthesis.horizon, cfg.diffusion, rng_stream(args.seed, "dwm"), steps=1)
    idm = IdmModel(ds.d_s, ds.d_a, cfg.idm, ds.norm_stats, rng_stream(args.seed, "idm"))

    def best(n_steps, n_anchors):
        sc = P.SynthesisConfig(horizon=wm.horizon, n_steps=n_steps)
        t = math.inf, math.inf
        for _ in range(args.repeats):
            _, st = P.synthesize_dataset(wm, idm, ds, sc, args.seed, anchor_limit=n_anchors)
            t = min(t, (st.sample_seconds + st.idm_seconds, st.sample_seconds))
        return t

    steps = [int(x) for x in args.steps.split(",")]
    anchors = [int(x) for x in args.anchors.split(",")]
    print("n_steps anchors  total_s  sample_s  ms/anchor")
    for n in steps:
        for a in anchors:
            total, sample = best(n, a)
            print(f"{n:7d} {a:7d} {total:8.4f} {sample:9.4f} {1e3 * total / a:10.4f}")


if __name__ == "__main__":
    main()
