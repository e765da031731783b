"""IDM action error against the algebraic inverse of noise-free PointMass2D.

    python scripts/idm_oracle.py --episodes 100 --steps 20000
"""

import argparse
import time

import numpy as np

from dawm import pipeline as P
from dawm.envs import generate_dataset, make_env, rng_stream
from dawm.idm import idm_windows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--episodes", type=int, default=100)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--context", type=int, default=1)
    args = ap.parse_args()

    cfg = P.load_config(None, [f"n_episodes={args.episodes}", f"idm.steps={args.steps}",
                               f"idm.context={args.context}"], seed=args.seed)
    train = P.build_dataset_for(cfg)
    t0 = time.perf_counter()
    model = P.fit_idm(cfg, train)
    print(f"trained {args.steps} steps on {train.n_transitions} transitions in {time.perf_counter() - t0:.0f} s")
    held = generate_dataset(cfg.env, cfg.tier, args.episodes,
                            seed=int(rng_stream(args.seed, "held-out").integers(2 ** 31)))
    W, _ = idm_windows(held, args.context)
    oracle = make_env(cfg.env).inverse_action(W[:, -2], W[:, -1])
    err = model.infer(W) - oracle
    print(f"held-out MSE {np.mean(err ** 2):.2e}, max |err| {np.abs(err).max():.3f} over {len(W)} windows")


if __name__ == "__main__":
    main()
