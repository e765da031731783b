"""Agents trained on real transitions vs on synthesized ones, over several seeds.

    python scripts/real_vs_synthetic.py --out runs/rvs --seeds 100,101,102 --set diffusion.steps=20000
"""

import argparse

import numpy as np

from dawm import pipeline as P


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="100,101,102")
    ap.add_argument("--agent", default="td3bc", choices=["td3bc", "iql"])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    base = P.load_config(None, [f'agent.kind="{args.agent}"'] + args.set)
    results = P.run_matrix(base, {"source": ["real", "dawm"]}, seeds, args.out, cache_dir=f"{args.out}/cache",
                           on_cell=lambda c: print(f"{c.variant:12s} seed {c.seed}: "
                                                   f"{c.normalized_return if c.error is None else c.error}",
                                                   flush=True))
    means = {}
    for source in ("real", "dawm"):
        vals = [r.normalized_return for r in results if r.variant == f"source={source}" and r.error is None]
        means[source] = float(np.mean(vals)) if vals else float("nan")
        print(f"{source:5s} mean {means[source]:.3f} over {len(vals)} seeds")
    print(f"synthetic / real = {means['dawm'] / means['real']:.3f}")


if __name__ == "__main__":
    main()
