"""Generation-horizon sweep (H in 1, 3, 7) for both agents; writes OUT/table.csv.

    python scripts/horizon_matrix.py --out runs/horizon --set diffusion.steps=20000 --set idm.steps=10000
"""

import argparse
import csv

from dawm import pipeline as P


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="100,101,102")
    ap.add_argument("--horizons", default="1,3,7")
    ap.add_argument("--agents", default="td3bc,iql")
    ap.add_argument("--envs", default=None, help="comma-separated env names")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    base = P.load_config(None, args.set)
    sweep = {"synthesis.horizon": [int(h) for h in args.horizons.split(",")],
             "agent.kind": args.agents.split(",")}
    P.run_matrix(base, sweep, [int(s) for s in args.seeds.split(",")], args.out,
                 envs=args.envs.split(",") if args.envs else None, cache_dir=f"{args.out}/cache", jobs=args.jobs,
                 on_cell=lambda c: print(f"{c.variant:22s} {c.env} seed {c.seed}: "
                                         f"{c.normalized_return if c.error is None else c.error}", flush=True))
    with open(f"{args.out}/table.csv") as f:
        for row in csv.reader(f):
            print("  ".join(f"{x:>18s}" for x in row))


if __name__ == "__main__":
    main()
