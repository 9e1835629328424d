"""Rank the seven architecture-search candidates by prefill cost at N tokens."""

import argparse

from plmlab.config import CANDIDATES
from plmlab.cost import RANK_KEYS, HardwareProfile, rank_architectures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--sort", choices=RANK_KEYS, default="macs")
    ap.add_argument("--io-bw", type=float, default=None, help="bytes/s, enables latency column")
    ap.add_argument("--flops", type=float, default=None)
    args = ap.parse_args()

    profile = None
    if args.io_bw and args.flops:
        profile = HardwareProfile("cli", args.io_bw, args.flops)
    rows = rank_architectures(CANDIDATES, n=args.n, profile=profile, sort_key=args.sort)
    print(f"{'rank':>4} {'name':<8} {'params(B)':>10} {'MACs(G)':>9} {'MACs/param':>10} {'cache(B)':>12}")
    for r in rows:
        print(f"{r['rank']:>4} {r['name']:<8} {r['params_nonemb'] / 1e9:>10.4f} {r['macs'] / 1e9:>9.2f} "
              f"{r['macs_per_param']:>10.2f} {r['cache_bytes']:>12,}")


if __name__ == "__main__":
    main()
