"""Perplexity versus masking rate on a micro model, written as CSV.

With --dead-fraction the model first gets that share of FFN units forced to
zero, which reproduces the flat-then-rising shape of a trained sparse model.
"""

import argparse

from plmlab.config import get_preset
from plmlab.model import build_model
from plmlab.sparsity import DEFAULT_RATES, determine_sparsity_rate, sparsity_sweep, sweep_csv, with_dead_units
from plmlab.tensor import make_rng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="plm-micro")
    ap.add_argument("--tokens", type=int, default=256)
    ap.add_argument("--dead-fraction", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="sparsity_sweep.csv")
    args = ap.parse_args()

    cfg = get_preset(args.preset)
    model = build_model(cfg, args.seed)
    if args.dead_fraction:
        model = with_dead_units(model, args.dead_fraction)
    data = make_rng(args.seed + 7).integers(0, cfg.vocab_size, size=args.tokens)
    rates = sorted(set(DEFAULT_RATES) | {0.95, 0.99})
    reports = sparsity_sweep(model, data, rates)
    with open(args.out, "w") as fh:
        fh.write(sweep_csv(reports))
    for rep in reports:
        print(f"r={rep.rate:.2f}  T={rep.threshold:.3g}  ppl={rep.masked_ppl:.6f}  "
              f"delta={rep.masked_ppl - rep.baseline_ppl:+.3g}  zeros={rep.zero_fraction:.4f}")
    best = determine_sparsity_rate(model, data, 1.0, rates)
    print("selected rate:", None if best is None else best.rate)


if __name__ == "__main__":
    main()
