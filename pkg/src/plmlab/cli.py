"""plm-lab command line: parameter counts, cost model, cache sizes, search, bench, sparsity, training math."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import bench, cost, preference, schedule, sparsity
from .config import CANDIDATES, ConfigError, ModelConfig, get_preset, load_config
from .model import build_model, count_params
from .tensor import make_rng


class UsageError(Exception):
    pass


# -- output helpers ---------------------------------------------------------

def _emit(args, payload, rows=None, text=None):
    """Write ``payload`` as json, ``rows`` as csv, or ``text`` (default) to --out or stdout."""
    fmt = args.format or ("csv" if text is None and rows is not None else "text")
    if fmt == "json":
        out = json.dumps(payload, indent=2, default=_json_default) + "\n"
    elif fmt == "csv":
        if rows is None:
            rows = [payload] if isinstance(payload, dict) else payload
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        out = buf.getvalue()
    else:
        out = text if text is not None else json.dumps(payload, indent=2, default=_json_default) + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _config(args, default: str | None = None) -> tuple[str, ModelConfig]:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        return Path(args.config).stem, load_config(args.config)
    name = args.preset or default
    if name is None:
        raise UsageError("need --config or --preset")
    return name, get_preset(name)


def _profile(args):
    if args.io_bw is None and args.flops is None:
        return None
    if args.io_bw is None or args.flops is None:
        raise UsageError("--io-bw and --flops go together")
    return cost.HardwareProfile("cli", args.io_bw, args.flops)


def _lines(pairs) -> str:
    width = max(len(k) for k, _ in pairs)
    out = []
    for k, v in pairs:
        if isinstance(v, int) and not isinstance(v, bool):
            v = f"{v:,}"
        out.append(f"{k:<{width}}  {v}")
    return "\n".join(out) + "\n"


# -- subcommands ------------------------------------------------------------

def cmd_params(args):
    name, cfg = _config(args)
    emb, non_emb = count_params(cfg)
    payload = {"model": name, "embedding": emb, "non_embedding": non_emb, "total": emb + non_emb}
    _emit(args, payload, text=_lines(list(payload.items())))


def cmd_cost(args):
    name, cfg = _config(args)
    fn = cost.prefill_cost if args.phase == "prefill" else cost.generate_cost
    rep = fn(cfg, args.n, bit_width=args.bits, profile=_profile(args), include_head=args.include_head)
    payload = {"model": name, **rep.to_dict()}
    flat = {k: v for k, v in payload.items() if k != "breakdown"}
    flat.update({f"macs_{k}": v for k, v in rep.breakdown.items()})
    _emit(args, payload, rows=[flat], text=_lines(list(flat.items())))


def cmd_cache(args):
    name, cfg = _config(args)
    if (args.n is None) == (args.tokens is None):
        raise UsageError("give exactly one of --n (decode position) or --tokens")
    tokens = args.tokens if args.tokens is not None else args.n - 1
    if tokens < 0:
        raise ValueError("cached token count must be >= 0")
    nbytes = cost.cache_bytes_for(cfg, tokens, args.bits)
    payload = {"model": name, "attention_kind": cfg.attention_kind, "cached_tokens": tokens,
               "bit_width": args.bits, "cache_bytes": nbytes}
    text = _lines([("model", name), ("cached_tokens", tokens), ("bit_width", args.bits),
                   ("cache_bytes", f"{nbytes:,} bytes")])
    _emit(args, payload, text=text)


def cmd_search(args):
    if args.config or args.preset:
        names = args.preset.split(",") if args.preset else []
        cands = {n: get_preset(n) for n in names}
        for path in (args.config.split(",") if args.config else []):
            cands[Path(path).stem] = load_config(path)
    else:
        cands = dict(CANDIDATES)
    rows = cost.rank_architectures(cands, n=args.n, profile=_profile(args), sort_key=args.sort,
                                   bit_width=args.bits, descending=args.descending)
    text = "".join(f"{r['rank']:>2}  {r['name']:<12} params={r['params_nonemb'] / 1e9:.4f}B "
                   f"macs={r['macs'] / 1e9:.2f}G macs/param={r['macs_per_param']:.2f} "
                   f"cache={r['cache_bytes']:,}\n" for r in rows)
    _emit(args, rows, rows=rows, text=text)


def cmd_bench(args):
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    target = args.config or args.preset or "plm-micro"
    records = []
    for q in args.quant.split(","):
        spec = bench.BenchSpec(config=target, quant=q, prefill_tokens=args.prefill,
                               gen_tokens=args.gen, trials=args.trials, warmup_trials=args.warmup,
                               offload_layers=args.offload, seed=args.seed,
                               storage_dir=args.storage_dir)
        records.append(bench.run_latency_bench(spec))
    fmt = args.format or "csv"
    if args.out:
        bench.emit_report(records, fmt, args.out)
        return
    if fmt == "json":
        sys.stdout.write(json.dumps([r.to_dict() for r in records], indent=2) + "\n")
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=bench.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(bench.csv_rows(records))
        sys.stdout.write(buf.getvalue())


def _dataset(args, cfg):
    if args.dataset:
        path = Path(args.dataset)
        data = np.load(path) if path.suffix == ".npy" else json.loads(path.read_text())
        return data
    return make_rng(args.seed + 7).integers(0, cfg.vocab_size, size=args.tokens)


def _sparsity_model(args):
    name, cfg = _config(args, default="plm-micro")
    model = build_model(cfg, args.seed)
    if args.dead_fraction:
        model = sparsity.with_dead_units(model, args.dead_fraction)
    return name, model


def _rates(args):
    if args.rates is None:
        return sparsity.DEFAULT_RATES
    return [float(r) for r in args.rates.split(",")]


def cmd_sparsity(args):
    name, model = _sparsity_model(args)
    data = _dataset(args, model.cfg)
    if args.action == "measure":
        zf = sparsity.activation_sparsity_measure(model, data)
        payload = {"model": name, "zero_fraction": zf}
        _emit(args, payload, text=_lines([("model", name), ("zero_fraction", f"{zf:.6f}")]))
    elif args.action == "sweep":
        reports = sparsity.sparsity_sweep(model, data, _rates(args))
        rows = sparsity.sweep_rows(reports)
        fmt = args.format or "csv"
        if fmt == "csv":
            out = sparsity.sweep_csv(reports)
            if args.out:
                Path(args.out).write_text(out)
            else:
                sys.stdout.write(out)
        else:
            args.format = fmt
            _emit(args, rows, rows=rows)
    else:
        rep = sparsity.determine_sparsity_rate(model, data, args.delta_ppl, _rates(args),
                                               literal=args.literal)
        if rep is None:
            payload = {"model": name, "rate": None}
            _emit(args, payload, text="no candidate rate satisfies the perplexity condition\n")
            return
        payload = {"model": name, **rep.to_dict()}
        _emit(args, payload, text=_lines([(k, v) for k, v in payload.items()
                                          if k != "layer_thresholds"]))


def cmd_schedule(args):
    fc = None
    if args.final_cosine_start is not None:
        fc = schedule.FinalCosine(args.final_cosine_start, args.final_cosine_end_lr)
    s = schedule.WsdcSchedule(args.total_steps, args.warmup_fraction, args.peak_lr, args.decay_end_lr,
                              args.stable_end, args.decay_end, args.constant_lr, fc)
    rows = [{"step": t, "lr": lr} for t, lr in schedule.schedule_table(s, args.every)]
    if args.format in (None, "csv", "text"):
        args.format = "csv"
    _emit(args, rows, rows=rows)


def cmd_prefloss(args):
    if args.batch:
        batch = preference.PreferenceBatch.from_dict(json.loads(Path(args.batch).read_text()))
    else:
        batch = preference.random_batch(make_rng(args.seed), args.random)
    params = preference.LossParams(args.alpha, args.beta_dpo, args.beta_refine)
    l_dpo, _ = preference.dpo_loss(batch, params.beta_dpo)
    payload = {"n": len(batch), "dpo_loss": l_dpo,
               "reward_accuracy": preference.implicit_reward_accuracy(batch, params.beta_dpo)}
    fn, x0 = preference.as_vector_fn(preference.dpo_loss, batch, params.beta_dpo)
    payload["dpo_grad_rel_err"] = preference.grad_check(fn, x0)
    if batch.has_refinement:
        payload["refine_loss"] = preference.refine_loss(batch, params.beta_refine)[0]
        payload["aries_loss"] = preference.aries_loss(batch, params)[0]
        fn, x0 = preference.as_vector_fn(preference.aries_loss, batch, params)
        payload["aries_grad_rel_err"] = preference.grad_check(fn, x0)
    _emit(args, payload, text=_lines(list(payload.items())))


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config JSON file")
    common.add_argument("--preset", help="named preset (see config.PRESETS)")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--format", choices=("json", "csv", "text"))
    common.add_argument("--seed", type=int, default=0)

    hw = argparse.ArgumentParser(add_help=False)
    hw.add_argument("--io-bw", type=float, help="bytes/s for the latency estimate")
    hw.add_argument("--flops", type=float, help="FLOP/s for the latency estimate")

    p = argparse.ArgumentParser(prog="plm-lab", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("params", parents=[common], help="parameter counts")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("cost", parents=[common, hw], help="MACs, cache and latency for one phase")
    s.add_argument("--n", type=int, required=True, help="prompt length, or decode position")
    s.add_argument("--phase", choices=("prefill", "decode"), default="prefill")
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--include-head", action="store_true")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("cache", parents=[common], help="KV-cache bytes")
    s.add_argument("--n", type=int, help="decode position; N-1 tokens are cached")
    s.add_argument("--tokens", type=int, help="number of cached tokens")
    s.add_argument("--bits", type=int, default=16)
    s.set_defaults(func=cmd_cache)

    s = sub.add_parser("search", parents=[common, hw], help="rank candidate architectures")
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--sort", choices=cost.RANK_KEYS, default="macs")
    s.add_argument("--descending", action="store_true")
    s.add_argument("--bits", type=int, default=16)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("bench", parents=[common], help="prefill/generate latency benchmark")
    s.add_argument("--quant", default="fp16,q8,q4", help="comma list of fp16,q8,q4")
    s.add_argument("--prefill", type=int, default=512)
    s.add_argument("--gen", type=int, default=128)
    s.add_argument("--trials", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--offload", type=int, default=0, help="layers re-read from storage per use")
    s.add_argument("--storage-dir")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sparsity", parents=[common], help="activation sparsity tools")
    s.add_argument("action", choices=("measure", "sweep", "determine"))
    s.add_argument("--dataset", help="token ids as a JSON list (or list of lists) or .npy")
    s.add_argument("--tokens", type=int, default=256, help="random stream length without --dataset")
    s.add_argument("--rates", help="comma list of ascending candidate rates")
    s.add_argument("--delta-ppl", type=float, default=1.0)
    s.add_argument("--literal", action="store_true", help="accept only rates that lower perplexity")
    s.add_argument("--dead-fraction", type=float, default=0.0,
                   help="zero this share of up-projection rows first")
    s.set_defaults(func=cmd_sparsity)

    s = sub.add_parser("schedule", parents=[common], help="WSDC learning-rate table")
    s.add_argument("--total-steps", type=int, default=1000)
    s.add_argument("--warmup-fraction", type=float, default=0.01)
    s.add_argument("--peak-lr", type=float, default=3e-4)
    s.add_argument("--decay-end-lr", type=float, default=3e-5)
    s.add_argument("--constant-lr", type=float, default=3e-5)
    s.add_argument("--stable-end", type=int)
    s.add_argument("--decay-end", type=int)
    s.add_argument("--final-cosine-start", type=int)
    s.add_argument("--final-cosine-end-lr", type=float, default=0.0)
    s.add_argument("--every", type=int, default=1)
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("prefloss", parents=[common], help="preference losses on a log-prob batch")
    s.add_argument("--batch", help="JSON file of PreferenceBatch fields")
    s.add_argument("--random", type=int, default=8, help="random batch size without --batch")
    s.add_argument("--alpha", type=float, default=0.8)
    s.add_argument("--beta-dpo", type=float, default=0.1)
    s.add_argument("--beta-refine", type=float, default=0.01)
    s.set_defaults(func=cmd_prefloss)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"plm-lab: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, RuntimeError, MemoryError) as exc:
        print(f"plm-lab: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
