"""Regenerate tests/golden: a seeded micro weight file with its logits, and a bench report without timings.

Only rerun after an intentional change to initialisation, the file format,
or the accounting; the golden tests exist to catch unintentional ones.
"""

import json
from pathlib import Path

import numpy as np

from plmlab.bench import BenchSpec, run_latency_bench, without_timings
from plmlab.config import get_preset
from plmlab.model import build_model, prefill, save_weights

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"
PROMPT = [1, 7, 42, 99, 3, 250, 511, 0, 17, 64]
BENCH = dict(config="plm-micro", prefill_tokens=32, gen_tokens=8, trials=2, warmup_trials=0, seed=5)


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    model = build_model(get_preset("plm-micro"), seed=1234)
    save_weights(model, GOLDEN / "plm_micro_seed1234.plmw")
    np.save(GOLDEN / "plm_micro_seed1234_logits.npy", prefill(model, PROMPT).logits)

    out = []
    for quant in ("fp16", "q8", "q4"):
        out.append(without_timings(run_latency_bench(BenchSpec(quant=quant, **BENCH))))
    (GOLDEN / "bench_micro.json").write_text(json.dumps({"spec": BENCH, "records": out}, indent=2) + "\n")
    print("wrote", *sorted(p.name for p in GOLDEN.iterdir()))


if __name__ == "__main__":
    main()
