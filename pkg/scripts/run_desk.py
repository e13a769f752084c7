"""Run the desk-scale comparisons outside pytest and store summaries as JSON.

    python3 scripts/run_desk.py baseline composed --seeds 0 1 2
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import desk  # noqa: E402

RUNS = {
    "baseline": desk.base_run,
    "composed": desk.composed_run,
    "random_ltd": lambda seed: desk.dropping_run("random_ltd", seed),
    "bypass_loss": lambda seed: desk.dropping_run("token_bypass_loss", seed),
    "bypass_random": lambda seed: desk.dropping_run("token_bypass_random", seed),
}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("runs", nargs="+", choices=sorted(RUNS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(desk.SEEDS))
    ap.add_argument("--out", type=Path, default=ROOT / "data" / "desk")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        for name in args.runs:
            t0 = time.time()
            out = args.out / f"{name}_s{seed}"
            summary = desk.run_and_summarize(RUNS[name](seed), log_path=out.with_suffix(".tsv"))
            summary["seconds"] = time.time() - t0
            desk.dump(out.with_suffix(".json"), summary)
            print(f"{name} seed={seed} ppl={summary['final_ppl']:.4f} saving={summary['saving']:.3f} "
                  f"steps={summary['steps']} {summary['seconds']:.0f}s", flush=True)


if __name__ == "__main__":
    main()
