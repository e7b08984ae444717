"""Run the whole desk pipeline into one run directory and print the headline numbers.

    python scripts/run_desk.py --run-dir runs/desk [--config cfg.toml] [--seed 0]
"""

import argparse
import json
import time
from pathlib import Path

from ttlvc.config import load_config
from ttlvc.pipeline import PIPELINE, Run, run_pipeline


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--run-dir", default="runs/desk")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stages", nargs="*", default=PIPELINE)
    args = p.parse_args()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    run = Run(Path(args.run_dir), cfg, args.jobs)
    t0 = time.process_time()
    times = run_pipeline(run, args.stages)
    cpu = time.process_time() - t0
    for name, secs in times.items():
        print(f"{name:20s} {secs:8.1f} s")
    print(f"total CPU {cpu / 60:.1f} min")
    (run.root / "timings.json").write_text(json.dumps({"wall": times, "cpu_seconds": cpu}, indent=1) + "\n")
    summary = run.root / "eval" / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        print("mean MCD", {k: round(v, 3) for k, v in s["mean_mcd"].items()})
        print("TTL-VC beats Source on", f"{100 * s['ttlvc_beats_source']:.0f}% of pairs")


if __name__ == "__main__":
    main()
