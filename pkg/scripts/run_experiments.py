"""Run the full desk-scale experiment suite and write tables/curves.

    python scripts/run_experiments.py --out results/ [--seeds 0,1,2,3,4] [--nav-epochs 30]
"""

import argparse
import sys
import time
from dataclasses import replace

from gridqa.experiments import SuiteConfig, run_suite, summary_text


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--nav-epochs", type=int, default=30)
    ap.add_argument("--no-qa", action="store_true", help="skip QA training (navigation results are unchanged)")
    ap.add_argument("-q", "--quiet", action="store_true")
    args = ap.parse_args(argv)

    cfg = SuiteConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), train_qa=not args.no_qa)
    cfg = replace(cfg, nav=replace(cfg.nav, epochs=args.nav_epochs))
    t0 = time.time()

    def log(msg):
        print(f"[{time.time() - t0:7.1f}s] {msg}", file=sys.stderr, flush=True)

    result = run_suite(cfg, args.out, log=None if args.quiet else log)
    print(summary_text(result), end="")


if __name__ == "__main__":
    main()
